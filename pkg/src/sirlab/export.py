#!/usr/bin/env python3
"""
Artifact writers for sirlab runs.

Images (binary PPM, PNG via Pillow), trace and timing CSVs, JSON documents
and the styled XLSX workbook of ablation sweeps.
"""

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from PIL import Image

from .errors import ParameterError
from .sirloop import PhaseTiming, RunTrace

TRACE_COLUMNS = ["k", "t1", "t2", "nfe", "loss", "psnr", "wall_ms"]
TIMING_COLUMNS = ["update", "render_ms", "eps_ms", "backprop_ms", "codec_ms", "total_ms", "nfe"]

# Flatland views are 1 pixel tall; rows are repeated for viewing
STRIP_ROW_HEIGHT = 8

# Styling constants
HEADER_FONT = Font(bold=True, color="FFFFFF")
HEADER_FILL = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
HEADER_ALIGNMENT = Alignment(horizontal="center", vertical="center", wrap_text=True)
THIN_BORDER = Border(
    left=Side(style="thin"),
    right=Side(style="thin"),
    top=Side(style="thin"),
    bottom=Side(style="thin"),
)


# =============================================================================
# Images
# =============================================================================


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] image to 8-bit RGB (grayscale is replicated)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"Cannot export image of shape {image.shape}")
    return arr


def flatland_strip(views: np.ndarray) -> np.ndarray:
    """Stack 1D views as rows, each repeated STRIP_ROW_HEIGHT times."""
    views = np.atleast_2d(np.asarray(views))
    return np.repeat(views, STRIP_ROW_HEIGHT, axis=0)


def write_ppm(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Binary P6 PPM."""
    path = Path(path)
    Image.fromarray(to_uint8(image)).save(path, format="PPM")
    return path


def write_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def write_views(
    images: np.ndarray, out_dir: Union[str, Path], png: bool = False, stem: str = "view"
) -> list[Path]:
    """
    Write a stack of renders: one strip image for 1D views, one file per
    view for 2D views.
    """
    out_dir = Path(out_dir)
    writer = write_png if png else write_ppm
    ext = ".png" if png else ".ppm"
    images = np.asarray(images)
    if images.ndim == 2:
        return [writer(flatland_strip(images), out_dir / f"{stem}s_strip{ext}")]
    return [writer(img, out_dir / f"{stem}_{j:02d}{ext}") for j, img in enumerate(images)]


# =============================================================================
# CSV / JSON
# =============================================================================


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def write_csv(
    rows: Iterable[Sequence[Any]], headers: Sequence[str], path: Union[str, Path]
) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_trace_csv(trace: RunTrace, path: Union[str, Path]) -> Path:
    """One row per trace record: k,t1,t2,nfe,loss,psnr,wall_ms."""
    rows = (
        [r.k, r.t1, r.t2, r.nfe, r.loss, r.psnr, round(r.wall_ms, 3)] for r in trace.records
    )
    return write_csv(rows, TRACE_COLUMNS, path)


def write_timings_csv(timings: Sequence[PhaseTiming], path: Union[str, Path]) -> Path:
    rows = (
        [
            t.update,
            round(t.render_ms, 4),
            round(t.eps_ms, 4),
            round(t.backprop_ms, 4),
            round(t.codec_ms, 4),
            round(t.total_ms, 4),
            t.nfe,
        ]
        for t in timings
    )
    return write_csv(rows, TIMING_COLUMNS, path)


def read_csv(path: Union[str, Path]) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def write_json(data: dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, default=_json_default) + "\n")
    return path


# =============================================================================
# Workbooks
# =============================================================================


def _style_header(ws, num_cols: int) -> None:
    """Apply header styling to first row."""
    for col in range(1, num_cols + 1):
        cell = ws.cell(row=1, column=col)
        cell.font = HEADER_FONT
        cell.fill = HEADER_FILL
        cell.alignment = HEADER_ALIGNMENT
        cell.border = THIN_BORDER


def _auto_width(ws) -> None:
    """Auto-adjust column widths based on content."""
    for column_cells in ws.columns:
        max_length = max(
            (len(str(cell.value)) for cell in column_cells if cell.value is not None),
            default=0,
        )
        ws.column_dimensions[column_cells[0].column_letter].width = min(max_length + 2, 50)


def write_xlsx(
    sheets: dict[str, tuple[Sequence[str], Sequence[Sequence[Any]]]],
    path: Union[str, Path],
) -> Path:
    """
    Write one worksheet per entry of `sheets` ({title: (headers, rows)}).

    Args:
        sheets: Worksheet contents keyed by title
        path: Target .xlsx path

    Returns:
        Path written
    """
    path = Path(path)
    if path.suffix.lower() != ".xlsx":
        path = path.with_suffix(".xlsx")
    wb = Workbook()
    default: Optional[Any] = wb.active
    for title, (headers, rows) in sheets.items():
        ws = wb.create_sheet(title=title[:31])
        ws.append(list(headers))
        _style_header(ws, len(headers))
        for row in rows:
            ws.append([_cell(v) for v in row])
        ws.freeze_panes = "A2"
        _auto_width(ws)
    if default is not None and sheets:
        wb.remove(default)
    wb.save(path)
    return path
