#!/usr/bin/env python3
"""
Run services for sirlab.

Each service turns a configuration into artifacts on disk: generation (SIR),
the SDS baseline, ablation sweeps and mesh extraction. The catalogue service
records every run in the database.
"""

import dataclasses
import datetime
import logging
import math
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from sqlalchemy import select
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session
from tabulate import tabulate

from .codec import LinearCodec
from .config import load_document
from .diffops import ForwardKind
from .errors import ConfigError, ParameterError
from .export import (
    write_csv,
    write_json,
    write_timings_csv,
    write_trace_csv,
    write_views,
    write_xlsx,
)
from .meshx import TriMesh, export_obj, marching_cubes, read_obj
from .models import RUN_STATUSES, RunRecord
from .scene import GridScene, VoxelGrid, even_cameras, load_scene, render_batch
from .schedule import AnnealKind
from .scoremodel import EmpiricalScoreModel, build_oracle_model
from .shapes import make_shape
from .sirloop import (
    EVAL_VIEWS,
    ReferenceView,
    RunTrace,
    SirConfig,
    Space,
    TraceRecord,
    efficiency_ratio,
    get_preset,
    make_codec,
    refine_texture,
    run_sds,
    run_sir,
    scene_psnr,
)

logger = logging.getLogger("sirlab")

FALLBACK_VERSION = "0.1.0"


def package_version() -> str:
    try:
        return version("sirlab")
    except PackageNotFoundError:
        return FALLBACK_VERSION


def version_string() -> str:
    """git-describe of the source tree, or the package version outside git."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
        described = out.stdout.strip()
        if described:
            return described
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{package_version()}"


def make_output_dir(
    base: Union[str, Path], command: str, now: Optional[datetime.datetime] = None
) -> Path:
    """Create a fresh timestamped directory under base; never reuses one."""
    now = now or datetime.datetime.now()
    base = Path(base)
    stem = f"{command}-{now:%Y%m%d-%H%M%S}"
    candidate = base / stem
    n = 1
    while candidate.exists():
        n += 1
        candidate = base / f"{stem}-{n}"
    candidate.mkdir(parents=True)
    return candidate


@dataclass
class RunManifest:
    """What a run was, where it wrote and when."""

    command: str
    seed: int
    output_dir: str
    config_path: Optional[str] = None
    version: str = field(default_factory=version_string)
    started_at: datetime.datetime = field(default_factory=datetime.datetime.now)
    finished_at: Optional[datetime.datetime] = None
    status: str = "running"

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "configPath": self.config_path,
            "seed": self.seed,
            "outputDir": self.output_dir,
            "version": self.version,
            "startedAt": self.started_at.isoformat(timespec="seconds"),
            "finishedAt": (
                self.finished_at.isoformat(timespec="seconds") if self.finished_at else None
            ),
            "status": self.status,
        }

    def write(self) -> Path:
        return write_json(self.to_dict(), Path(self.output_dir) / "manifest.json")


class CatalogueService:
    """Service for the run catalogue"""

    @staticmethod
    def start(session: Session, manifest: RunManifest) -> RunRecord:
        """
        Record the start of a run.

        Args:
            session: Database session
            manifest: Manifest of the run

        Returns:
            Created RunRecord

        Raises:
            SQLAlchemyError: If the catalogue cannot be written
        """
        try:
            record = RunRecord(
                command=manifest.command,
                config_path=manifest.config_path,
                seed=manifest.seed,
                output_dir=manifest.output_dir,
                version=manifest.version,
                started_at=manifest.started_at,
                status="running",
            )
            session.add(record)
            session.commit()
            logger.debug(f"Catalogued run {record.id}: {manifest.command}")
            return record
        except SQLAlchemyError as e:
            session.rollback()
            logger.error(f"Failed to catalogue run in {manifest.output_dir}: {e}")
            raise

    @staticmethod
    def finish(
        session: Session,
        record: RunRecord,
        status: str,
        psnr: Optional[float] = None,
        total_nfe: Optional[int] = None,
        message: Optional[str] = None,
    ) -> RunRecord:
        """
        Close a catalogued run.

        Raises:
            ParameterError: If status is unknown
        """
        if status not in RUN_STATUSES:
            raise ParameterError(f"Unknown run status '{status}'")
        try:
            record.status = status
            record.finished_at = datetime.datetime.now()
            record.psnr = psnr if psnr is None or math.isfinite(psnr) else None
            record.total_nfe = total_nfe
            record.message = message
            session.commit()
            return record
        except SQLAlchemyError as e:
            session.rollback()
            logger.error(f"Failed to update run {record.id}: {e}")
            raise

    @staticmethod
    def get_all(
        session: Session,
        command: Optional[str] = None,
        status: Optional[str] = None,
        limit: int = 50,
    ) -> list[RunRecord]:
        """Most recent runs first."""
        query = select(RunRecord)
        if command:
            query = query.where(RunRecord.command == command)
        if status:
            query = query.where(RunRecord.status == status)
        query = query.order_by(RunRecord.id.desc()).limit(limit)
        return list(session.execute(query).scalars().all())


# =============================================================================
# Tasks
# =============================================================================


@dataclass(eq=False)
class Task:
    """Hidden object, oracle model and optional reference/codec of a run."""

    truth: GridScene
    model: EmpiricalScoreModel
    reference: Optional[ReferenceView] = None
    codec: Optional[LinearCodec] = None


def build_task(config: SirConfig) -> Task:
    """
    Build the hidden shape and the oracle model conditioned on
    config.condition_views evenly spaced cameras.
    """
    truth = make_shape(config.task, config.representation, config.resolution)
    cameras = even_cameras(config.condition_views)
    model = build_oracle_model(
        truth,
        cameras,
        jitter_count=config.jitter_count,
        jitter_amplitude=config.jitter_amplitude,
        rng=np.random.default_rng([config.seed, 1]),
    )
    codec = None
    if config.latent_diffusion:
        codec = make_codec(config)
        model = model.encoded(codec)
    reference = None
    if config.ref_color_weight > 0 or config.ref_opacity_weight > 0:
        reference = ReferenceView.from_scene(truth)
    return Task(truth, model, reference, codec)


def _write_final_views(scene: GridScene, out_dir: Path, png: bool) -> list[Path]:
    batch = render_batch(scene, even_cameras(EVAL_VIEWS))
    return write_views(batch.images, out_dir, png=png)


@dataclass
class RunResult:
    output_dir: Path
    trace: RunTrace
    summary: dict[str, Any]
    files: list[Path] = field(default_factory=list)


class GenerationService:
    """Service for SIR generation runs"""

    @staticmethod
    def run(
        config: SirConfig,
        out_dir: Union[str, Path],
        png: bool = False,
        mesh: bool = False,
        texture: bool = False,
    ) -> RunResult:
        """
        Run SIR on the configured hidden shape and write its artifacts.

        Args:
            config: Run configuration
            out_dir: Existing output directory
            png: Write PNG instead of PPM
            mesh: Also extract an OBJ mesh (voxel only)
            texture: Run color-only texture refinement after SIR

        Returns:
            RunResult with trace, summary and written files
        """
        out_dir = Path(out_dir)
        task = build_task(config)
        scene, trace = run_sir(config, task.model, task.truth, task.reference, task.codec)
        if texture and config.iterations > 0:
            scene = refine_texture(scene, config, task.model, task.reference)
        files = _write_final_views(scene, out_dir, png)
        files.append(write_trace_csv(trace, out_dir / "trace.csv"))
        files.append(scene.save(out_dir / "scene.sirg"))
        if mesh:
            if isinstance(scene, VoxelGrid):
                tri = marching_cubes(scene.density, config.mc_threshold, scene.color)
                files.append(export_obj(tri, out_dir / "mesh.obj"))
            else:
                logger.warning("Mesh export needs a voxel scene; skipped")
        summary = {
            **trace.summary(),
            "finalPsnr": _finite(scene_psnr(scene, task.truth)),
            "config": config.to_dict(),
        }
        files.append(write_json(summary, out_dir / "summary.json"))
        return RunResult(out_dir, trace, summary, files)


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or math.isfinite(value):
        return value
    return None


class SdsService:
    """Service for SDS baseline runs"""

    @staticmethod
    def run(config: SirConfig, out_dir: Union[str, Path], png: bool = False) -> RunResult:
        """Run the SDS loop and write views, trace, phase timings and summary."""
        out_dir = Path(out_dir)
        task = build_task(config)
        scene, trace = run_sds(config, task.model, task.truth, task.codec)
        files = _write_final_views(scene, out_dir, png)
        files.append(write_trace_csv(trace, out_dir / "trace.csv"))
        files.append(write_timings_csv(trace.timings, out_dir / "timings.csv"))
        files.append(scene.save(out_dir / "scene.sirg"))
        summary = {**trace.summary(), "updates": len(trace.timings), "config": config.to_dict()}
        files.append(write_json(summary, out_dir / "summary.json"))
        return RunResult(out_dir, trace, summary, files)


# =============================================================================
# Ablation
# =============================================================================

ABLATION_AXES = ("n_views", "schedule", "forward_kind", "K", "space", "method")
ABLATION_COLUMNS = [
    "axis",
    "value",
    "seed",
    "method",
    "psnr",
    "final_error",
    "total_nfe",
    "iter_ms",
    "wall_ms",
]
SUMMARY_HEADERS = ["value", "runs", "mean_psnr", "mean_error", "mean_nfe", "iter_ms"]


@dataclass
class Sweep:
    """One axis, its values, the seeds and the base configuration."""

    axis: str
    values: list[Any]
    seeds: list[int]
    base: SirConfig = field(default_factory=SirConfig)

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ConfigError(
                f"Unknown ablation axis '{self.axis}'. Choose from: {', '.join(ABLATION_AXES)}"
            )
        if not self.values:
            raise ConfigError("Sweep needs at least one value")
        if not self.seeds:
            raise ConfigError("Sweep needs at least one seed")


def load_sweep(path: Union[str, Path]) -> Sweep:
    """
    Read a sweep file: {axis, values, seeds (list or count), preset?, base?}.
    """
    data = load_document(path)
    unknown = set(data) - {"axis", "values", "seeds", "preset", "base"}
    if unknown:
        raise ConfigError(f"Unknown sweep keys: {sorted(unknown)}")
    if "axis" not in data or "values" not in data:
        raise ConfigError("Sweep file needs 'axis' and 'values'")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    base = get_preset(data["preset"]) if data.get("preset") else SirConfig()
    if data.get("base"):
        merged = base.to_dict()
        merged.update(data["base"])
        base = SirConfig.from_dict(merged)
    return Sweep(str(data["axis"]), list(data["values"]), [int(s) for s in seeds], base)


def apply_axis(config: SirConfig, axis: str, value: Any) -> tuple[SirConfig, str]:
    """Config for one axis value, and the method (sir or sds) to run."""
    method = "sir"
    if axis == "n_views":
        config = config.replace(n_views=int(value))
    elif axis == "schedule":
        config = config.replace(anneal=dataclasses.replace(config.anneal, kind=AnnealKind(value)))
    elif axis == "forward_kind":
        config = config.replace(forward_kind=ForwardKind.parse(str(value)))
    elif axis == "K":
        config = config.replace(iterations=int(value))
    elif axis == "space":
        config = config.replace(space=Space(value), latent_diffusion=True)
    elif axis == "method":
        if value not in ("sir", "sds"):
            raise ConfigError(f"Unknown method '{value}'")
        method = str(value)
    else:
        raise ConfigError(f"Unknown ablation axis '{axis}'")
    return config, method


def run_sweep_point(
    base: dict[str, Any], axis: str, value: Any, seed: int, out_dir: str
) -> dict[str, Any]:
    """One (value, seed) run; module-level so worker processes can import it."""
    config, method = apply_axis(SirConfig.from_dict(base).replace(seed=seed), axis, value)
    task = build_task(config)
    if method == "sds":
        _, trace = run_sds(config, task.model, task.truth, task.codec)
    else:
        _, trace = run_sir(config, task.model, task.truth, task.reference, task.codec)
    run_dir = Path(out_dir) / f"{axis}-{value}-s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace, run_dir / "trace.csv")
    psnr = trace.final_psnr
    walls = [r.wall_ms for r in trace.records]
    return {
        "axis": axis,
        "value": value,
        "seed": seed,
        "method": method,
        "psnr": psnr,
        "final_error": 10 ** (-psnr / 10) if psnr is not None and math.isfinite(psnr) else 0.0,
        "total_nfe": trace.total_nfe,
        "iter_ms": float(np.mean(walls)) if walls else 0.0,
        "wall_ms": float(np.sum(walls)),
        "curve": [(trace.init_nfe, trace.init_psnr)] + [(r.nfe, r.psnr) for r in trace.records],
    }


def _curve_trace(curve: list[tuple[int, Optional[float]]]) -> RunTrace:
    init_nfe, init_psnr = curve[0]
    trace = RunTrace(init_nfe=init_nfe, init_psnr=init_psnr)
    for k, (nfe, value) in enumerate(curve[1:]):
        trace.append(TraceRecord(k, 0, 0, nfe, 0.0, value, 0.0))
    return trace


class AblationService:
    """Service for ablation sweeps"""

    @staticmethod
    def run(sweep: Sweep, out_dir: Union[str, Path], threads: int = 1) -> list[dict[str, Any]]:
        """
        Run every (value, seed) pair; seeds are shared across values.

        Args:
            sweep: Sweep definition
            out_dir: Output directory; per-run traces go to subdirectories
            threads: Worker processes (1 runs in-process)

        Returns:
            One row per run, in (value, seed) order
        """
        out = str(out_dir)
        base = sweep.base.to_dict()
        jobs = [(v, s) for v in sweep.values for s in sweep.seeds]
        logger.info(f"Ablation over {sweep.axis}: {len(jobs)} runs, {threads} worker(s)")
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                futures = [
                    pool.submit(run_sweep_point, base, sweep.axis, v, s, out) for v, s in jobs
                ]
                return [f.result() for f in futures]
        return [run_sweep_point(base, sweep.axis, v, s, out) for v, s in jobs]

    @staticmethod
    def aggregate(rows: list[dict[str, Any]]) -> list[list[Any]]:
        """Mean PSNR, error, NFE and per-iteration time per axis value."""
        table = []
        for value in dict.fromkeys(r["value"] for r in rows):
            group = [r for r in rows if r["value"] == value]
            psnrs = [r["psnr"] for r in group if r["psnr"] is not None]
            table.append(
                [
                    value,
                    len(group),
                    float(np.mean(psnrs)) if psnrs else None,
                    float(np.mean([r["final_error"] for r in group])),
                    float(np.mean([r["total_nfe"] for r in group])),
                    float(np.mean([r["iter_ms"] for r in group])),
                ]
            )
        return table

    @staticmethod
    def efficiency_ratios(rows: list[dict[str, Any]]) -> dict[int, tuple[float, bool]]:
        """
        Per seed of a method sweep: NFE SDS needs to reach SIR's final PSNR,
        divided by SIR's total NFE, and whether SDS got there at all. SDS runs
        that never reach it count at their capped NFE.
        """
        ratios: dict[int, tuple[float, bool]] = {}
        for seed in dict.fromkeys(r["seed"] for r in rows):
            sir = next((r for r in rows if r["seed"] == seed and r["method"] == "sir"), None)
            sds = next((r for r in rows if r["seed"] == seed and r["method"] == "sds"), None)
            if sir is None or sds is None or sir["psnr"] is None or not sir["total_nfe"]:
                continue
            ratios[seed] = efficiency_ratio(
                _curve_trace(sir["curve"]), _curve_trace(sds["curve"])
            )
        return ratios

    @staticmethod
    def write(
        rows: list[dict[str, Any]], out_dir: Union[str, Path], xlsx: bool = False
    ) -> list[Path]:
        out_dir = Path(out_dir)
        body = [[r[c] for c in ABLATION_COLUMNS] for r in rows]
        files = [write_csv(body, ABLATION_COLUMNS, out_dir / "ablation.csv")]
        summary = AblationService.aggregate(rows)
        if xlsx:
            files.append(
                write_xlsx(
                    {
                        "runs": (ABLATION_COLUMNS, body),
                        "summary": (SUMMARY_HEADERS, summary),
                    },
                    out_dir / "ablation.xlsx",
                )
            )
        return files

    @staticmethod
    def format_summary(rows: list[dict[str, Any]]) -> str:
        return tabulate(
            AblationService.aggregate(rows), headers=SUMMARY_HEADERS, tablefmt="grid", floatfmt=".4g"
        )


# =============================================================================
# Mesh
# =============================================================================


class MeshService:
    """Service for mesh extraction from saved scenes"""

    @staticmethod
    def run(
        scene_path: Union[str, Path], out_path: Union[str, Path], threshold: float = 0.5
    ) -> TriMesh:
        """
        Load a voxel scene, run marching cubes and export an OBJ.

        Raises:
            SceneFormatError: If the scene cannot be parsed
            ParameterError: If the scene is not a voxel grid
        """
        scene = load_scene(scene_path)
        if not isinstance(scene, VoxelGrid):
            raise ParameterError("Mesh extraction needs a voxel scene")
        mesh = marching_cubes(scene.density, threshold, scene.color)
        path = export_obj(mesh, out_path)
        check = read_obj(path)
        if (check.n_vertices, check.n_triangles) != (mesh.n_vertices, mesh.n_triangles):
            raise ParameterError(f"Re-reading {path} gave a different mesh")
        logger.info(f"Wrote {mesh.n_vertices} vertices, {mesh.n_triangles} triangles to {path}")
        return mesh
