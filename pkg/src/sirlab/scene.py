#!/usr/bin/env python3
"""
Differentiable grid scenes and their emission-absorption renderer.

Two backends share one renderer: FlatlandGrid (2D object, 1D grayscale
views) and VoxelGrid (3D object, 2D RGB views). Cameras are orthographic
and rotate about the vertical axis. Gradients of a render with respect to
the grid parameters are derived by hand in render_vjp().

Geometry: the object lives in the cube [-1, 1]^D; grid cell centres sit at
-1 + (i + 0.5)·2/N. A view of resolution R casts R (flatland) or R×R
(voxel) parallel rays with R samples each, one sample per 2/R of world
length; density is optical depth per sample spacing.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import ClassVar, Optional, Sequence, Union

import numpy as np

from .errors import ParameterError, SceneFormatError

logger = logging.getLogger("sirlab")

Grads = dict[str, np.ndarray]

SCENE_MAGIC = b"SIRG"
SCENE_VERSION = 1
BACKGROUND = 1.0


@dataclass(frozen=True)
class Camera:
    """Orthographic camera; azimuth normalized to [0, 2π)."""

    azimuth: float
    elevation: float = 0.0

    def __post_init__(self):
        az = math.fmod(float(self.azimuth), 2 * math.pi)
        if az < 0:
            az += 2 * math.pi
        if az >= 2 * math.pi:
            az = 0.0
        object.__setattr__(self, "azimuth", az)

    @property
    def degrees(self) -> float:
        return math.degrees(self.azimuth)


def _axis(n: int) -> np.ndarray:
    return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)


def _interp(points: np.ndarray, side: int, clamp: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """
    Multilinear interpolation stencil for world points (..., D).

    Returns flat corner indices and weights of shape (..., 2^D). Corners
    outside the grid get zero weight unless clamp is set, which replicates
    the border instead.
    """
    dims = points.shape[-1]
    g = (points + 1.0) * (side / 2.0) - 0.5
    if clamp:
        g = np.clip(g, 0.0, side - 1.0)
    base = np.floor(g).astype(np.int64)
    frac = g - base
    idx_list = []
    wts_list = []
    for corner in product((0, 1), repeat=dims):
        off = np.asarray(corner)
        ii = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=-1)
        inside = np.all((ii >= 0) & (ii < side), axis=-1)
        ii = np.clip(ii, 0, side - 1)
        flat = np.ravel_multi_index(tuple(np.moveaxis(ii, -1, 0)), (side,) * dims)
        idx_list.append(flat)
        wts_list.append(np.where(inside, w, 0.0))
    return np.stack(idx_list, axis=-1), np.stack(wts_list, axis=-1)


@lru_cache(maxsize=64)
def _sampling_plan(
    dims: int, side: int, view_size: int, azimuth: float
) -> tuple[np.ndarray, np.ndarray]:
    """Interpolation stencil of every ray sample: shapes (P, S, 2^D)."""
    c = _axis(view_size)
    cos_a, sin_a = math.cos(azimuth), math.sin(azimuth)
    if dims == 2:
        u, s = np.meshgrid(c, c, indexing="ij")
        pts = np.stack([u * cos_a - s * sin_a, u * sin_a + s * cos_a], axis=-1)
    else:
        v = c[::-1]
        vv, uu, ss = np.meshgrid(v, c, c, indexing="ij")
        pts = np.stack(
            [uu * cos_a + ss * sin_a, vv, -uu * sin_a + ss * cos_a], axis=-1
        ).reshape(view_size * view_size, view_size, 3)
    idx, wts = _interp(pts, side)
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


@dataclass(eq=False)
class _Composite:
    sig: np.ndarray
    col: np.ndarray
    trans: np.ndarray
    trans_next: np.ndarray
    weights: np.ndarray
    image: np.ndarray
    alpha: np.ndarray


@dataclass(eq=False)
class GridScene:
    """
    Tunable scene parameters theta: a density grid (>= 0) and a color grid
    in [0, 1]. Subclasses fix the dimensionality and color channels.
    """

    DIMS: ClassVar[int] = 0
    CHANNELS: ClassVar[int] = 0
    KIND: ClassVar[str] = ""

    density: np.ndarray
    color: np.ndarray
    view_size: int = 0

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        side = self.density.shape[0]
        if self.density.shape != (side,) * self.DIMS:
            raise ParameterError(
                f"{self.KIND} density must have shape {(side,) * self.DIMS}, "
                f"got {self.density.shape}"
            )
        if self.color.shape != self._color_shape(side):
            raise ParameterError(
                f"{self.KIND} color must have shape {self._color_shape(side)}, "
                f"got {self.color.shape}"
            )
        if not self.view_size:
            self.view_size = side

    @classmethod
    def _color_shape(cls, side: int) -> tuple[int, ...]:
        return (side,) * cls.DIMS + ((cls.CHANNELS,) if cls.CHANNELS > 1 else ())

    @classmethod
    def empty(cls, side: int, view_size: Optional[int] = None, gray: float = 0.5):
        """Zero density, mid-gray color."""
        return cls(
            np.zeros((side,) * cls.DIMS),
            np.full(cls._color_shape(side), gray),
            view_size or side,
        )

    @property
    def side(self) -> int:
        return self.density.shape[0]

    @property
    def pixel_shape(self) -> tuple[int, ...]:
        return (self.view_size,) * (self.DIMS - 1)

    @property
    def view_shape(self) -> tuple[int, ...]:
        return self.pixel_shape + ((self.CHANNELS,) if self.CHANNELS > 1 else ())

    @property
    def pixel_dim(self) -> int:
        return int(np.prod(self.view_shape))

    def params(self) -> dict[str, np.ndarray]:
        return {"density": self.density, "color": self.color}

    bounds: ClassVar[dict[str, tuple[Optional[float], Optional[float]]]] = {
        "density": (0.0, None),
        "color": (0.0, 1.0),
    }

    def project(self) -> None:
        """Clamp density >= 0 and color into [0, 1] in place."""
        np.maximum(self.density, 0.0, out=self.density)
        np.clip(self.color, 0.0, 1.0, out=self.color)

    def copy(self) -> "GridScene":
        return type(self)(self.density.copy(), self.color.copy(), self.view_size)

    def _composite(self, camera: Camera) -> _Composite:
        idx, wts = _sampling_plan(self.DIMS, self.side, self.view_size, camera.azimuth)
        dens = self.density.ravel()
        cols = self.color.reshape(-1, self.CHANNELS)
        sig = np.sum(dens[idx] * wts, axis=-1)
        col = np.einsum("psk,pskc->psc", wts, cols[idx])
        cum = np.cumsum(sig, axis=1)
        trans_next = np.exp(-cum)
        trans = np.exp(-(cum - sig))
        weights = trans - trans_next
        final = trans_next[:, -1]
        image = np.einsum("ps,psc->pc", weights, col) + final[:, None] * BACKGROUND
        return _Composite(sig, col, trans, trans_next, weights, image, 1.0 - final)

    def render(self, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
        """Render one view; returns (image of view_shape, alpha of pixel_shape)."""
        comp = self._composite(camera)
        return comp.image.reshape(self.view_shape), comp.alpha.reshape(self.pixel_shape)

    def render_vjp(
        self,
        camera: Camera,
        cotangent: np.ndarray,
        alpha_cotangent: Optional[np.ndarray] = None,
    ) -> Grads:
        """
        Reverse-mode derivative of render() contracted with a cotangent.

        With w_k = T_k a_k the compositing weights and T_end the final
        transmittance, per ray

            dC/dc_k     = w_k
            dC/dsigma_k = T_{k+1} c_k - sum_{m>k} w_m c_m - T_end·background
            dA/dsigma_k = T_end
        """
        idx, wts = _sampling_plan(self.DIMS, self.side, self.view_size, camera.azimuth)
        comp = self._composite(camera)
        g = np.asarray(cotangent, dtype=np.float64).reshape(-1, self.CHANNELS)
        if g.shape[0] != comp.image.shape[0]:
            raise ParameterError(
                f"Cotangent of size {np.size(cotangent)} does not match view {self.view_shape}"
            )
        final = comp.trans_next[:, -1]
        g_col = np.einsum("psc,pc->ps", comp.col, g)
        g_bg = g.sum(axis=1) * BACKGROUND
        contrib = comp.weights * g_col
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        d_sig = comp.trans_next * g_col - behind - (final * g_bg)[:, None]
        if alpha_cotangent is not None:
            ga = np.asarray(alpha_cotangent, dtype=np.float64).reshape(-1)
            d_sig = d_sig + (ga * final)[:, None]

        n_cells = self.density.size
        flat_idx = idx.ravel()
        grad_density = np.bincount(
            flat_idx, weights=(wts * d_sig[..., None]).ravel(), minlength=n_cells
        )
        grad_color = np.empty((n_cells, self.CHANNELS))
        for ch in range(self.CHANNELS):
            sample_grad = comp.weights * g[:, ch][:, None]
            grad_color[:, ch] = np.bincount(
                flat_idx, weights=(wts * sample_grad[..., None]).ravel(), minlength=n_cells
            )
        return {
            "density": grad_density.reshape(self.density.shape),
            "color": grad_color.reshape(self.color.shape),
        }

    def resample(self, side: int) -> "GridScene":
        """Same field on a grid of a different side (border-replicating trilinear)."""
        c = _axis(side)
        pts = np.stack(np.meshgrid(*([c] * self.DIMS), indexing="ij"), axis=-1)
        idx, wts = _interp(pts, self.side, clamp=True)
        dens = np.sum(self.density.ravel()[idx] * wts, axis=-1)
        cols = np.einsum("...k,...kc->...c", wts, self.color.reshape(-1, self.CHANNELS)[idx])
        return type(self)(
            dens.reshape((side,) * self.DIMS),
            cols.reshape(self._color_shape(side)),
            self.view_size,
        )

    def to_bytes(self) -> bytes:
        """
        Flat binary layout, little-endian:
        magic 'SIRG' | u32 version, dims, side, channels, view_size |
        density f64 row-major | color f64 row-major
        """
        header = np.array(
            [SCENE_VERSION, self.DIMS, self.side, self.CHANNELS, self.view_size],
            dtype="<u4",
        )
        return (
            SCENE_MAGIC
            + header.tobytes()
            + self.density.astype("<f8").tobytes()
            + self.color.astype("<f8").tobytes()
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


class FlatlandGrid(GridScene):
    """2D object with grayscale color; each view is a 1D image."""

    DIMS = 2
    CHANNELS = 1
    KIND = "flatland"


class VoxelGrid(GridScene):
    """3D object with RGB color; each view is a 2D image."""

    DIMS = 3
    CHANNELS = 3
    KIND = "voxel"


SCENE_TYPES: dict[str, type[GridScene]] = {
    FlatlandGrid.KIND: FlatlandGrid,
    VoxelGrid.KIND: VoxelGrid,
}


def scene_from_bytes(data: bytes) -> GridScene:
    """Parse the layout written by GridScene.to_bytes()."""
    if len(data) < 24 or data[:4] != SCENE_MAGIC:
        raise SceneFormatError("Not a sirlab scene file (bad magic)")
    version, dims, side, channels, view_size = np.frombuffer(data[4:24], dtype="<u4")
    if version != SCENE_VERSION:
        raise SceneFormatError(f"Unsupported scene version {version}")
    kinds = {cls.DIMS: cls for cls in SCENE_TYPES.values()}
    cls = kinds.get(int(dims))
    if cls is None or cls.CHANNELS != channels:
        raise SceneFormatError(f"Unsupported scene layout dims={dims} channels={channels}")
    n_dens = int(side) ** int(dims)
    n_col = n_dens * int(channels)
    body = data[24:]
    if len(body) != 8 * (n_dens + n_col):
        raise SceneFormatError(
            f"Scene body has {len(body)} bytes, expected {8 * (n_dens + n_col)}"
        )
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return cls(
        values[:n_dens].reshape((int(side),) * int(dims)),
        values[n_dens:].reshape(cls._color_shape(int(side))),
        int(view_size),
    )


def load_scene(path: Union[str, Path]) -> GridScene:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise SceneFormatError(f"Cannot read scene file {path}: {e}") from e
    return scene_from_bytes(data)


@dataclass(eq=False)
class ViewBatch:
    """
    Multi-view image stack with paired cameras. vectors flattens each view,
    the concatenation over views is the batch vector x.
    """

    images: np.ndarray
    cameras: tuple[Camera, ...]
    alpha_maps: np.ndarray
    latents: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.cameras = tuple(self.cameras)
        if self.images.shape[0] != len(self.cameras):
            raise ParameterError(
                f"{self.images.shape[0]} images for {len(self.cameras)} cameras"
            )

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def vectors(self) -> np.ndarray:
        return self.images.reshape(len(self.cameras), -1)

    @property
    def flat(self) -> np.ndarray:
        return self.images.ravel()


def render(scene: GridScene, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """g(theta, c) for a single camera."""
    return scene.render(camera)


def render_vjp(
    scene: GridScene,
    camera: Camera,
    cotangent: np.ndarray,
    alpha_cotangent: Optional[np.ndarray] = None,
) -> Grads:
    return scene.render_vjp(camera, cotangent, alpha_cotangent)


def render_batch(scene: GridScene, cameras: Sequence[Camera]) -> ViewBatch:
    renders = [scene.render(cam) for cam in cameras]
    return ViewBatch(
        images=np.stack([img for img, _ in renders]),
        cameras=tuple(cameras),
        alpha_maps=np.stack([a for _, a in renders]),
    )


def sample_cameras(
    n_views: int,
    rng: np.random.Generator,
    azimuth_grid: Optional[int] = None,
) -> list[Camera]:
    """
    Evenly distributed azimuths phi0 + 2πj/n_views around a random base.

    With azimuth_grid, phi0 is drawn uniformly from multiples of
    2π/azimuth_grid and every view is snapped to the nearest multiple, so
    each camera is exactly a fixed condition camera.
    """
    if n_views < 1:
        raise ParameterError(f"n_views must be >= 1, got {n_views}")
    if azimuth_grid:
        first = int(rng.integers(azimuth_grid))
        slots = [
            (first + round(j * azimuth_grid / n_views)) % azimuth_grid for j in range(n_views)
        ]
        return [Camera(2 * math.pi * s / azimuth_grid) for s in slots]
    base = float(rng.uniform(0.0, 2 * math.pi))
    return [Camera(base + 2 * math.pi * j / n_views) for j in range(n_views)]


def even_cameras(n_views: int, start: float = 0.0) -> list[Camera]:
    """Fixed evenly spaced azimuths starting at `start`."""
    return [Camera(start + 2 * math.pi * j / n_views) for j in range(n_views)]


def add_grads(total: Optional[Grads], grads: Grads, scale: float = 1.0) -> Grads:
    if total is None:
        return {k: scale * v for k, v in grads.items()}
    for k, v in grads.items():
        total[k] += scale * v
    return total
