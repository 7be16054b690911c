#!/usr/bin/env python3
"""Procedural hidden ground-truth objects for generation tasks."""

import logging
from typing import Callable

import numpy as np

from .errors import ParameterError
from .scene import SCENE_TYPES, GridScene

logger = logging.getLogger("sirlab")

# Optical depth per cell inside a solid object
OPAQUE_DENSITY = 4.0

SignedDistance = Callable[[np.ndarray], np.ndarray]


def _box(p: np.ndarray, half: tuple[float, ...]) -> np.ndarray:
    return np.max(np.abs(p) - np.asarray(half[: p.shape[-1]]), axis=-1)


def _sphere_sd(p: np.ndarray) -> np.ndarray:
    return np.linalg.norm(p, axis=-1) - 0.6


def _cross_sd(p: np.ndarray) -> np.ndarray:
    arms = [_box(p, (0.6, 0.18, 0.18)), _box(p, (0.18, 0.6, 0.18))]
    if p.shape[-1] == 3:
        arms.append(_box(p, (0.18, 0.18, 0.6)))
    return np.min(np.stack(arms), axis=0)


def _ring_sd(p: np.ndarray) -> np.ndarray:
    if p.shape[-1] == 2:
        return np.abs(np.linalg.norm(p, axis=-1) - 0.45) - 0.15
    # torus around the vertical axis
    radial = np.hypot(p[..., 0], p[..., 2]) - 0.45
    return np.hypot(radial, p[..., 1]) - 0.18


def _letter_sd(p: np.ndarray) -> np.ndarray:
    """Block letter L, extruded in depth for 3D."""
    stem = _box(p - _offset(p, (-0.35, 0.0, 0.0)), (0.15, 0.6, 0.25))
    foot = _box(p - _offset(p, (0.0, -0.45, 0.0)), (0.5, 0.15, 0.25))
    return np.minimum(stem, foot)


def _offset(p: np.ndarray, off: tuple[float, ...]) -> np.ndarray:
    return np.asarray(off[: p.shape[-1]])


SHAPES: dict[str, SignedDistance] = {
    "sphere": _sphere_sd,
    "cross": _cross_sd,
    "ring": _ring_sd,
    "letter": _letter_sd,
}


def _shade(p: np.ndarray, channels: int) -> np.ndarray:
    """Smooth position-dependent albedo so opposite views differ."""
    x = p[..., 0]
    if channels == 1:
        return 0.15 + 0.5 * (x + 1.0) / 2.0
    z = p[..., 2] if p.shape[-1] == 3 else np.zeros_like(x)
    y = p[..., 1]
    return np.stack(
        [
            0.25 + 0.6 * (x + 1.0) / 2.0,
            0.2 + 0.5 * (y + 1.0) / 2.0,
            0.7 - 0.5 * (z + 1.0) / 2.0,
        ],
        axis=-1,
    )


def make_shape(
    name: str, representation: str = "flatland", side: int = 32, view_size: int = 0
) -> GridScene:
    """
    Build a hidden object grid.

    Args:
        name: One of sphere, cross, ring, letter
        representation: flatland or voxel
        side: Grid side N
        view_size: Render resolution (defaults to side)

    Raises:
        ParameterError: Unknown shape or representation
    """
    if name not in SHAPES:
        raise ParameterError(f"Unknown shape '{name}'. Choose from: {', '.join(SHAPES)}")
    if representation not in SCENE_TYPES:
        raise ParameterError(
            f"Unknown representation '{representation}'. Choose from: {', '.join(SCENE_TYPES)}"
        )
    if side < 2:
        raise ParameterError(f"Grid side must be >= 2, got {side}")
    cls = SCENE_TYPES[representation]
    c = -1.0 + (np.arange(side) + 0.5) * (2.0 / side)
    pts = np.stack(np.meshgrid(*([c] * cls.DIMS), indexing="ij"), axis=-1)
    sd = SHAPES[name](pts)
    # one-cell soft shell around the surface
    occupancy = np.clip(0.5 - sd * side / 2.0, 0.0, 1.0)
    color = _shade(pts, cls.CHANNELS)
    logger.debug(f"Built {representation} shape '{name}' at side {side}")
    return cls(OPAQUE_DENSITY * occupancy, color, view_size or side)
