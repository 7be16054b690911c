#!/usr/bin/env python3
"""
Discrete diffusion noise schedules.

Defines the variance-preserving (alpha_t, sigma_t) tables, sub-sampled
timestep ladders, and the annealed t2/t1 plans that drive the outer loop of
score-based iterative reconstruction.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

from .errors import ParameterError

logger = logging.getLogger("sirlab")


class AnnealKind(str, Enum):
    """Shape of the t2 schedule across outer iterations"""

    LINEAR = "linear"
    SQUARE = "square"
    RANDOM = "random"


class T1Rule(str, Enum):
    """How the noise-adding endpoint t1 is derived from t2"""

    RATIO = "ratio"
    SQUARE_OVER_T = "square_over_T"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance-preserving schedule: x_t = alpha[t]·x0 + sigma[t]·eps."""

    num_steps: int
    alpha: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.alpha.shape != (self.num_steps + 1,) or self.sigma.shape != (
            self.num_steps + 1,
        ):
            raise ParameterError(
                f"Schedule tables must have {self.num_steps + 1} entries"
            )
        self.alpha.setflags(write=False)
        self.sigma.setflags(write=False)

    @property
    def T(self) -> int:
        return self.num_steps

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.num_steps:
            raise ParameterError(f"Timestep {t} outside [0, {self.num_steps}]")
        return t

    def to_dict(self) -> dict[str, Any]:
        return {
            "numSteps": self.num_steps,
            "alpha": self.alpha.tolist(),
            "sigma": self.sigma.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NoiseSchedule":
        return cls(
            num_steps=int(data["numSteps"]),
            alpha=np.asarray(data["alpha"], dtype=np.float64),
            sigma=np.asarray(data["sigma"], dtype=np.float64),
        )


def make_vp_schedule(
    T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    """
    Build the DDPM variance-preserving schedule with linearly spaced betas.

    Args:
        T: Number of diffusion steps
        beta_min: First beta
        beta_max: Last beta

    Returns:
        NoiseSchedule with alpha[t] = sqrt(prod_{s<=t}(1 - beta_s))

    Raises:
        ParameterError: If T < 1 or the beta range is invalid
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ParameterError(
            f"Invalid beta range: need 0 < beta_min <= beta_max < 1, "
            f"got ({beta_min}, {beta_max})"
        )
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(num_steps=T, alpha=alpha, sigma=sigma)


@dataclass(frozen=True)
class TimestepLadder:
    """Strictly increasing timesteps from 0 to T used for sub-stepping."""

    steps: tuple[int, ...]

    def __post_init__(self):
        if not self.steps or self.steps[0] != 0:
            raise ParameterError("Ladder must start at timestep 0")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ParameterError("Ladder timesteps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __contains__(self, t: object) -> bool:
        return t in self.steps

    @property
    def top(self) -> int:
        return self.steps[-1]

    def snap(self, t: float) -> int:
        """Nearest ladder timestep (ties resolve to the lower step)."""
        arr = np.asarray(self.steps)
        return int(arr[np.argmin(np.abs(arr - t))])

    def between(self, lo: int, hi: int) -> list[int]:
        """Ladder steps s with lo < s <= hi, ascending."""
        return [s for s in self.steps if lo < s <= hi]

    def below(self, t: int) -> list[int]:
        """Ladder steps s < t, descending (the sampling path from t to 0)."""
        return [s for s in reversed(self.steps) if s < t]


def subsample_ladder(T: int, n: int) -> TimestepLadder:
    """
    Pick n+1 approximately evenly spaced timesteps from 0 to T inclusive.

    Raises:
        ParameterError: If n is outside [1, T]
    """
    if not 1 <= n <= T:
        raise ParameterError(f"Ladder size n={n} must lie in [1, T={T}]")
    steps = np.rint(np.linspace(0, T, n + 1)).astype(int)
    return TimestepLadder(tuple(int(s) for s in steps))


@dataclass(frozen=True)
class AnnealPlan:
    """Annealed schedule of the forward endpoint t2 and the rule for t1."""

    kind: AnnealKind = AnnealKind.LINEAR
    t2_start: float = 0.8
    t2_end: float = 0.2
    t1_rule: T1Rule = T1Rule.RATIO
    ratio: float = 0.6
    literal_square: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", AnnealKind(self.kind))
        object.__setattr__(self, "t1_rule", T1Rule(self.t1_rule))
        if not 0.0 < self.t2_end <= self.t2_start < 1.0:
            raise ParameterError(
                f"Anneal plan needs 0 < t2_end <= t2_start < 1, "
                f"got {self.t2_start} -> {self.t2_end}"
            )
        if not 0.0 < self.ratio <= 1.0:
            raise ParameterError(f"t1 ratio must lie in (0, 1], got {self.ratio}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "t2Start": self.t2_start,
            "t2End": self.t2_end,
            "t1Rule": self.t1_rule.value,
            "ratio": self.ratio,
            "literalSquare": self.literal_square,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AnnealPlan":
        keys = {
            "kind": "kind",
            "t2Start": "t2_start",
            "t2End": "t2_end",
            "t1Rule": "t1_rule",
            "ratio": "ratio",
            "literalSquare": "literal_square",
        }
        unknown = set(data) - set(keys)
        if unknown:
            raise ParameterError(f"Unknown anneal keys: {sorted(unknown)}")
        return cls(**{keys[k]: v for k, v in data.items()})


def _clamp_interior(t: int, T: int, ladder: Optional[TimestepLadder]) -> int:
    # t2 must stay strictly inside (0, T)
    if ladder is None:
        return min(max(t, 1), T - 1)
    interior = [s for s in ladder.steps if 0 < s < T]
    if not interior:
        raise ParameterError("Ladder has no interior timestep")
    if t >= T:
        return interior[-1]
    if t <= 0:
        return interior[0]
    return t


def t2_at(
    k: int,
    K: int,
    plan: AnnealPlan,
    T: int,
    rng: Optional[np.random.Generator] = None,
    ladder: Optional[TimestepLadder] = None,
) -> int:
    """
    Forward endpoint t2 for outer iteration k of K.

    Linear interpolates t2_start·T -> t2_end·T over k = 0..K-1. Square
    descends quadratically, (1 - k/K)^2·(start - end)·T + end·T, unless
    plan.literal_square selects the ascending (k/K)^2 variant. Random draws
    uniformly in [t2_end·T, t2_start·T] from rng. The result is snapped to
    the nearest ladder step when a ladder is given.
    """
    if not 0 <= k < K:
        raise ParameterError(f"Iteration k={k} outside [0, K={K})")
    start = plan.t2_start * T
    end = plan.t2_end * T
    if plan.kind is AnnealKind.LINEAR:
        frac = k / (K - 1) if K > 1 else 0.0
        t = start + frac * (end - start)
    elif plan.kind is AnnealKind.SQUARE:
        if plan.literal_square:
            t = (k / K) ** 2 * (start - end) + end
        else:
            t = (1.0 - k / K) ** 2 * (start - end) + end
    else:
        if rng is None:
            raise ParameterError("Random anneal schedule needs a seeded generator")
        t = rng.uniform(end, start)
    snapped = ladder.snap(t) if ladder is not None else int(math.floor(t + 0.5))
    return _clamp_interior(snapped, T, ladder)


def t1_from_t2(t2: int, plan: AnnealPlan, T: int) -> int:
    """
    Noise-adding endpoint t1 for a given t2; always 1 <= t1 <= t2.

    Ratio rule: round(ratio·t2). Square rule: round(t2^2 / T).
    """
    if not 0 < t2 < T:
        raise ParameterError(f"t2={t2} must lie in (0, T={T})")
    if plan.t1_rule is T1Rule.RATIO:
        t1 = int(math.floor(plan.ratio * t2 + 0.5))
    else:
        t1 = int(math.floor(t2 * t2 / T + 0.5))
    return max(1, min(t1, t2))
