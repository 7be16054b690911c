#!/usr/bin/env python3
"""
Diffusion operators built on a noise predictor.

noise_add, predict_x0, DDIM sampling (with eta) and DDIM inversion, the
hybrid forward process (add noise to t1, then invert up to t2) and refinement
sampling back to t = 0. Every stochastic operator takes an explicit
generator. Each call of a predictor is one NFE (two under guidance).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import DomainError, ParameterError
from .schedule import NoiseSchedule, TimestepLadder
from .scoremodel import Condition, ScoreModel, cfg_eps

logger = logging.getLogger("sirlab")


class ForwardKind(str, Enum):
    """Forward process that carries a render to the noise level t2"""

    NOISE_ONLY = "noise_only"
    INVERSION_ONLY = "inversion_only"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, value: str) -> "ForwardKind":
        """Accept both enum values and the short names noise/inversion/hybrid."""
        short = {"noise": cls.NOISE_ONLY, "inversion": cls.INVERSION_ONLY}
        if value in short:
            return short[value]
        try:
            return cls(value)
        except ValueError:
            raise ParameterError(f"Unknown forward process '{value}'") from None


@dataclass(frozen=True, eq=False)
class DiffusionState:
    """A noisy vector x together with its timestep t."""

    x: np.ndarray
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ParameterError(f"Negative timestep {self.t}")


def noise_add(
    x0: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator
) -> DiffusionState:
    """x_t = alpha_t·x0 + sigma_t·eps with eps drawn from rng."""
    t = sched.check_timestep(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    return DiffusionState(sched.alpha[t] * x0 + sched.sigma[t] * eps, t)


def predict_x0(
    state: DiffusionState,
    model: ScoreModel,
    cond: Condition,
    sched: NoiseSchedule,
    cfg_scale: float = 1.0,
) -> np.ndarray:
    """Single-step estimate x0_hat = (x_t - sigma_t·eps_hat) / alpha_t."""
    t = sched.check_timestep(state.t)
    if t == 0:
        raise DomainError("predict_x0 needs t >= 1")
    eps = cfg_eps(model, state.x, t, cond, cfg_scale, sched)
    return (state.x - sched.sigma[t] * eps) / sched.alpha[t]


def ddim_sigma(t: int, s: int, eta: float, sched: NoiseSchedule) -> float:
    """Standard DDIM noise level for a t -> s step."""
    if eta == 0.0:
        return 0.0
    abar_t = sched.alpha[t] ** 2
    abar_s = sched.alpha[s] ** 2
    return float(
        eta
        * np.sqrt((1.0 - abar_s) / (1.0 - abar_t))
        * np.sqrt(max(1.0 - abar_t / abar_s, 0.0))
    )


def ddim_step(
    state: DiffusionState,
    s: int,
    eta: float,
    model: ScoreModel,
    cond: Condition,
    sched: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    cfg_scale: float = 1.0,
) -> DiffusionState:
    """
    One DDIM step from state.t down to s.

    Raises:
        ParameterError: If s >= t or eta outside [0, 1], or eta > 0 without rng
    """
    t = sched.check_timestep(state.t)
    s = sched.check_timestep(s)
    if s >= t:
        raise ParameterError(f"DDIM step needs s < t, got s={s}, t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ParameterError(f"eta must lie in [0, 1], got {eta}")
    alpha_t, sigma_t = sched.alpha[t], sched.sigma[t]
    alpha_s, sigma_s = sched.alpha[s], sched.sigma[s]
    eps = cfg_eps(model, state.x, t, cond, cfg_scale, sched)
    if eta == 0.0:
        ratio = alpha_s / alpha_t
        return DiffusionState(ratio * state.x + (sigma_s - ratio * sigma_t) * eps, s)
    if rng is None:
        raise ParameterError("Stochastic DDIM (eta > 0) needs a generator")
    x0_hat = (state.x - sigma_t * eps) / alpha_t
    noise_level = ddim_sigma(t, s, eta, sched)
    direction = np.sqrt(max(sigma_s**2 - noise_level**2, 0.0))
    z = rng.standard_normal(state.x.shape)
    return DiffusionState(alpha_s * x0_hat + direction * eps + noise_level * z, s)


def ddim_invert_step(
    state: DiffusionState,
    u: int,
    model: ScoreModel,
    cond: Condition,
    sched: NoiseSchedule,
    cfg_scale: float = 1.0,
) -> DiffusionState:
    """
    One deterministic DDIM inversion step from state.t up to u.

    The predictor is undefined at t = 0, so a step starting there evaluates
    it at t = 1.
    """
    t = sched.check_timestep(state.t)
    u = sched.check_timestep(u)
    if u <= t:
        raise ParameterError(f"Inversion step needs u > t, got u={u}, t={t}")
    ratio = sched.alpha[u] / sched.alpha[t]
    eps = cfg_eps(model, state.x, max(t, 1), cond, cfg_scale, sched)
    return DiffusionState(
        ratio * state.x + (sched.sigma[u] - ratio * sched.sigma[t]) * eps, u
    )


def _snap(t: int, ladder: TimestepLadder, what: str) -> int:
    if t in ladder:
        return t
    snapped = ladder.snap(t)
    logger.warning(f"{what}={t} is not on the timestep ladder, snapped to {snapped}")
    return snapped


def ddim_invert(
    x: np.ndarray,
    t2: int,
    ladder: TimestepLadder,
    model: ScoreModel,
    cond: Condition,
    sched: NoiseSchedule,
    cfg_scale: float = 1.0,
) -> DiffusionState:
    """Deterministic inversion of a clean x from 0 up to t2 along the ladder."""
    state = DiffusionState(np.asarray(x, dtype=np.float64), 0)
    for u in ladder.between(0, t2):
        state = ddim_invert_step(state, u, model, cond, sched, cfg_scale)
    return state


def hybrid_forward(
    x: np.ndarray,
    t1: int,
    t2: int,
    ladder: TimestepLadder,
    model: ScoreModel,
    cond: Condition,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cfg_scale: float = 1.0,
) -> DiffusionState:
    """
    Add noise from 0 to t1, then invert along the ladder from t1 to t2.

    t1 and t2 are snapped to the ladder first. With t1 == t2 this is exactly
    noise_add and costs no NFE.

    Raises:
        ParameterError: If t1 > t2 or the pair is outside 0 < t1 <= t2 < T
    """
    if t1 > t2:
        raise ParameterError(f"Hybrid forward needs t1 <= t2, got t1={t1}, t2={t2}")
    if not 0 < t1 <= t2 < sched.T:
        raise ParameterError(
            f"Hybrid forward needs 0 < t1 <= t2 < T, got t1={t1}, t2={t2}"
        )
    requested = t1
    t2 = _snap(t2, ladder, "t2")
    t1 = min(_snap(t1, ladder, "t1"), t2)
    if t1 == t2 and requested < t2:
        logger.warning(
            f"t1={requested} collapses onto t2={t2} on the ladder; hybrid forward is noise-only"
        )
    elif t1 == 0:
        logger.warning(
            f"t1={requested} snaps to 0 on the ladder; hybrid forward is inversion-only"
        )
    state = noise_add(x, t1, sched, rng)
    for u in ladder.between(t1, t2):
        state = ddim_invert_step(state, u, model, cond, sched, cfg_scale)
    return state


def forward_process(
    kind: ForwardKind,
    x: np.ndarray,
    t1: int,
    t2: int,
    ladder: TimestepLadder,
    model: ScoreModel,
    cond: Condition,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cfg_scale: float = 1.0,
) -> DiffusionState:
    """Dispatch on the forward process kind."""
    kind = ForwardKind(kind)
    if kind is ForwardKind.NOISE_ONLY:
        return noise_add(x, _snap(t2, ladder, "t2"), sched, rng)
    if kind is ForwardKind.INVERSION_ONLY:
        return ddim_invert(x, _snap(t2, ladder, "t2"), ladder, model, cond, sched, cfg_scale)
    return hybrid_forward(x, t1, t2, ladder, model, cond, sched, rng, cfg_scale)


def sample_to_zero(
    state: DiffusionState,
    ladder: TimestepLadder,
    eta: float,
    model: ScoreModel,
    cond: Condition,
    sched: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    cfg_scale: float = 1.0,
    clamp: bool = True,
) -> np.ndarray:
    """
    Chain DDIM steps down the ladder to t = 0.

    Off-ladder start times are snapped with a warning. The result is clamped
    to [0, 1] unless clamp is false (latent vectors are unbounded).
    """
    t = _snap(state.t, ladder, "t")
    if t != state.t:
        state = DiffusionState(state.x, t)
    for s in ladder.below(t):
        state = ddim_step(state, s, eta, model, cond, sched, rng, cfg_scale)
    x = state.x
    return np.clip(x, 0.0, 1.0) if clamp else x


def count_inversion_steps(t1: int, t2: int, ladder: TimestepLadder) -> int:
    """NFE-free count of inversion sub-steps between snapped t1 and t2."""
    t2 = ladder.snap(t2)
    t1 = min(ladder.snap(t1), t2)
    return len(ladder.between(t1, t2))
