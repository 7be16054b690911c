#!/usr/bin/env python3
"""
Closed-form noise predictors.

The predictors here are exact for the data distributions they describe, so
every diffusion operator built on top of them can be checked against an
oracle. Each evaluation of eps() is one function evaluation (NFE) and is
recorded on the model's NfeCounter.
"""

import logging
import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .errors import DomainError, ModelError, ParameterError
from .schedule import NoiseSchedule

if TYPE_CHECKING:
    from .codec import LinearCodec
    from .scene import Camera, GridScene

logger = logging.getLogger("sirlab")


class Guidance(str, Enum):
    """Which branch of a guided predictor is evaluated"""

    CONDITIONAL = "conditional"
    UNCONDITIONAL = "unconditional"


@dataclass(frozen=True)
class Condition:
    """Conditioning signal c: a view index into the model's camera table."""

    view_id: int
    guidance: Guidance = Guidance.CONDITIONAL

    def conditional(self) -> "Condition":
        return Condition(self.view_id, Guidance.CONDITIONAL)

    def unconditional(self) -> "Condition":
        return Condition(self.view_id, Guidance.UNCONDITIONAL)


class NfeCounter:
    """Thread-safe count of noise-predictor evaluations."""

    def __init__(self) -> None:
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def tick(self, n: int = 1) -> None:
        if n < 0:
            raise ParameterError("NFE increments must be non-negative")
        with self._lock:
            self._count += n

    def __repr__(self) -> str:
        return f"<NfeCounter(count={self._count})>"


class ScoreModel(Protocol):
    """What the diffusion operators need from a noise predictor."""

    counter: NfeCounter

    @property
    def dim(self) -> int: ...

    def eps(
        self, x_t: np.ndarray, t: int, cond: Condition, sched: NoiseSchedule
    ) -> np.ndarray: ...

    def condition_for(self, camera: "Camera") -> Condition: ...


def _noise_levels(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    t = sched.check_timestep(t)
    if t == 0:
        raise DomainError("Noise predictor is undefined at t=0 (sigma_0 = 0)")
    return float(sched.alpha[t]), float(sched.sigma[t])


class EmpiricalScoreModel:
    """
    Exact eps-predictor of a weighted empirical data distribution per view.

    For view c with data points y_i and weights w_i, the posterior mean is

        E[x0 | x_t] = sum_i softmax_i(log w_i - |x_t - alpha_t y_i|^2 / (2 sigma_t^2)) y_i

    and eps = (x_t - alpha_t E[x0 | x_t]) / sigma_t. The unconditional branch
    pools all views with equal view weight.
    """

    def __init__(
        self,
        points: Mapping[int, np.ndarray],
        weights: Optional[Mapping[int, np.ndarray]] = None,
        azimuths: Optional[Sequence[float]] = None,
        counter: Optional[NfeCounter] = None,
    ):
        if not points:
            raise ModelError("Score model needs at least one condition dataset")
        self._points: dict[int, np.ndarray] = {}
        self._weights: dict[int, np.ndarray] = {}
        dim: Optional[int] = None
        for view_id in sorted(points):
            y = np.atleast_2d(np.asarray(points[view_id], dtype=np.float64))
            if y.shape[0] == 0 or y.size == 0:
                raise ModelError(f"Dataset for view {view_id} is empty")
            if dim is None:
                dim = y.shape[1]
            elif y.shape[1] != dim:
                raise ModelError(
                    f"Dataset for view {view_id} has dimension {y.shape[1]}, expected {dim}"
                )
            if weights is not None and view_id in weights:
                w = np.asarray(weights[view_id], dtype=np.float64)
            else:
                w = np.full(y.shape[0], 1.0 / y.shape[0])
            if w.shape != (y.shape[0],) or np.any(w < 0) or w.sum() <= 0:
                raise ModelError(f"Invalid weights for view {view_id}")
            y.setflags(write=False)
            w = w / w.sum()
            w.setflags(write=False)
            self._points[view_id] = y
            self._weights[view_id] = w
        self._dim = int(dim)  # type: ignore[arg-type]
        n_views = len(self._points)
        self._pooled_points = np.concatenate(list(self._points.values()))
        self._pooled_weights = (
            np.concatenate(list(self._weights.values())) / n_views
        )
        if azimuths is not None and len(azimuths) != n_views:
            raise ModelError(
                f"Camera table has {len(azimuths)} entries for {n_views} views"
            )
        self.azimuths: Optional[tuple[float, ...]] = (
            tuple(float(a) for a in azimuths) if azimuths is not None else None
        )
        self.counter = counter if counter is not None else NfeCounter()

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def view_ids(self) -> list[int]:
        return list(self._points)

    def dataset(self, cond: Condition) -> tuple[np.ndarray, np.ndarray]:
        """Data points and weights serving a condition."""
        if cond.guidance is Guidance.UNCONDITIONAL:
            return self._pooled_points, self._pooled_weights
        try:
            return self._points[cond.view_id], self._weights[cond.view_id]
        except KeyError:
            raise ModelError(f"Unknown condition view {cond.view_id}") from None

    def posterior_weights(
        self, x_t: np.ndarray, t: int, cond: Condition, sched: NoiseSchedule
    ) -> np.ndarray:
        alpha, sigma = _noise_levels(t, sched)
        x_t = self._check(x_t)
        y, w = self.dataset(cond)
        sq = np.sum((x_t[None, :] - alpha * y) ** 2, axis=1)
        with np.errstate(divide="ignore"):
            logits = np.log(w) - sq / (2.0 * sigma * sigma)
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def posterior_mean(
        self, x_t: np.ndarray, t: int, cond: Condition, sched: NoiseSchedule
    ) -> np.ndarray:
        y, _ = self.dataset(cond)
        return self.posterior_weights(x_t, t, cond, sched) @ y

    def eps(
        self, x_t: np.ndarray, t: int, cond: Condition, sched: NoiseSchedule
    ) -> np.ndarray:
        alpha, sigma = _noise_levels(t, sched)
        x_t = self._check(x_t)
        mean = self.posterior_mean(x_t, t, cond, sched)
        self.counter.tick()
        return (x_t - alpha * mean) / sigma

    def condition_for(self, camera: "Camera") -> Condition:
        """Nearest condition view to a camera's azimuth."""
        if self.azimuths is None:
            if len(self._points) != 1:
                raise ModelError("Model has no camera table to resolve views")
            return Condition(self.view_ids[0])
        az = np.asarray(self.azimuths)
        gap = np.abs((az - camera.azimuth + math.pi) % (2 * math.pi) - math.pi)
        return Condition(self.view_ids[int(np.argmin(gap))])

    def encoded(self, codec: "LinearCodec") -> "EmpiricalScoreModel":
        """The same distribution pushed through a codec's encoder."""
        return EmpiricalScoreModel(
            {v: codec.encode(y) for v, y in self._points.items()},
            self._weights,
            self.azimuths,
        )

    def _check(self, x_t: np.ndarray) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (self._dim,):
            raise ParameterError(
                f"Input of shape {x_t.shape} does not match model dimension {self._dim}"
            )
        return x_t

    def to_dict(self) -> dict[str, Any]:
        return {
            "azimuths": list(self.azimuths) if self.azimuths is not None else None,
            "datasets": [
                {
                    "viewId": v,
                    "points": self._points[v].tolist(),
                    "weights": self._weights[v].tolist(),
                }
                for v in self._points
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EmpiricalScoreModel":
        datasets = data.get("datasets") or []
        return cls(
            {int(d["viewId"]): np.asarray(d["points"]) for d in datasets},
            {int(d["viewId"]): np.asarray(d["weights"]) for d in datasets},
            data.get("azimuths"),
        )


class SingleGaussianModel:
    """Exact eps-predictor of N(mean, diag(var)); conditions are ignored."""

    def __init__(
        self,
        mean: np.ndarray,
        var: np.ndarray,
        counter: Optional[NfeCounter] = None,
    ):
        self.mean = np.asarray(mean, dtype=np.float64).ravel()
        self.var = np.broadcast_to(
            np.asarray(var, dtype=np.float64), self.mean.shape
        ).copy()
        if np.any(self.var <= 0):
            raise ModelError("Gaussian model variances must be positive")
        self.counter = counter if counter is not None else NfeCounter()

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def eps(
        self, x_t: np.ndarray, t: int, cond: Condition, sched: NoiseSchedule
    ) -> np.ndarray:
        alpha, sigma = _noise_levels(t, sched)
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != self.mean.shape:
            raise ParameterError(
                f"Input of shape {x_t.shape} does not match model dimension {self.dim}"
            )
        self.counter.tick()
        return sigma * (x_t - alpha * self.mean) / (alpha * alpha * self.var + sigma * sigma)

    def posterior_mean(self, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
        """Closed-form E[x0 | x_t]; does not count as an NFE."""
        alpha, sigma = _noise_levels(t, sched)
        s2 = sigma * sigma
        return (alpha * self.var * x_t + s2 * self.mean) / (alpha * alpha * self.var + s2)

    def condition_for(self, camera: "Camera") -> Condition:
        return Condition(0)


def empirical_eps(
    model: EmpiricalScoreModel,
    x_t: np.ndarray,
    t: int,
    cond: Condition,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Exact eps of an empirical model; one NFE."""
    return model.eps(x_t, t, cond, sched)


def gaussian_eps(
    model: SingleGaussianModel, x_t: np.ndarray, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """Exact eps of a diagonal Gaussian model; one NFE."""
    return model.eps(x_t, t, Condition(0), sched)


def cfg_eps(
    model: ScoreModel,
    x_t: np.ndarray,
    t: int,
    cond: Condition,
    scale: float,
    sched: NoiseSchedule,
) -> np.ndarray:
    """
    Classifier-free guided prediction eps_u + scale·(eps_c - eps_u).

    Scale 1 evaluates only the conditional branch (one NFE); any other
    scale evaluates both branches (two NFEs).
    """
    if scale < 0:
        raise ParameterError(f"Guidance scale must be >= 0, got {scale}")
    eps_c = model.eps(x_t, t, cond.conditional(), sched)
    if scale == 1.0:
        return eps_c
    eps_u = model.eps(x_t, t, cond.unconditional(), sched)
    return eps_u + scale * (eps_c - eps_u)


def nfe_per_eval(scale: float) -> int:
    """NFEs one guided evaluation costs."""
    return 1 if scale == 1.0 else 2


def build_oracle_model(
    scene: "GridScene",
    cameras: Sequence["Camera"],
    renderer: Optional[Callable[["GridScene", "Camera"], tuple[np.ndarray, np.ndarray]]] = None,
    jitter_count: int = 4,
    jitter_amplitude: float = 0.02,
    rng: Optional[np.random.Generator] = None,
) -> EmpiricalScoreModel:
    """
    Build the stand-in for a pretrained multi-view model from a hidden object.

    Each condition view's dataset holds the ground-truth render plus
    jitter_count brightness perturbations (gain and offset of amplitude
    jitter_amplitude), equally weighted.

    Args:
        scene: Hidden ground-truth scene
        cameras: Fixed condition cameras; view_id j is cameras[j]
        renderer: render(scene, camera) -> (image, alpha); defaults to scene.render
        jitter_count: Perturbed variants per view
        jitter_amplitude: Perturbation amplitude
        rng: Generator for the perturbations

    Returns:
        EmpiricalScoreModel with one dataset per camera
    """
    if jitter_count < 0:
        raise ParameterError("jitter_count must be >= 0")
    if rng is None:
        rng = np.random.default_rng(0)
    points: dict[int, np.ndarray] = {}
    for view_id, cam in enumerate(cameras):
        image, _ = renderer(scene, cam) if renderer is not None else scene.render(cam)
        anchor = np.asarray(image, dtype=np.float64).ravel()
        variants = [anchor]
        for _ in range(jitter_count):
            gain, offset = jitter_amplitude * rng.uniform(-1.0, 1.0, size=2)
            variants.append(np.clip((1.0 + gain) * anchor + offset, 0.0, 1.0))
        points[view_id] = np.stack(variants)
    logger.debug(
        f"Built oracle model: {len(points)} views x {jitter_count + 1} images"
    )
    return EmpiricalScoreModel(points, azimuths=[c.azimuth for c in cameras])
