#!/usr/bin/env python3
"""
Score-based iterative reconstruction (SIR) and the SDS baseline.

SIR alternates between refining a multi-view batch with the diffusion model
(forward process to t2, DDIM sampling back to 0) and reusing that batch for
several reconstruction steps, so the cost in noise-predictor evaluations is
paid once per outer iteration. SDS spends one evaluation per update.
"""

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .codec import LinearCodec
from .diffops import (
    DiffusionState,
    ForwardKind,
    count_inversion_steps,
    forward_process,
    predict_x0,
    sample_to_zero,
)
from .errors import ConfigError, DivergenceError, DomainError, ModelError, ParameterError
from .schedule import (
    AnnealKind,
    AnnealPlan,
    NoiseSchedule,
    T1Rule,
    TimestepLadder,
    make_vp_schedule,
    subsample_ladder,
    t1_from_t2,
    t2_at,
)
from .scene import (
    SCENE_TYPES,
    Camera,
    GridScene,
    Grads,
    ViewBatch,
    add_grads,
    even_cameras,
    render_batch,
    sample_cameras,
)
from .scoremodel import ScoreModel, cfg_eps, nfe_per_eval
from .shapes import SHAPES

logger = logging.getLogger("sirlab")

DEFAULT_LEARNING_RATES = {"flatland": 0.1, "voxel": 0.03}
EVAL_VIEWS = 8


class LossNorm(str, Enum):
    L1 = "L1"
    L2 = "L2"


class Space(str, Enum):
    """Where the reconstruction loss compares renders with targets"""

    PIXEL = "pixel"
    LATENT = "latent"


class SdsTargets(str, Enum):
    """SDS update rule: eps residual gradient or single-step x0 targets"""

    EPS = "eps"
    SINGLE_STEP = "single_step"


class SdsWeighting(str, Enum):
    SIGMA_OVER_ALPHA = "sigma_over_alpha"
    UNIT = "unit"


def _camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(part[:1].upper() + part[1:] for part in rest)


@dataclass(frozen=True)
class SirConfig:
    """
    Every knob of a SIR or SDS run. Serialized with camelCase keys
    (iterations, reconSteps, nViews, anneal, ...).
    """

    iterations: int = 20
    recon_steps: int = 15
    n_views: int = 4
    anneal: AnnealPlan = field(default_factory=AnnealPlan)
    eta: float = 0.0
    ladder_steps: int = 20
    cfg_scale: float = 1.0
    forward_kind: ForwardKind = ForwardKind.HYBRID
    loss_norm: LossNorm = LossNorm.L1
    ref_color_weight: float = 0.0
    ref_opacity_weight: float = 0.0
    init_steps: int = 15
    learning_rate: Optional[float] = None
    lr_decay: float = 1.0
    seed: int = 0
    num_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    representation: str = "flatland"
    resolution: int = 32
    task: str = "sphere"
    space: Space = Space.PIXEL
    latent_diffusion: bool = False
    codec_factor: int = 4
    condition_views: int = 24
    jitter_count: int = 4
    jitter_amplitude: float = 0.02
    sds_updates: int = 200
    sds_views: int = 1
    sds_t_range: tuple[float, float] = (0.2, 0.8)
    sds_targets: SdsTargets = SdsTargets.EPS
    sds_weighting: SdsWeighting = SdsWeighting.SIGMA_OVER_ALPHA
    sds_eval_every: int = 10
    mc_threshold: float = 0.5
    resolution_schedule: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        try:
            for name, enum in (
                ("forward_kind", ForwardKind),
                ("loss_norm", LossNorm),
                ("space", Space),
                ("sds_targets", SdsTargets),
                ("sds_weighting", SdsWeighting),
            ):
                value = getattr(self, name)
                if name == "forward_kind" and isinstance(value, str):
                    value = ForwardKind.parse(value)
                object.__setattr__(self, name, enum(value))
        except (ValueError, ParameterError) as e:
            raise ConfigError(str(e)) from None
        if isinstance(self.anneal, dict):
            try:
                object.__setattr__(self, "anneal", AnnealPlan.from_dict(self.anneal))
            except (ParameterError, TypeError, ValueError) as e:
                raise ConfigError(f"Invalid anneal plan: {e}") from None
        object.__setattr__(self, "sds_t_range", tuple(float(v) for v in self.sds_t_range))
        object.__setattr__(
            self,
            "resolution_schedule",
            tuple((int(k), int(side)) for k, side in self.resolution_schedule),
        )
        self._validate()

    def _validate(self) -> None:
        checks = [
            (self.iterations >= 0, f"iterations must be >= 0, got {self.iterations}"),
            (self.recon_steps >= 1, f"reconSteps must be >= 1, got {self.recon_steps}"),
            (self.n_views >= 1, f"nViews must be >= 1, got {self.n_views}"),
            (0.0 <= self.eta <= 1.0, f"eta must lie in [0, 1], got {self.eta}"),
            (
                1 <= self.ladder_steps <= self.num_steps,
                f"ladderSteps must lie in [1, {self.num_steps}], got {self.ladder_steps}",
            ),
            (self.cfg_scale >= 0.0, f"cfgScale must be >= 0, got {self.cfg_scale}"),
            (self.init_steps >= 0, f"initSteps must be >= 0, got {self.init_steps}"),
            (
                self.ref_color_weight >= 0.0 and self.ref_opacity_weight >= 0.0,
                "Reference loss weights must be >= 0",
            ),
            (
                self.learning_rate is None or self.learning_rate > 0.0,
                f"learningRate must be > 0, got {self.learning_rate}",
            ),
            (0.0 < self.lr_decay <= 1.0, f"lrDecay must lie in (0, 1], got {self.lr_decay}"),
            (
                self.representation in SCENE_TYPES,
                f"Unknown representation '{self.representation}'",
            ),
            (self.task in SHAPES, f"Unknown task '{self.task}'"),
            (self.resolution >= 2, f"resolution must be >= 2, got {self.resolution}"),
            (
                self.space is Space.PIXEL or self.latent_diffusion,
                "Latent-space reconstruction needs latentDiffusion",
            ),
            (self.condition_views >= 1, "conditionViews must be >= 1"),
            (self.jitter_count >= 0, "jitterCount must be >= 0"),
            (self.sds_updates >= 0, "sdsUpdates must be >= 0"),
            (self.sds_views >= 1, "sdsViews must be >= 1"),
            (self.sds_eval_every >= 1, "sdsEvalEvery must be >= 1"),
            (
                len(self.sds_t_range) == 2
                and 0.0 < self.sds_t_range[0] <= self.sds_t_range[1] < 1.0,
                f"sdsTRange must satisfy 0 < lo <= hi < 1, got {self.sds_t_range}",
            ),
            (
                all(side >= 2 and k >= 0 for k, side in self.resolution_schedule),
                "resolutionSchedule entries must be [k >= 0, side >= 2]",
            ),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LEARNING_RATES[self.representation]

    @property
    def view_shape(self) -> tuple[int, ...]:
        r = self.resolution
        return (r,) if self.representation == "flatland" else (r, r, 3)

    def initial_side(self) -> int:
        """Grid side used before the first resolution change."""
        for k, side in sorted(self.resolution_schedule):
            if k == 0:
                return side
        return self.resolution

    def side_change_at(self, k: int) -> Optional[int]:
        if k == 0:
            return None
        for step, side in self.resolution_schedule:
            if step == k:
                return side
        return None

    def replace(self, **changes: Any) -> "SirConfig":
        """Copy with the non-None changes applied."""
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, AnnealPlan):
                value = value.to_dict()
            elif isinstance(value, Enum):
                value = value.value
            elif f.name == "resolution_schedule":
                value = [list(pair) for pair in value]
            elif isinstance(value, tuple):
                value = list(value)
            out[_camel(f.name)] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SirConfig":
        """
        Build a config from camelCase keys.

        Raises:
            ConfigError: Unknown keys or invalid values
        """
        keys = {_camel(f.name): f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - set(keys)
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        kwargs = {keys[k]: v for k, v in data.items()}
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"Invalid config: {e}") from None


PRESETS: dict[str, SirConfig] = {
    "desk": SirConfig(),
    "mvdream": SirConfig(
        cfg_scale=7.5,
        anneal=AnnealPlan(t2_start=0.8, t2_end=0.5, t1_rule=T1Rule.SQUARE_OVER_T),
        eta=0.0,
        ladder_steps=50,
        init_steps=50,
        iterations=50,
        resolution_schedule=((0, 16), (25, 32)),
    ),
    "stable-zero123": SirConfig(
        cfg_scale=3.0,
        anneal=AnnealPlan(t2_start=0.8, t2_end=0.2, ratio=0.6),
        eta=0.5,
        ladder_steps=20,
        init_steps=15,
        iterations=30,
        ref_color_weight=0.1,
        ref_opacity_weight=0.001,
        lr_decay=0.95,
        resolution_schedule=((0, 16), (10, 24), (20, 32)),
    ),
    "stable-zero123-3dgs": SirConfig(
        cfg_scale=3.0,
        anneal=AnnealPlan(t2_start=0.9, t2_end=0.2, ratio=0.6),
        eta=0.5,
        ladder_steps=20,
        n_views=6,
        init_steps=15,
        iterations=20,
        ref_color_weight=0.3,
        ref_opacity_weight=0.01,
    ),
    "imagedream": SirConfig(
        cfg_scale=3.0,
        anneal=AnnealPlan(t2_start=0.8, t2_end=0.6, t1_rule=T1Rule.SQUARE_OVER_T),
        eta=1.0,
        ladder_steps=10,
        init_steps=50,
        iterations=30,
        resolution_schedule=((0, 16), (15, 32)),
    ),
}


def get_preset(name: str) -> SirConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"Unknown preset '{name}'. Choose from: {', '.join(PRESETS)}"
        ) from None


def make_codec(config: SirConfig) -> LinearCodec:
    return LinearCodec(config.view_shape, config.codec_factor)


@dataclass
class RunContext:
    """Shared machinery of one run: schedule, ladder, generator, codec."""

    config: SirConfig
    sched: NoiseSchedule
    ladder: TimestepLadder
    rng: np.random.Generator
    codec: Optional[LinearCodec] = None

    @classmethod
    def create(
        cls,
        config: SirConfig,
        model: Optional[ScoreModel] = None,
        codec: Optional[LinearCodec] = None,
    ) -> "RunContext":
        sched = make_vp_schedule(config.num_steps, config.beta_min, config.beta_max)
        ladder = subsample_ladder(config.num_steps, config.ladder_steps)
        if config.latent_diffusion and codec is None:
            codec = make_codec(config)
        if model is not None:
            expected = codec.latent_dim if config.latent_diffusion and codec else int(
                np.prod(config.view_shape)
            )
            if model.dim != expected:
                raise ModelError(
                    f"Score model dimension {model.dim} does not match the "
                    f"{'latent' if config.latent_diffusion else 'pixel'} size {expected}"
                )
        return cls(config, sched, ladder, np.random.default_rng(config.seed), codec)

    @property
    def latent(self) -> bool:
        return self.config.latent_diffusion


# Optimizer


@dataclass
class OptimState:
    """Adam moments per parameter, step count and learning rate."""

    lr: float = 0.1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    def reset(self) -> None:
        self.step = 0
        self.m.clear()
        self.v.clear()


Bounds = dict[str, tuple[Optional[float], Optional[float]]]


def adam_step(
    params: dict[str, np.ndarray],
    grads: Grads,
    state: OptimState,
    lr: Optional[float] = None,
    betas: tuple[float, float] = (0.9, 0.999),
    eps_hat: float = 1e-8,
    bounds: Optional[Bounds] = None,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """
    Bias-corrected Adam update applied in place, then projection onto bounds.

    Names missing from grads are left untouched.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ParameterError(
                f"Gradient for {name} has shape {g.shape}, parameter has {p.shape}"
            )
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps_hat)
        if bounds and name in bounds:
            lo, hi = bounds[name]
            np.clip(p, lo, hi, out=p)
    return params, state


def _scene_step(scene: GridScene, grads: Grads, optim: OptimState, lr: float) -> None:
    adam_step(scene.params(), grads, optim, lr=lr, bounds=GridScene.bounds)
    scene.project()


# Losses


def _residual_cotangent(
    residual: np.ndarray, norm: LossNorm, count: int
) -> tuple[float, np.ndarray]:
    if norm is LossNorm.L1:
        return float(np.abs(residual).sum() / count), np.sign(residual) / count
    return float((residual * residual).sum() / count), 2.0 * residual / count


def reconstruction_loss(
    scene: GridScene,
    cameras: Sequence[Camera],
    targets: ViewBatch,
    norm: LossNorm = LossNorm.L1,
    space: Space = Space.PIXEL,
    codec: Optional[LinearCodec] = None,
) -> tuple[float, Grads]:
    """
    Mean elementwise L1 or squared error between renders and targets.

    In latent space the renders are encoded first and compared with
    targets.latents; the cotangent is pulled back through the encoder.

    Raises:
        ParameterError: On a camera/target count or shape mismatch
    """
    norm = LossNorm(norm)
    space = Space(space)
    if len(cameras) != len(targets):
        raise ParameterError(f"{len(cameras)} cameras for {len(targets)} targets")
    if space is Space.LATENT:
        if codec is None or targets.latents is None:
            raise ParameterError("Latent-space loss needs a codec and latent targets")
        reference = targets.latents
    else:
        reference = targets.vectors
    if reference.shape[1] != (codec.latent_dim if space is Space.LATENT else scene.pixel_dim):  # type: ignore[union-attr]
        raise ParameterError(
            f"Targets of size {reference.shape[1]} do not match the scene views"
        )
    count = reference.size
    total = 0.0
    grads: Optional[Grads] = None
    for j, cam in enumerate(cameras):
        image, _ = scene.render(cam)
        x = image.ravel()
        if space is Space.LATENT:
            residual = codec.encode(x) - reference[j]  # type: ignore[union-attr]
        else:
            residual = x - reference[j]
        loss, cot = _residual_cotangent(residual, norm, count)
        if space is Space.LATENT:
            cot = codec.decode(cot)  # type: ignore[union-attr]
        total += loss
        grads = add_grads(grads, scene.render_vjp(cam, cot))
    assert grads is not None
    return total, grads


@dataclass(eq=False)
class ReferenceView:
    """Front view (azimuth 0) of the object, treated as ground truth."""

    image: np.ndarray
    alpha: np.ndarray

    @classmethod
    def from_scene(cls, scene: GridScene) -> "ReferenceView":
        image, alpha = scene.render(Camera(0.0))
        return cls(image, alpha)


def reference_loss(
    scene: GridScene,
    ref_image: np.ndarray,
    ref_alpha: np.ndarray,
    weights: tuple[float, float],
) -> tuple[float, Grads]:
    """color_weight·L1(front render) + opacity_weight·L1(front alpha)."""
    color_weight, opacity_weight = weights
    if color_weight == 0.0 and opacity_weight == 0.0:
        return 0.0, {k: np.zeros_like(v) for k, v in scene.params().items()}
    cam = Camera(0.0)
    image, alpha = scene.render(cam)
    r_img = image - np.asarray(ref_image).reshape(image.shape)
    r_alpha = alpha - np.asarray(ref_alpha).reshape(alpha.shape)
    loss = color_weight * np.abs(r_img).mean() + opacity_weight * np.abs(r_alpha).mean()
    grads = scene.render_vjp(
        cam,
        color_weight * np.sign(r_img) / r_img.size,
        opacity_weight * np.sign(r_alpha) / r_alpha.size,
    )
    return float(loss), grads


# Metrics


def psnr(pred: np.ndarray, truth: np.ndarray) -> float:
    """Peak signal-to-noise ratio for signals in [0, 1]."""
    mse = float(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def scene_psnr(scene: GridScene, truth: GridScene, n_views: int = EVAL_VIEWS) -> float:
    """PSNR over evenly spaced views starting at azimuth 0."""
    cams = even_cameras(n_views)
    return psnr(render_batch(scene, cams).images, render_batch(truth, cams).images)


@dataclass
class TraceRecord:
    k: int
    t1: int
    t2: int
    nfe: int
    loss: float
    psnr: Optional[float]
    wall_ms: float


@dataclass
class PhaseTiming:
    """Wall time of one SDS update split by phase (milliseconds)."""

    update: int
    render_ms: float = 0.0
    eps_ms: float = 0.0
    backprop_ms: float = 0.0
    codec_ms: float = 0.0
    total_ms: float = 0.0
    nfe: int = 0


@dataclass
class RunTrace:
    """Per-outer-iteration records of one run; nfe is cumulative."""

    records: list[TraceRecord] = field(default_factory=list)
    init_nfe: int = 0
    init_psnr: Optional[float] = None
    method: str = "sir"
    timings: list[PhaseTiming] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.nfe < self.records[-1].nfe:
            raise ParameterError("Trace NFE must be non-decreasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total_nfe(self) -> int:
        return self.records[-1].nfe if self.records else self.init_nfe

    @property
    def final_psnr(self) -> Optional[float]:
        for rec in reversed(self.records):
            if rec.psnr is not None:
                return rec.psnr
        return self.init_psnr

    @property
    def final_loss(self) -> Optional[float]:
        return self.records[-1].loss if self.records else None

    def summary(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "iterations": len(self.records),
            "initNfe": self.init_nfe,
            "totalNfe": self.total_nfe,
            "initPsnr": self.init_psnr,
            "psnr": self.final_psnr,
            "finalLoss": self.final_loss,
            "wallMs": sum(r.wall_ms for r in self.records),
        }


def nfe_to_reach(trace: RunTrace, target_psnr: float) -> Optional[int]:
    """Cumulative NFE at which the trace first reaches a PSNR, or None."""
    if trace.init_psnr is not None and trace.init_psnr >= target_psnr:
        return trace.init_nfe
    for rec in trace.records:
        if rec.psnr is not None and rec.psnr >= target_psnr:
            return rec.nfe
    return None


def efficiency_ratio(sir: RunTrace, sds: RunTrace) -> tuple[float, bool]:
    """
    NFE the SDS trace needs to reach the SIR trace's final PSNR, over SIR's
    total NFE. An SDS run that never gets there counts at its capped total,
    which makes the ratio a lower bound; the flag says whether it was reached.

    Raises:
        ParameterError: If the SIR trace has no PSNR or spent no NFE
    """
    target = sir.final_psnr
    if target is None or sir.total_nfe == 0:
        raise ParameterError("Efficiency ratio needs a SIR trace with PSNR and NFE")
    reached = nfe_to_reach(sds, target)
    spent = reached if reached is not None else sds.total_nfe
    return spent / sir.total_nfe, reached is not None


# SIR


def plan_timesteps(k: int, config: SirConfig, ctx: RunContext) -> tuple[int, int]:
    """(t1, t2) of outer iteration k as the forward process will use them."""
    t2 = t2_at(k, config.iterations, config.anneal, config.num_steps, ctx.rng, ctx.ladder)
    kind = config.forward_kind
    if kind is ForwardKind.NOISE_ONLY:
        return t2, t2
    if kind is ForwardKind.INVERSION_ONLY:
        return 0, t2
    t1 = t1_from_t2(t2, config.anneal, config.num_steps)
    return min(ctx.ladder.snap(t1), t2), t2


def expected_nfe(config: SirConfig) -> int:
    """
    Closed-form total NFE of run_sir for a deterministic anneal plan.

    Raises:
        ConfigError: For the random anneal plan
    """
    if config.anneal.kind is AnnealKind.RANDOM:
        raise ConfigError("Closed-form NFE needs a deterministic anneal plan")
    ladder = subsample_ladder(config.num_steps, config.ladder_steps)
    T = config.num_steps
    per_eval = nfe_per_eval(config.cfg_scale)
    total = 0
    if config.init_steps > 0:
        total += config.n_views * len(ladder.below(ladder.top))
    for k in range(config.iterations):
        t2 = t2_at(k, config.iterations, config.anneal, T, ladder=ladder)
        if config.forward_kind is ForwardKind.HYBRID:
            forward = count_inversion_steps(t1_from_t2(t2, config.anneal, T), t2, ladder)
        elif config.forward_kind is ForwardKind.INVERSION_ONLY:
            forward = len(ladder.between(0, t2))
        else:
            forward = 0
        total += config.n_views * (forward + len(ladder.below(t2)))
    return total * per_eval


def _azimuth_grid(model: ScoreModel) -> Optional[int]:
    azimuths = getattr(model, "azimuths", None)
    return len(azimuths) if azimuths else None


def _views_from_vectors(
    vectors: list[np.ndarray], scene: GridScene, cameras: Sequence[Camera], ctx: RunContext
) -> ViewBatch:
    if ctx.latent:
        latents = np.stack(vectors)
        images = np.clip(ctx.codec.decode(latents), 0.0, 1.0)  # type: ignore[union-attr]
    else:
        latents = None
        images = np.stack(vectors)
    alphas = np.stack([scene.render(cam)[1] for cam in cameras])
    return ViewBatch(
        images=images.reshape((len(cameras),) + scene.view_shape),
        cameras=tuple(cameras),
        alpha_maps=alphas,
        latents=latents,
    )


def refine_views(
    scene: GridScene,
    cameras: Sequence[Camera],
    k: int,
    config: SirConfig,
    model: ScoreModel,
    ctx: Optional[RunContext] = None,
    timesteps: Optional[tuple[int, int]] = None,
) -> ViewBatch:
    """
    Render, carry each view to t2 with the configured forward process and
    sample it back to 0. In latent mode views are encoded before diffusion
    and the refined latents decoded for the image targets.
    """
    if not 0 <= k < max(config.iterations, 1):
        raise ParameterError(f"Iteration k={k} outside [0, K={config.iterations})")
    ctx = ctx or RunContext.create(config, model)
    t1, t2 = timesteps if timesteps is not None else plan_timesteps(k, config, ctx)
    refined = []
    for cam in cameras:
        image, _ = scene.render(cam)
        x = image.ravel()
        if ctx.latent:
            x = ctx.codec.encode(x)  # type: ignore[union-attr]
        cond = model.condition_for(cam)
        state = forward_process(
            config.forward_kind,
            x,
            max(t1, 1),
            t2,
            ctx.ladder,
            model,
            cond,
            ctx.sched,
            ctx.rng,
            config.cfg_scale,
        )
        refined.append(
            sample_to_zero(
                state,
                ctx.ladder,
                config.eta,
                model,
                cond,
                ctx.sched,
                ctx.rng,
                config.cfg_scale,
                clamp=not ctx.latent,
            )
        )
    return _views_from_vectors(refined, scene, cameras, ctx)


def inner_reconstruct(
    scene: GridScene,
    cameras: Sequence[Camera],
    targets: ViewBatch,
    steps: int,
    optim: OptimState,
    config: Optional[SirConfig] = None,
    reference: Optional[ReferenceView] = None,
    codec: Optional[LinearCodec] = None,
    iteration: Optional[int] = None,
    color_only: bool = False,
) -> GridScene:
    """
    Run `steps` optimizer steps of the reconstruction loss against fixed
    targets, projecting the scene after each step. Consumes no NFE.

    Raises:
        DivergenceError: If the loss becomes non-finite
    """
    if steps < 1:
        raise ParameterError(f"Reconstruction needs at least one step, got {steps}")
    config = config or SirConfig()
    weights = (config.ref_color_weight, config.ref_opacity_weight)
    for step in range(steps):
        loss, grads = reconstruction_loss(
            scene, cameras, targets, config.loss_norm, config.space, codec
        )
        if reference is not None and any(weights):
            ref_loss, ref_grads = reference_loss(scene, reference.image, reference.alpha, weights)
            loss += ref_loss
            add_grads(grads, ref_grads)
        if not math.isfinite(loss):
            logger.error(f"Reconstruction diverged at iteration {iteration} step {step}")
            raise DivergenceError(loss, iteration, step)
        if color_only:
            grads.pop("density")
        _scene_step(scene, grads, optim, optim.lr)
        optim.losses.append(loss)
    return scene


def _optimize_against(
    scene: GridScene,
    targets: ViewBatch,
    steps: int,
    config: SirConfig,
    ctx: RunContext,
    reference: Optional[ReferenceView],
) -> GridScene:
    optim = OptimState(lr=config.lr)
    return inner_reconstruct(
        scene, targets.cameras, targets, steps, optim, config, reference, ctx.codec
    )


def init_scene(
    config: SirConfig,
    model: ScoreModel,
    ctx: Optional[RunContext] = None,
    reference: Optional[ReferenceView] = None,
) -> GridScene:
    """
    Direct reconstruction from views sampled out of pure noise.

    With init_steps = 0 the empty scene (zero density, mid-gray) is returned
    and no NFE is spent.
    """
    ctx = ctx or RunContext.create(config, model)
    cls = SCENE_TYPES[config.representation]
    scene = cls.empty(config.initial_side(), config.resolution)
    if config.init_steps == 0:
        return scene
    cameras = sample_cameras(config.n_views, ctx.rng, _azimuth_grid(model))
    samples = []
    for cam in cameras:
        cond = model.condition_for(cam)
        noise = ctx.rng.standard_normal(model.dim)
        state = DiffusionState(noise, ctx.ladder.top)
        samples.append(
            sample_to_zero(
                state,
                ctx.ladder,
                config.eta,
                model,
                cond,
                ctx.sched,
                ctx.rng,
                config.cfg_scale,
                clamp=not ctx.latent,
            )
        )
    targets = _views_from_vectors(samples, scene, cameras, ctx)
    logger.debug(f"Initializing from {len(cameras)} sampled views, {config.init_steps} steps")
    return _optimize_against(scene, targets, config.init_steps, config, ctx, reference)


def run_sir(
    config: SirConfig,
    model: ScoreModel,
    truth: Optional[GridScene] = None,
    reference: Optional[ReferenceView] = None,
    codec: Optional[LinearCodec] = None,
    progress: Optional[Callable[[TraceRecord], None]] = None,
) -> tuple[GridScene, RunTrace]:
    """
    Initialize, then K outer iterations of {sample cameras, refine views,
    reconstruct}. Total NFE does not depend on the reconstruction steps.

    Args:
        config: Run configuration
        model: Noise predictor (pixel or latent dimension per config)
        truth: Hidden object for PSNR metrics
        reference: Front reference view for the reference loss
        codec: Codec override in latent mode
        progress: Called with each trace record

    Returns:
        Final scene and its RunTrace
    """
    ctx = RunContext.create(config, model, codec)
    start = model.counter.count
    logger.info(
        f"SIR run: K={config.iterations} I={config.recon_steps} views={config.n_views} "
        f"forward={config.forward_kind.value} space={config.space.value}"
    )
    scene = init_scene(config, model, ctx, reference)
    trace = RunTrace(init_nfe=model.counter.count - start)
    if truth is not None:
        trace.init_psnr = scene_psnr(scene, truth)
    optim = OptimState(lr=config.lr)
    grid = _azimuth_grid(model)
    for k in range(config.iterations):
        began = time.perf_counter()
        new_side = config.side_change_at(k)
        if new_side is not None and new_side != scene.side:
            logger.debug(f"Resampling grid {scene.side} -> {new_side} at iteration {k}")
            scene = scene.resample(new_side)
            optim.reset()
        cameras = sample_cameras(config.n_views, ctx.rng, grid)
        t1, t2 = plan_timesteps(k, config, ctx)
        targets = refine_views(scene, cameras, k, config, model, ctx, (t1, t2))
        optim.lr = config.lr * config.lr_decay**k
        inner_reconstruct(
            scene, cameras, targets, config.recon_steps, optim, config, reference, ctx.codec, k
        )
        record = TraceRecord(
            k=k,
            t1=t1,
            t2=t2,
            nfe=model.counter.count - start,
            loss=optim.losses[-1],
            psnr=scene_psnr(scene, truth) if truth is not None else None,
            wall_ms=(time.perf_counter() - began) * 1000.0,
        )
        trace.append(record)
        logger.debug(
            f"iter {k}: t1={t1} t2={t2} nfe={record.nfe} loss={record.loss:.5f}"
            + (f" psnr={record.psnr:.2f}" if record.psnr is not None else "")
        )
        if progress is not None:
            progress(record)
    logger.info(f"SIR run finished: nfe={trace.total_nfe} psnr={trace.final_psnr}")
    return scene, trace


def refine_texture(
    scene: GridScene,
    config: SirConfig,
    model: ScoreModel,
    reference: Optional[ReferenceView] = None,
    steps: int = 30,
) -> GridScene:
    """
    One extra noise-only SIR iteration with eta = 0 at the final noise level,
    updating color only.
    """
    texture_config = config.replace(
        forward_kind=ForwardKind.NOISE_ONLY, eta=0.0, recon_steps=steps, iterations=1
    )
    ctx = RunContext.create(texture_config, model)
    final_level = AnnealPlan(t2_start=config.anneal.t2_end, t2_end=config.anneal.t2_end)
    t2 = t2_at(0, 1, final_level, config.num_steps, ladder=ctx.ladder)
    cameras = sample_cameras(config.n_views, ctx.rng, _azimuth_grid(model))
    targets = refine_views(scene, cameras, 0, texture_config, model, ctx, (t2, t2))
    optim = OptimState(lr=config.lr)
    return inner_reconstruct(
        scene,
        cameras,
        targets,
        steps,
        optim,
        texture_config,
        reference,
        ctx.codec,
        color_only=True,
    )


# SDS


def sds_weight(t: int, sched: NoiseSchedule, kind: SdsWeighting = SdsWeighting.SIGMA_OVER_ALPHA) -> float:
    if SdsWeighting(kind) is SdsWeighting.UNIT:
        return 1.0
    return float(sched.sigma[t] / sched.alpha[t])


WeightFn = Callable[[int, NoiseSchedule], float]


class _Stopwatch:
    def __init__(self, timing: Optional[PhaseTiming]):
        self.timing = timing

    def lap(self, phase: str, since: float) -> float:
        now = time.perf_counter()
        if self.timing is not None:
            setattr(self.timing, phase, getattr(self.timing, phase) + (now - since) * 1000.0)
        return now


def _sds_pass(
    scene: GridScene,
    cameras: Sequence[Camera],
    model: ScoreModel,
    t: int,
    weight_fn: WeightFn,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    space: Space,
    codec: Optional[LinearCodec],
    cfg_scale: float,
    data_form: bool,
    timing: Optional[PhaseTiming] = None,
) -> Grads:
    if t < 1:
        raise DomainError(f"SDS needs t >= 1, got {t}")
    space = Space(space)
    if space is Space.LATENT and codec is None:
        raise ParameterError("Latent SDS needs a codec")
    watch = _Stopwatch(timing)
    alpha, sigma = sched.alpha[t], sched.sigma[t]
    w = weight_fn(t, sched)
    grads: Optional[Grads] = None
    for cam in cameras:
        mark = time.perf_counter()
        image, _ = scene.render(cam)
        mark = watch.lap("render_ms", mark)
        x = image.ravel()
        if space is Space.LATENT:
            x = codec.encode(x)  # type: ignore[union-attr]
            mark = watch.lap("codec_ms", mark)
        eps = rng.standard_normal(x.shape)
        x_t = alpha * x + sigma * eps
        cond = model.condition_for(cam)
        if data_form:
            x0_hat = predict_x0(DiffusionState(x_t, t), model, cond, sched, cfg_scale)
            residual = (w * alpha / sigma) * (x - x0_hat)
        else:
            eps_hat = cfg_eps(model, x_t, t, cond, cfg_scale, sched)
            residual = w * (eps_hat - eps)
        mark = watch.lap("eps_ms", mark)
        if not np.all(np.isfinite(residual)):
            raise DivergenceError(float("nan"), phase="sds")
        if space is Space.LATENT:
            residual = codec.decode(residual)  # type: ignore[union-attr]
            mark = watch.lap("codec_ms", mark)
        grads = add_grads(grads, scene.render_vjp(cam, residual))
        watch.lap("backprop_ms", mark)
    assert grads is not None
    return grads


def sds_grad(
    scene: GridScene,
    cameras: Sequence[Camera],
    model: ScoreModel,
    t: int,
    weight_fn: WeightFn,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    space: Space = Space.PIXEL,
    codec: Optional[LinearCodec] = None,
    cfg_scale: float = 1.0,
) -> Grads:
    """w(t)·(eps_hat(alpha_t x + sigma_t eps, t) - eps) pulled back through the renderer."""
    return _sds_pass(
        scene, cameras, model, t, weight_fn, rng, sched, space, codec, cfg_scale, False
    )


def sds_grad_data_form(
    scene: GridScene,
    cameras: Sequence[Camera],
    model: ScoreModel,
    t: int,
    weight_fn: WeightFn,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    space: Space = Space.PIXEL,
    codec: Optional[LinearCodec] = None,
    cfg_scale: float = 1.0,
) -> Grads:
    """(w(t)·alpha_t/sigma_t)·(x - x0_hat) pulled back through the renderer."""
    return _sds_pass(
        scene, cameras, model, t, weight_fn, rng, sched, space, codec, cfg_scale, True
    )


def _single_step_grads(
    scene: GridScene,
    cameras: Sequence[Camera],
    model: ScoreModel,
    t: int,
    ctx: RunContext,
    timing: PhaseTiming,
) -> tuple[float, Grads]:
    """One reconstruction step against single-step x0 predictions."""
    config = ctx.config
    watch = _Stopwatch(timing)
    vectors = []
    for cam in cameras:
        mark = time.perf_counter()
        image, _ = scene.render(cam)
        mark = watch.lap("render_ms", mark)
        x = image.ravel()
        if ctx.latent:
            x = ctx.codec.encode(x)  # type: ignore[union-attr]
            mark = watch.lap("codec_ms", mark)
        state = DiffusionState(
            ctx.sched.alpha[t] * x + ctx.sched.sigma[t] * ctx.rng.standard_normal(x.shape), t
        )
        x0_hat = predict_x0(state, model, model.condition_for(cam), ctx.sched, config.cfg_scale)
        vectors.append(x0_hat if ctx.latent else np.clip(x0_hat, 0.0, 1.0))
        watch.lap("eps_ms", mark)
    mark = time.perf_counter()
    targets = _views_from_vectors(vectors, scene, cameras, ctx)
    mark = watch.lap("codec_ms" if ctx.latent else "render_ms", mark)
    loss, grads = reconstruction_loss(
        scene, cameras, targets, config.loss_norm, config.space, ctx.codec
    )
    watch.lap("backprop_ms", mark)
    return loss, grads


def run_sds(
    config: SirConfig,
    model: ScoreModel,
    truth: Optional[GridScene] = None,
    codec: Optional[LinearCodec] = None,
    progress: Optional[Callable[[TraceRecord], None]] = None,
) -> tuple[GridScene, RunTrace]:
    """
    SDS baseline from the empty scene: per update sample cameras, draw t
    uniformly from the configured range and take one optimizer step.
    Per-update phase timings are kept on the trace; camera sampling counts
    as render time and the backprop phase includes the optimizer update.
    """
    ctx = RunContext.create(config, model, codec)
    start = model.counter.count
    cls = SCENE_TYPES[config.representation]
    scene = cls.empty(config.initial_side(), config.resolution)
    trace = RunTrace(method="sds")
    if truth is not None:
        trace.init_psnr = scene_psnr(scene, truth)
    optim = OptimState(lr=config.lr)
    grid = _azimuth_grid(model)
    lo = max(1, int(math.floor(config.sds_t_range[0] * config.num_steps)))
    hi = int(math.floor(config.sds_t_range[1] * config.num_steps))

    def weight_fn(t: int, sched: NoiseSchedule) -> float:
        return sds_weight(t, sched, config.sds_weighting)

    logger.info(
        f"SDS run: updates={config.sds_updates} views={config.sds_views} "
        f"targets={config.sds_targets.value} space={config.space.value}"
    )
    elapsed = 0.0
    for update in range(config.sds_updates):
        began = time.perf_counter()
        timing = PhaseTiming(update=update)
        watch = _Stopwatch(timing)
        cameras = sample_cameras(config.sds_views, ctx.rng, grid)
        t = int(ctx.rng.integers(lo, hi + 1))
        watch.lap("render_ms", began)
        if config.sds_targets is SdsTargets.SINGLE_STEP:
            loss, grads = _single_step_grads(scene, cameras, model, t, ctx, timing)
            mark = time.perf_counter()
        else:
            grads = _sds_pass(
                scene,
                cameras,
                model,
                t,
                weight_fn,
                ctx.rng,
                ctx.sched,
                config.space,
                ctx.codec,
                config.cfg_scale,
                False,
                timing,
            )
            mark = time.perf_counter()
            # no scalar objective; track the gradient magnitude instead
            loss = float(sum(np.abs(g).sum() for g in grads.values()))
        if not math.isfinite(loss):
            logger.error(f"SDS diverged at update {update}")
            raise DivergenceError(loss, step=update, phase="sds")
        _scene_step(scene, grads, optim, optim.lr)
        watch.lap("backprop_ms", mark)
        timing.total_ms = (time.perf_counter() - began) * 1000.0
        timing.nfe = model.counter.count - start
        trace.timings.append(timing)
        elapsed += timing.total_ms
        last = update == config.sds_updates - 1
        if (update + 1) % config.sds_eval_every == 0 or last:
            record = TraceRecord(
                k=update,
                t1=t,
                t2=t,
                nfe=timing.nfe,
                loss=loss,
                psnr=scene_psnr(scene, truth) if truth is not None else None,
                wall_ms=elapsed,
            )
            elapsed = 0.0
            trace.append(record)
            if progress is not None:
                progress(record)
    logger.info(f"SDS run finished: nfe={trace.total_nfe} psnr={trace.final_psnr}")
    return scene, trace
