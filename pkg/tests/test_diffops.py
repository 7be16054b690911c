"""Tests for noising, DDIM sampling/inversion and the hybrid forward process"""

import logging

import numpy as np
import pytest

from sirlab.diffops import (
    DiffusionState,
    ForwardKind,
    count_inversion_steps,
    ddim_invert,
    ddim_invert_step,
    ddim_sigma,
    ddim_step,
    forward_process,
    hybrid_forward,
    noise_add,
    predict_x0,
    sample_to_zero,
)
from sirlab.errors import DomainError, ParameterError
from sirlab.schedule import subsample_ladder
from sirlab.scoremodel import Condition, EmpiricalScoreModel, NfeCounter, SingleGaussianModel

C0 = Condition(0)


class ZeroModel:
    """Predicts eps = 0 everywhere."""

    def __init__(self, dim):
        self.dim = dim
        self.counter = NfeCounter()

    def eps(self, x_t, t, cond, sched):
        self.counter.tick()
        return np.zeros_like(x_t)

    def condition_for(self, camera):
        return C0


class FixedEpsModel(ZeroModel):
    """Returns a stored eps regardless of input."""

    def __init__(self, eps):
        super().__init__(len(eps))
        self.value = np.asarray(eps)

    def eps(self, x_t, t, cond, sched):
        self.counter.tick()
        return self.value.copy()


# =============================================================================
# noise_add / predict_x0
# =============================================================================


def test_noise_add_at_zero_is_identity(sched, rng):
    """Test noising to t = 0 returns the input"""
    x0 = rng.uniform(size=6)
    np.testing.assert_array_equal(noise_add(x0, 0, sched, rng).x, x0)


def test_noise_add_reproducible(sched):
    """Test the same seed draws the same noise"""
    x0 = np.linspace(0, 1, 6)
    a = noise_add(x0, 500, sched, np.random.default_rng(5))
    b = noise_add(x0, 500, sched, np.random.default_rng(5))
    assert a.x.tobytes() == b.x.tobytes()
    assert a.t == 500


def test_noise_add_moments(sched):
    """Test noised draws have mean alpha x0 and variance sigma^2"""
    x0 = np.array([0.2, 0.8])
    gen = np.random.default_rng(0)
    draws = np.stack([noise_add(x0, 500, sched, gen).x for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(axis=0), sched.alpha[500] * x0, atol=0.04)
    np.testing.assert_allclose(draws.var(axis=0), sched.sigma[500] ** 2, rtol=5e-2)


def test_predict_x0_inverts_noise_add(sched, rng):
    """Test the exact eps recovers x0"""
    x0 = rng.uniform(size=5)
    eps = rng.standard_normal(5)
    t = 700
    state = DiffusionState(sched.alpha[t] * x0 + sched.sigma[t] * eps, t)
    x0_hat = predict_x0(state, FixedEpsModel(eps), C0, sched)
    np.testing.assert_allclose(x0_hat, x0, rtol=1e-10)


def test_predict_x0_single_point_collapses(sched, rng):
    """Test a one-point model always predicts its point"""
    y = rng.uniform(size=4)
    model = EmpiricalScoreModel({0: y[None, :]})
    state = DiffusionState(rng.standard_normal(4), 350)
    np.testing.assert_allclose(predict_x0(state, model, C0, sched), y, atol=1e-10)


def test_predict_x0_gaussian_posterior_mean(sched, rng):
    """Test the Gaussian model predicts its closed-form posterior mean"""
    model = SingleGaussianModel(np.array([0.3, 0.6]), np.array([0.02, 0.1]))
    state = DiffusionState(rng.standard_normal(2), 450)
    np.testing.assert_allclose(
        predict_x0(state, model, C0, sched),
        model.posterior_mean(state.x, 450, sched),
        rtol=1e-10,
    )


def test_predict_x0_needs_positive_t(sched):
    """Test predicting at t = 0 is a domain error"""
    with pytest.raises(DomainError):
        predict_x0(DiffusionState(np.zeros(2), 0), ZeroModel(2), C0, sched)


# =============================================================================
# DDIM
# =============================================================================


def test_ddim_step_zero_eps(sched, rng):
    """Test a zero predictor just rescales by the alpha ratio"""
    x = rng.standard_normal(4)
    out = ddim_step(DiffusionState(x, 600), 550, 0.0, ZeroModel(4), C0, sched)
    np.testing.assert_allclose(out.x, (sched.alpha[550] / sched.alpha[600]) * x, rtol=1e-12)
    assert out.t == 550


def test_ddim_step_rejects_upward(sched):
    """Test a sampling step must go down in t"""
    with pytest.raises(ParameterError):
        ddim_step(DiffusionState(np.zeros(2), 500), 500, 0.0, ZeroModel(2), C0, sched)


def test_ddim_step_rejects_bad_eta(sched):
    """Test eta outside [0, 1] is rejected"""
    with pytest.raises(ParameterError):
        ddim_step(DiffusionState(np.zeros(2), 500), 400, 1.5, ZeroModel(2), C0, sched)


def test_ddim_step_stochastic_needs_rng(sched):
    """Test eta > 0 without a generator is rejected"""
    with pytest.raises(ParameterError):
        ddim_step(DiffusionState(np.zeros(2), 500), 400, 0.5, ZeroModel(2), C0, sched)


def test_ddim_sigma_formula(sched):
    """Test the DDIM noise level formula and its eta = 0 case"""
    abar_t, abar_s = sched.alpha[600] ** 2, sched.alpha[500] ** 2
    expected = np.sqrt((1 - abar_s) / (1 - abar_t)) * np.sqrt(1 - abar_t / abar_s)
    assert ddim_sigma(600, 500, 1.0, sched) == pytest.approx(expected)
    assert ddim_sigma(600, 500, 0.0, sched) == 0.0


def test_ddim_step_eta_one_variance(sched):
    """Spread of x_s over seeds matches the injected DDIM noise level"""
    x = np.full(3, 0.4)
    eps = np.array([0.5, -0.2, 0.1])
    model = FixedEpsModel(eps)
    gen = np.random.default_rng(2)
    draws = np.stack(
        [ddim_step(DiffusionState(x, 600), 500, 1.0, model, C0, sched, gen).x for _ in range(10_000)]
    )
    level = ddim_sigma(600, 500, 1.0, sched)
    np.testing.assert_allclose(draws.var(axis=0), level**2, rtol=5e-2)


def test_single_point_sampling_contracts(sched, rng):
    """DDIM from pure noise with a one-point model lands on the point"""
    y = rng.uniform(size=6)
    model = EmpiricalScoreModel({0: y[None, :]})
    ladder = subsample_ladder(1000, 50)
    out = sample_to_zero(
        DiffusionState(rng.standard_normal(6), 1000), ladder, 0.0, model, C0, sched
    )
    np.testing.assert_allclose(out, y, atol=1e-3)


def test_sample_to_zero_nfe_count(sched, rng, ladder20):
    """Test sampling spends one NFE per ladder step below t"""
    model = EmpiricalScoreModel({0: rng.uniform(size=(3, 4))})
    sample_to_zero(DiffusionState(rng.standard_normal(4), 400), ladder20, 0.0, model, C0, sched)
    assert model.counter.count == len(ladder20.below(400)) == 8


def test_sample_to_zero_doubles_nfe_under_guidance(sched, rng, ladder20):
    """Test guidance doubles the sampling NFE"""
    model = EmpiricalScoreModel({0: rng.uniform(size=(3, 4))})
    sample_to_zero(
        DiffusionState(rng.standard_normal(4), 400), ladder20, 0.0, model, C0, sched, cfg_scale=3.0
    )
    assert model.counter.count == 16


def test_sample_to_zero_stochastic_finite(sched, rng, ladder20):
    """Test stochastic sampling stays finite and clamped"""
    model = EmpiricalScoreModel({0: rng.uniform(size=(3, 4))})
    out = sample_to_zero(
        DiffusionState(rng.standard_normal(4), 800), ladder20, 0.5, model, C0, sched, rng
    )
    assert np.all(np.isfinite(out))
    assert np.all((out >= 0.0) & (out <= 1.0))


def test_sample_to_zero_snaps_off_ladder(sched, rng, ladder20, caplog):
    """Test an off-ladder start is snapped with a warning"""
    model = EmpiricalScoreModel({0: rng.uniform(size=(2, 3))})
    with caplog.at_level("WARNING", logger="sirlab"):
        sample_to_zero(DiffusionState(rng.standard_normal(3), 410), ladder20, 0.0, model, C0, sched)
    assert "snapped to 400" in caplog.text
    assert model.counter.count == 8


# =============================================================================
# Inversion
# =============================================================================


def test_invert_step_zero_eps(sched, rng):
    """Test a zero predictor just rescales by the alpha ratio"""
    x = rng.standard_normal(4)
    out = ddim_invert_step(DiffusionState(x, 300), 350, ZeroModel(4), C0, sched)
    np.testing.assert_allclose(out.x, (sched.alpha[350] / sched.alpha[300]) * x, rtol=1e-12)


def test_invert_step_rejects_downward(sched):
    """Test an inversion step must go up in t"""
    with pytest.raises(ParameterError):
        ddim_invert_step(DiffusionState(np.zeros(2), 300), 300, ZeroModel(2), C0, sched)


def test_invert_step_single_point_stays_on_path(sched, rng):
    """One-point model: x_u = alpha_u y + sigma_u eps_hat with eps_hat fixed"""
    y = rng.uniform(size=3)
    model = EmpiricalScoreModel({0: y[None, :]})
    t = 200
    x_t = sched.alpha[t] * y + sched.sigma[t] * rng.standard_normal(3)
    eps_hat = (x_t - sched.alpha[t] * y) / sched.sigma[t]
    out = ddim_invert_step(DiffusionState(x_t, t), t + 1, model, C0, sched)
    np.testing.assert_allclose(
        out.x, sched.alpha[t + 1] * y + sched.sigma[t + 1] * eps_hat, atol=1e-12
    )


def test_invert_from_zero_evaluates_at_one(sched, rng):
    """The first inversion step from a clean x uses the predictor at t=1"""
    calls = []

    class Recording(ZeroModel):
        def eps(self, x_t, t, cond, sched):
            calls.append(t)
            return super().eps(x_t, t, cond, sched)

    ladder = subsample_ladder(1000, 10)
    ddim_invert(rng.uniform(size=3), 300, ladder, Recording(3), C0, sched)
    assert calls == [1, 100, 200]


def _round_trip_error(n_steps, sched):
    model = SingleGaussianModel(np.array([0.3, 0.5, 0.7, 0.4]), np.full(4, 0.05))
    x0 = np.array([0.35, 0.45, 0.65, 0.5])
    ladder = subsample_ladder(1000, n_steps)
    t2 = ladder.snap(600)
    state = ddim_invert(x0, t2, ladder, model, C0, sched)
    back = sample_to_zero(state, ladder, 0.0, model, C0, sched, clamp=False)
    return np.linalg.norm(back - x0) / np.linalg.norm(x0)


def test_inversion_round_trip_converges(sched):
    """Test invert-then-sample error shrinks on finer ladders"""
    errors = [_round_trip_error(n, sched) for n in (50, 100, 500)]
    assert errors[0] < 1e-2
    assert errors[0] > errors[1] > errors[2]


# =============================================================================
# Hybrid forward process
# =============================================================================


def test_hybrid_degenerate_is_noise_add(sched, ladder20, rng):
    """Test t1 equal to t2 is plain noise_add at no NFE"""
    x = rng.uniform(size=8)
    model = EmpiricalScoreModel({0: rng.uniform(size=(2, 8))})
    a = hybrid_forward(x, 500, 500, ladder20, model, C0, sched, np.random.default_rng(9))
    b = noise_add(x, 500, sched, np.random.default_rng(9))
    assert a.x.tobytes() == b.x.tobytes()
    assert a.t == b.t == 500
    assert model.counter.count == 0


def test_hybrid_nfe_counts_inversion_steps(sched, ladder20, rng):
    """Test the hybrid spends one NFE per inversion step"""
    model = EmpiricalScoreModel({0: rng.uniform(size=(2, 8))})
    out = hybrid_forward(rng.uniform(size=8), 300, 500, ladder20, model, C0, sched, rng)
    assert out.t == 500
    assert model.counter.count == count_inversion_steps(300, 500, ladder20) == 4


def test_hybrid_close_to_pure_inversion(sched, rng):
    """The hybrid and pure inversion states differ on the order of sigma_t1"""
    model = SingleGaussianModel(np.full(16, 0.5), np.full(16, 0.05))
    ladder = subsample_ladder(1000, 50)
    x = 0.5 + 0.1 * np.sin(np.linspace(0, np.pi, 16))
    hybrid = hybrid_forward(x, 100, 400, ladder, model, C0, sched, rng)
    pure = ddim_invert(x, 400, ladder, model, C0, sched)
    rms = np.linalg.norm(hybrid.x - pure.x) / np.sqrt(16)
    assert rms < 5.0 * sched.sigma[100]


@pytest.mark.parametrize(
    "t1,t2,expected",
    [(540, 550, "noise-only"), (20, 500, "inversion-only")],
)
def test_hybrid_warns_when_snapping_degenerates(sched, ladder20, caplog, t1, t2, expected):
    """Test a coarse ladder that collapses t1 onto t2 or 0 is logged"""
    model = EmpiricalScoreModel({0: np.full((1, 4), 0.5)})
    with caplog.at_level(logging.WARNING, logger="sirlab"):
        hybrid_forward(np.full(4, 0.5), t1, t2, ladder20, model, C0, sched, np.random.default_rng(0))
    assert expected in caplog.text


def test_hybrid_on_ladder_does_not_warn(sched, ladder20, caplog):
    """Test a proper hybrid pair logs nothing"""
    model = EmpiricalScoreModel({0: np.full((1, 4), 0.5)})
    with caplog.at_level(logging.WARNING, logger="sirlab"):
        hybrid_forward(np.full(4, 0.5), 300, 500, ladder20, model, C0, sched, np.random.default_rng(0))
    assert caplog.text == ""


@pytest.mark.parametrize("t1,t2", [(600, 500), (0, 500), (500, 1000)])
def test_hybrid_invalid_pairs(sched, ladder20, t1, t2):
    """Test pairs outside 0 < t1 <= t2 < T are rejected"""
    with pytest.raises(ParameterError):
        hybrid_forward(np.zeros(2), t1, t2, ladder20, ZeroModel(2), C0, sched, np.random.default_rng(0))


def test_hybrid_refine_fixed_point(sched, rng):
    """A dataset image survives forward-then-sample with a one-point model"""
    y = rng.uniform(0.2, 0.8, size=10)
    model = EmpiricalScoreModel({0: y[None, :]})
    ladder = subsample_ladder(1000, 20)
    state = hybrid_forward(y, 300, 500, ladder, model, C0, sched, rng)
    out = sample_to_zero(state, ladder, 0.0, model, C0, sched)
    np.testing.assert_allclose(out, y, atol=1e-3)


def test_forward_process_dispatch(sched, ladder20, rng):
    """Test noise-only costs no NFE and inversion one per step"""
    x = rng.uniform(size=4)
    model = EmpiricalScoreModel({0: rng.uniform(size=(2, 4))})
    noise = forward_process("noise_only", x, 300, 500, ladder20, model, C0, sched, np.random.default_rng(1))
    assert noise.t == 500 and model.counter.count == 0
    inv = forward_process(ForwardKind.INVERSION_ONLY, x, 300, 500, ladder20, model, C0, sched, rng)
    assert inv.t == 500 and model.counter.count == 10


def test_forward_kind_parse():
    """Test short and full forward process names parse"""
    assert ForwardKind.parse("noise") is ForwardKind.NOISE_ONLY
    assert ForwardKind.parse("inversion") is ForwardKind.INVERSION_ONLY
    assert ForwardKind.parse("hybrid") is ForwardKind.HYBRID
    assert ForwardKind.parse("noise_only") is ForwardKind.NOISE_ONLY
    with pytest.raises(ParameterError):
        ForwardKind.parse("sideways")
