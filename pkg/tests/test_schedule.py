"""Tests for noise schedules, timestep ladders and anneal plans"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirlab.errors import ParameterError
from sirlab.schedule import (
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


# =============================================================================
# make_vp_schedule
# =============================================================================


def test_schedule_endpoints(sched):
    """alpha[0]=1 and sigma[0]=0"""
    assert sched.alpha[0] == 1.0
    assert sched.sigma[0] == 0.0
    assert sched.T == 1000


def test_schedule_matches_direct_product(sched):
    """alpha[T]^2 is the product of all (1 - beta_s)"""
    betas = np.linspace(1e-4, 0.02, 1000)
    expected = 1.0
    for b in betas:
        expected *= 1.0 - b
    assert sched.alpha[1000] ** 2 == pytest.approx(expected, rel=1e-10)


def test_schedule_variance_preserving(sched):
    """alpha^2 + sigma^2 = 1 for every t"""
    assert np.max(np.abs(sched.alpha**2 + sched.sigma**2 - 1.0)) < 1e-12


def test_schedule_monotone(sched):
    """Test alpha falls and sigma rises with t"""
    assert np.all(np.diff(sched.alpha) < 0)
    assert np.all(np.diff(sched.sigma) > 0)


def test_schedule_tables_read_only(sched):
    """Test the schedule tables cannot be written"""
    with pytest.raises(ValueError):
        sched.alpha[3] = 0.0


@pytest.mark.parametrize(
    "T,beta_min,beta_max",
    [(0, 1e-4, 0.02), (100, 0.0, 0.02), (100, 0.03, 0.02), (100, 1e-4, 1.0)],
)
def test_schedule_invalid_parameters(T, beta_min, beta_max):
    """Test invalid step counts and beta ranges are rejected"""
    with pytest.raises(ParameterError):
        make_vp_schedule(T, beta_min, beta_max)


def test_schedule_dict_round_trip(sched):
    """Test a schedule survives its dict form"""
    again = NoiseSchedule.from_dict(sched.to_dict())
    assert again.T == sched.T
    np.testing.assert_array_equal(again.alpha, sched.alpha)


@settings(max_examples=30, deadline=None)
@given(
    T=st.integers(min_value=1, max_value=400),
    beta_min=st.floats(min_value=1e-6, max_value=0.01),
    spread=st.floats(min_value=0.0, max_value=0.5),
)
def test_schedule_invariants_property(T, beta_min, spread):
    """Every valid schedule starts at identity and preserves variance"""
    s = make_vp_schedule(T, beta_min, min(beta_min + spread, 0.9))
    assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0
    assert np.max(np.abs(s.alpha**2 + s.sigma**2 - 1.0)) < 1e-12


# =============================================================================
# Ladders
# =============================================================================


def test_full_ladder():
    """Test a ladder of size T holds every timestep"""
    assert subsample_ladder(10, 10).steps == tuple(range(11))


def test_ladder_20_steps(ladder20):
    """Test the 20-step ladder climbs by 50 from 0 to 1000"""
    assert len(ladder20) == 21
    assert ladder20.steps[0] == 0 and ladder20.top == 1000
    assert set(np.diff(ladder20.steps)) == {50}


def test_ladder_50_steps():
    """Test the 50-step ladder has 51 entries"""
    assert len(subsample_ladder(1000, 50)) == 51


@pytest.mark.parametrize("n", [0, 1001])
def test_ladder_size_out_of_range(n):
    """Test ladder sizes outside [1, T] are rejected"""
    with pytest.raises(ParameterError):
        subsample_ladder(1000, n)


def test_ladder_must_start_at_zero():
    """Test a ladder not starting at 0 is rejected"""
    with pytest.raises(ParameterError):
        TimestepLadder((1, 2, 3))


def test_ladder_must_increase():
    """Test a non-increasing ladder is rejected"""
    with pytest.raises(ParameterError):
        TimestepLadder((0, 5, 5))


def test_ladder_snap_between_and_below(ladder20):
    """Test snapping and the inversion and sampling paths"""
    assert ladder20.snap(480) == 500
    assert ladder20.snap(525) == 500  # tie resolves low
    assert ladder20.between(300, 500) == [350, 400, 450, 500]
    assert ladder20.below(200) == [150, 100, 50, 0]


@settings(max_examples=40, deadline=None)
@given(T=st.integers(min_value=1, max_value=2000), data=st.data())
def test_ladder_property(T, data):
    """Ladders are strictly increasing from 0 to T with n+1 entries"""
    n = data.draw(st.integers(min_value=1, max_value=T))
    ladder = subsample_ladder(T, n)
    assert len(ladder) == n + 1
    assert ladder.steps[0] == 0 and ladder.top == T
    assert all(b > a for a, b in zip(ladder.steps, ladder.steps[1:]))


# =============================================================================
# Anneal plans
# =============================================================================


def test_linear_t2_endpoints():
    """Test the linear plan runs from the upper to the lower bound"""
    plan = AnnealPlan()
    assert t2_at(0, 30, plan, 1000) == 800
    assert t2_at(29, 30, plan, 1000) == 200


def test_linear_t2_constant_plan():
    """Test equal bounds give a constant t2"""
    plan = AnnealPlan(t2_start=0.5, t2_end=0.5)
    assert {t2_at(k, 10, plan, 1000) for k in range(10)} == {500}


def test_linear_t2_non_increasing():
    """Test the linear plan never rises"""
    plan = AnnealPlan()
    values = [t2_at(k, 20, plan, 1000) for k in range(20)]
    assert values == sorted(values, reverse=True)


def test_square_t2_descends_by_default():
    """Test the square plan descends from the upper bound"""
    plan = AnnealPlan(kind=AnnealKind.SQUARE, t2_start=0.9, t2_end=0.2)
    values = [t2_at(k, 10, plan, 1000) for k in range(10)]
    assert values[0] == 900
    assert values == sorted(values, reverse=True)


def test_square_t2_literal_ascends():
    """Test the literal square plan ascends from the lower bound"""
    plan = AnnealPlan(kind=AnnealKind.SQUARE, t2_start=0.9, t2_end=0.2, literal_square=True)
    values = [t2_at(k, 10, plan, 1000) for k in range(10)]
    assert values[0] == 200
    assert values == sorted(values)


def test_random_t2_needs_generator():
    """Test the random plan needs a generator"""
    plan = AnnealPlan(kind=AnnealKind.RANDOM)
    with pytest.raises(ParameterError):
        t2_at(0, 5, plan, 1000)


def test_random_t2_in_range_and_seeded():
    """Test random t2 stays in bounds and repeats per seed"""
    plan = AnnealPlan(kind=AnnealKind.RANDOM)
    a = [t2_at(k, 10, plan, 1000, np.random.default_rng(7)) for k in range(10)]
    b = [t2_at(k, 10, plan, 1000, np.random.default_rng(7)) for k in range(10)]
    assert a == b
    assert all(200 <= t <= 800 for t in a)


def test_t2_snaps_to_ladder(ladder20):
    """Test planned t2 lands on the ladder"""
    plan = AnnealPlan()
    for k in range(7):
        assert t2_at(k, 7, plan, 1000, ladder=ladder20) in ladder20


def test_t2_iteration_out_of_range():
    """Test iterations past K are rejected"""
    with pytest.raises(ParameterError):
        t2_at(5, 5, AnnealPlan(), 1000)


def test_anneal_plan_invalid():
    """Test out-of-range anneal bounds are rejected"""
    with pytest.raises(ParameterError):
        AnnealPlan(t2_start=0.2, t2_end=0.8)
    with pytest.raises(ParameterError):
        AnnealPlan(ratio=0.0)


def test_anneal_plan_dict_round_trip():
    """Test an anneal plan survives its camelCase dict"""
    plan = AnnealPlan(kind="square", t2_start=0.9, t1_rule="square_over_T")
    again = AnnealPlan.from_dict(plan.to_dict())
    assert again == plan
    assert plan.to_dict()["t1Rule"] == "square_over_T"


def test_anneal_plan_unknown_key():
    """Test unknown anneal keys are rejected"""
    with pytest.raises(ParameterError, match="Unknown anneal keys"):
        AnnealPlan.from_dict({"kind": "linear", "bogus": 1})


# =============================================================================
# t1 rules
# =============================================================================


def test_t1_ratio():
    """Test the ratio rule scales t2"""
    assert t1_from_t2(500, AnnealPlan(ratio=0.6), 1000) == 300


def test_t1_square_over_t():
    """Test the square rule gives t2 squared over T"""
    plan = AnnealPlan(t1_rule=T1Rule.SQUARE_OVER_T)
    assert t1_from_t2(500, plan, 1000) == 250
    assert t1_from_t2(999, plan, 1000) == 998


def test_t1_out_of_range():
    """Test t2 outside the schedule is rejected"""
    with pytest.raises(ParameterError):
        t1_from_t2(1000, AnnealPlan(), 1000)


@settings(max_examples=60, deadline=None)
@given(
    t2=st.integers(min_value=1, max_value=999),
    rule=st.sampled_from(list(T1Rule)),
    ratio=st.floats(min_value=0.01, max_value=1.0),
)
def test_t1_bounds_property(t2, rule, ratio):
    """1 <= t1 <= t2 for every rule"""
    t1 = t1_from_t2(t2, AnnealPlan(t1_rule=rule, ratio=ratio), 1000)
    assert 1 <= t1 <= t2
