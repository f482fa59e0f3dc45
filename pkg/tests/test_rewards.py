import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidrl.baselines import REFERENCE_MODEL, FopdtModel, simc_pi
from pidrl.pid import PidGains
from pidrl.rewards import (
    REWARD_PRESETS,
    MetricsReport,
    RewardSpec,
    cost,
    hybrid,
    lambda_from_du_max,
    max_sensitivity,
    mean_report,
    reward,
    step_metrics,
    summarize,
)

finite = st.floats(-1e3, 1e3)
specs = st.sampled_from(list(REWARD_PRESETS.values()) + [RewardSpec("power_penalty", 0.3, 2, 1)])


# -- costs -------------------------------------------------------------------


@given(specs)
def test_zero_error_zero_move_costs_nothing(spec):
    assert cost(spec, 0.0, 0.0) == 0.0


def test_preset_arithmetic():
    assert cost(REWARD_PRESETS["eq17"], 2.0, 1.0) == pytest.approx(2.1)
    assert cost(REWARD_PRESETS["eq12"], 2.0, 5.0) == 2.5
    assert cost(REWARD_PRESETS["eqB1"], 2.0, 1.0) == pytest.approx(4.1)
    assert cost(REWARD_PRESETS["eqB2"], 0.5, 1.0) == pytest.approx(0.6)
    assert reward(REWARD_PRESETS["eq17"], -2.0, 1.0) == pytest.approx(-2.1)


def test_hybrid_joins_smoothly_at_unit_error():
    assert hybrid(1.0) == 1.0
    h = 1e-7
    left = (hybrid(1.0) - hybrid(1.0 - h)) / h
    right = (hybrid(1.0 + h) - hybrid(1.0)) / h
    assert left == pytest.approx(1.0, abs=1e-6)
    assert right == pytest.approx(1.0, abs=1e-6)


@given(st.floats(0.5, 1.5))
def test_hybrid_continuous(e):
    assert abs(hybrid(e + 1e-9) - hybrid(e)) < 1e-8


@given(specs, finite, finite)
def test_cost_non_negative(spec, e, du):
    assert cost(spec, e, du) >= 0.0


visible = st.one_of(st.just(0.0), st.floats(1e-6, 1e3), st.floats(-1e3, -1e-6))


@given(specs, visible, visible)
def test_cost_zero_only_at_rest(spec, e, du):
    at_rest = e == 0 and (spec.lam == 0 or du == 0)
    assert (cost(spec, e, du) == 0) == at_rest


def test_cost_broadcasts():
    c = cost(REWARD_PRESETS["eq17"], np.array([0.0, 1.0, -2.0]), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(c, [0.1, 1.0, 2.0])


def test_reward_spec_validation():
    with pytest.raises(ValueError):
        RewardSpec("huber")
    with pytest.raises(ValueError):
        RewardSpec(lam=-1.0)
    with pytest.raises(ValueError):
        RewardSpec("power_penalty", p=3)


def test_lambda_heuristic():
    assert lambda_from_du_max(4.0) == 0.25
    with pytest.raises(ValueError):
        lambda_from_du_max(0.0)


# -- step metrics ------------------------------------------------------------


def brute_force(t, y, u, sp0, sp1, eps, u_before):
    dt = t[1] - t[0]
    scale = abs(sp1 - sp0)
    iae = ise = tv = 0.0
    for k in range(len(y)):
        e = (sp1 - y[k]) / scale
        iae += abs(e) * dt
        ise += e * e * dt
        if k:
            tv += abs(e - (sp1 - y[k - 1]) / scale)
    moves = [abs(u[0] - u_before)] + [abs(u[k] - u[k - 1]) for k in range(1, len(u))]
    tv_u = sum(moves) / abs(u[0] - u_before)
    e0 = sp1 - y[0]
    os_ = 0.0
    for k in range(len(y)):
        e = sp1 - y[k]
        if e0 * e < 0:
            os_ = max(os_, abs(e))
    st_ = 0.0
    for k in range(len(y)):
        if all(abs(sp1 - y[j]) <= eps for j in range(k, len(y))):
            st_ = t[k] - t[0]
            break
    else:
        st_ = t[-1] - t[0] + dt
    return iae, ise, tv, tv_u, os_ * 100 / scale, st_


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    t = 3.0 + 0.5 * np.arange(100)
    sp0, sp1 = 60.0, 60.0 + rng.choice([-5.0, -3.0, 3.0, 5.0])
    y = sp1 + (sp0 - sp1) * np.exp(-0.05 * np.arange(100)) + rng.normal(0, 0.3, 100)
    u = 30.0 + rng.normal(0, 2.0, 100)
    u_before = 25.0
    eps = rng.uniform(0.05, 1.0)
    rep = step_metrics(t, y, u, sp0, sp1, eps, u_before=u_before)
    expected = brute_force(t, y, u, sp0, sp1, eps, u_before)
    got = (rep.iae, rep.ise, rep.tv, rep.tv_u, rep.percent_os, rep.settling_time)
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def geometric(T=30):
    t = np.arange(T, dtype=float)
    e = 5.0 * 0.5**t
    return t, 60.0 - e


def test_geometric_settling_time():
    t, y = geometric()
    rep = step_metrics(t, y, np.zeros_like(t), 55.0, 60.0, epsilon=0.1, normalized=False)
    assert rep.settling_time == 6.0
    assert rep.settled


@pytest.mark.parametrize("T", [2, 5, 30])
def test_geometric_iae(T):
    t, y = geometric(T)
    rep = step_metrics(t, y, np.zeros_like(t), 55.0, 60.0, epsilon=0.1, normalized=False)
    assert rep.iae == pytest.approx(10.0 * (1 - 0.5**T), abs=1e-12)


def test_monotone_rise_has_no_overshoot():
    t = np.arange(50.0)
    y = 65.0 - 5.0 * np.exp(-t / 8.0)
    y[0] = 60.0
    y[-1] = 65.0
    rep = step_metrics(t, y, np.ones(50), 60.0, 65.0, normalized=False, tv_on="output")
    assert rep.percent_os == 0.0
    assert rep.tv == pytest.approx(5.0)


def test_two_unit_overshoot_is_forty_percent():
    y = np.array([60.0, 63.0, 67.0, 66.0, 65.0])
    rep = step_metrics(np.arange(5.0), y, np.arange(5.0), 60.0, 65.0)
    assert rep.percent_os == pytest.approx(40.0)


def test_unsettled_flag():
    t = np.arange(10.0)
    rep = step_metrics(t, np.full(10, 60.0), np.arange(10.0), 60.0, 65.0)
    assert not rep.settled
    assert rep.settling_time == 10.0


def test_zero_setpoint_change_rejected():
    with pytest.raises(ValueError):
        step_metrics([0, 1], [60, 60], [0, 1], 60.0, 60.0)


def test_zero_initial_move_leaves_tv_u_undefined():
    rep = step_metrics([0, 1, 2], [60, 61, 62], [3.0, 3.0, 4.0], 60.0, 65.0)
    assert math.isnan(rep.tv_u)


def test_non_uniform_sampling_rejected():
    with pytest.raises(ValueError):
        step_metrics([0, 1, 3], [60, 61, 62], [0, 1, 2], 60.0, 65.0)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_tv_additive_over_concatenation(a, b):
    def tv(y):
        y = np.asarray(y, dtype=float)
        return step_metrics(np.arange(len(y), dtype=float), y, np.arange(len(y), dtype=float), 0.0, 1.0,
                            normalized=False, tv_on="output").tv

    b = [a[-1]] + b
    assert tv(a + b[1:]) == pytest.approx(tv(a) + tv(b), abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0), st.floats(0.01, 2.0))
def test_settling_time_monotone_in_band(seed, e1, e2):
    rng = np.random.default_rng(seed)
    y = 65.0 - 5.0 * np.exp(-0.1 * np.arange(60)) * np.cos(0.3 * np.arange(60)) + rng.normal(0, 0.1, 60)
    t = np.arange(60.0)
    lo, hi = sorted((e1, e2))
    st_lo = step_metrics(t, y, t, 60.0, 65.0, epsilon=lo).settling_time
    st_hi = step_metrics(t, y, t, 60.0, 65.0, epsilon=hi).settling_time
    assert st_hi <= st_lo


def test_summaries():
    a = MetricsReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.1)
    b = MetricsReport(3.0, 2.0, 1.0, 4.0, 5.0, 8.0, 0.1, settled=False)
    s = summarize([a, b])
    assert s["iae"] == (2.0, 1.0)
    assert s["ise"] == (2.0, 0.0)
    m = mean_report([a, b])
    assert m.settling_time == 7.0 and not m.settled
    with pytest.raises(ValueError):
        mean_report([])


# -- sensitivity -------------------------------------------------------------


def test_zero_controller_sensitivity_is_one():
    assert max_sensitivity(PidGains(0, 0, 0, 0), REFERENCE_MODEL) == pytest.approx(1.0, abs=1e-12)


def test_vanishing_gain_sensitivity_tends_to_one():
    assert max_sensitivity(PidGains(1e-6, 0, 0, 0), REFERENCE_MODEL) == pytest.approx(1.0, abs=1e-5)


def test_simc_sensitivity_fixture():
    ms = max_sensitivity(simc_pi(REFERENCE_MODEL, 20.0), REFERENCE_MODEL)
    assert ms == pytest.approx(1.34822, abs=1e-4)


def test_unstable_model_rejected():
    model = FopdtModel(1.0, 1.0, 0.0)
    object.__setattr__(model, "tau1", -1.0)
    with pytest.raises(ValueError):
        max_sensitivity(PidGains(1, 0, 0), model)


def test_coarse_grid_refined_or_warned():
    g = simc_pi(REFERENCE_MODEL, 20.0)
    with pytest.warns(RuntimeWarning):
        max_sensitivity(g, REFERENCE_MODEL, omega_grid=np.logspace(-4, 2, 5), max_refine=0)
    ms = max_sensitivity(g, REFERENCE_MODEL, omega_grid=np.logspace(-4, 2, 250))
    assert ms == pytest.approx(1.34822, abs=1e-3)
