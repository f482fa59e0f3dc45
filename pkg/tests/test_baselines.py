import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from pidrl.baselines import (
    REFERENCE_MODEL,
    SIMC_TC_GRID,
    FopdtModel,
    NotSettledError,
    fit_fopdt,
    simc_grid,
    simc_pi,
)


def synthetic(model, du=1.0, t_step=20.0, horizon=None, y0=60.0):
    horizon = horizon or t_step + model.theta_d + 12 * model.tau1
    t = np.arange(0.0, horizon, 1.0)
    u = np.where(t >= t_step, 40.0 + du, 40.0)
    y = y0 + model.step_response(t, du, t_step)
    return t, u, y


def assert_close(model, ref, rel=0.02, theta_abs=0.0):
    assert model.k == pytest.approx(ref.k, rel=rel)
    assert model.tau1 == pytest.approx(ref.tau1, rel=rel)
    assert model.theta_d == pytest.approx(ref.theta_d, rel=rel, abs=theta_abs)


def test_recovers_reference_model():
    assert_close(fit_fopdt(*synthetic(REFERENCE_MODEL)), REFERENCE_MODEL)


@settings(max_examples=20, deadline=None)
@given(st.floats(1, 10), st.floats(50, 500), st.floats(0, 30))
def test_two_point_fit_is_identity_on_fopdt(k, tau1, theta):
    ref = FopdtModel(k, tau1, theta)
    # one-sample quantisation of the crossing times dominates for tiny delays
    assert_close(fit_fopdt(*synthetic(ref)), ref, theta_abs=0.5)


def test_first_order_data_has_no_dead_time():
    m = fit_fopdt(*synthetic(FopdtModel(2.0, 120.0, 0.0)))
    assert m.theta_d <= 2.0


def test_step_size_does_not_change_model():
    a = fit_fopdt(*synthetic(REFERENCE_MODEL, du=1.0))
    b = fit_fopdt(*synthetic(REFERENCE_MODEL, du=2.0))
    assert (a.k, a.tau1, a.theta_d) == pytest.approx((b.k, b.tau1, b.theta_d), abs=1e-6)


def test_downward_step():
    assert_close(fit_fopdt(*synthetic(REFERENCE_MODEL, du=-1.5)), REFERENCE_MODEL)


def test_refine_option():
    m = fit_fopdt(*synthetic(REFERENCE_MODEL), refine=True)
    assert_close(m, REFERENCE_MODEL, rel=1e-3)


def test_truncated_response_not_settled():
    t, u, y = synthetic(REFERENCE_MODEL, horizon=400.0)
    with pytest.raises(NotSettledError, match="response not settled"):
        fit_fopdt(t, u, y)


def test_no_step_rejected():
    with pytest.raises(ValueError):
        fit_fopdt([0, 1, 2], [1, 1, 1], [0, 0, 0])


def test_model_invariants():
    with pytest.raises(ValueError):
        FopdtModel(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        FopdtModel(1.0, 1.0, -1.0)


def test_simc_fixture():
    g = simc_pi(REFERENCE_MODEL, 20.0)
    assert g.k_p == pytest.approx(2.998, abs=1e-3)
    assert g.k_i == pytest.approx(0.02566, abs=1e-4)
    assert g.k_p / g.k_i == pytest.approx(4 * (20.0 + 9.21))
    assert g.k_d == 0.0


def test_simc_integral_time_capped_by_time_constant():
    g = simc_pi(REFERENCE_MODEL, 100.0)
    assert g.k_p / g.k_i == pytest.approx(REFERENCE_MODEL.tau1)


def test_simc_grid_monotone():
    grid = simc_grid(REFERENCE_MODEL)
    assert tuple(grid) == SIMC_TC_GRID
    kps = [grid[tc].k_p for tc in SIMC_TC_GRID]
    assert all(a > b for a, b in zip(kps, kps[1:]))


@given(st.floats(0.1, 200), st.floats(0.1, 200))
def test_simc_strictly_decreasing(a, b):
    lo, hi = sorted((a, b))
    # Tc values one ulp apart collapse once theta is added
    assume(hi - lo > 1e-9 * hi)
    assert simc_pi(REFERENCE_MODEL, lo).k_p > simc_pi(REFERENCE_MODEL, hi).k_p


def test_simc_rejects_non_positive_tc():
    with pytest.raises(ValueError):
        simc_pi(REFERENCE_MODEL, 0.0)
