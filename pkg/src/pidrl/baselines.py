"""FOPDT identification from a step response and SIMC PI tuning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pid import PidGains


class NotSettledError(ValueError):
    pass


@dataclass(frozen=True)
class FopdtModel:
    k: float
    tau1: float
    theta_d: float

    def __post_init__(self):
        if not self.tau1 > 0:
            raise ValueError("tau1 must be positive")
        if self.theta_d < 0:
            raise ValueError("theta_d must be non-negative")

    def step_response(self, t, du: float = 1.0, t_step: float = 0.0) -> np.ndarray:
        """Deviation response to a step of size ``du`` applied at ``t_step``."""
        t = np.asarray(t, dtype=float)
        s = np.clip(t - t_step - self.theta_d, 0.0, None)
        return self.k * du * (1.0 - np.exp(-s / self.tau1))

    def frequency_response(self, omega) -> np.ndarray:
        s = 1j * np.asarray(omega, dtype=float)
        return self.k * np.exp(-self.theta_d * s) / (self.tau1 * s + 1.0)


# Closed-loop time constants evaluated for the SIMC baselines; the first equals the dead time.
SIMC_TC_GRID = (9.21, 15.0, 20.0, 25.0, 30.0)

REFERENCE_MODEL = FopdtModel(k=3.44, tau1=301.19, theta_d=9.21)

# the "28.3 %" and "63.2 %" points, unrounded, so an exact FOPDT response is fitted exactly
F28 = 1.0 - np.exp(-1.0 / 3.0)
F63 = 1.0 - np.exp(-1.0)


def _crossing_time(t: np.ndarray, frac: np.ndarray, level: float) -> float:
    idx = int(np.argmax(frac >= level))
    if frac[idx] < level:
        raise NotSettledError("response never reaches the identification points")
    if idx == 0:
        return float(t[0])
    f0, f1 = frac[idx - 1], frac[idx]
    return float(t[idx - 1] + (level - f0) / (f1 - f0) * (t[idx] - t[idx - 1]))


def fit_fopdt(times, u, y, refine: bool = False) -> FopdtModel:
    """Two-point (28.3 % / 63.2 %) fit of a single step in ``u``.

    Pre- and post-step plateaus are read from the first sample and the final
    10 % of samples.  ``refine`` polishes the two-point estimate by least
    squares on the full record.
    """
    t = np.asarray(times, dtype=float)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    jumps = np.flatnonzero(np.abs(np.diff(u)) > 1e-12)
    if len(jumps) == 0:
        raise ValueError("no step in the input signal")
    i_step = int(jumps[0]) + 1
    t_step = t[i_step]
    du = u[-1] - u[0]
    if du == 0:
        raise ValueError("input returns to its initial value; fit one step at a time")
    y0 = y[:i_step].mean()
    tail = y[-max(int(0.1 * len(y)), 2):]
    dy = tail.mean() - y0
    if dy == 0 or np.ptp(tail) > 0.01 * abs(dy):
        raise NotSettledError("response not settled")
    frac = (y[i_step:] - y0) / dy
    tt = t[i_step:] - t_step
    t28 = _crossing_time(tt, frac, F28)
    t63 = _crossing_time(tt, frac, F63)
    tau1 = 1.5 * (t63 - t28)
    theta = max(t63 - tau1, 0.0)
    model = FopdtModel(k=dy / du, tau1=tau1, theta_d=theta)
    if refine:
        model = _refine(model, tt, y[i_step:] - y0, du)
    return model


def _refine(model: FopdtModel, tt, dy, du) -> FopdtModel:
    from scipy.optimize import least_squares

    def resid(x):
        k, tau1, theta = x
        s = np.clip(tt - theta, 0.0, None)
        return k * du * (1.0 - np.exp(-s / tau1)) - dy

    sol = least_squares(
        resid, [model.k, model.tau1, model.theta_d], bounds=([-np.inf, 1e-6, 0.0], [np.inf, np.inf, np.inf])
    )
    k, tau1, theta = sol.x
    return FopdtModel(float(k), float(tau1), float(theta))


def simc_pi(model: FopdtModel, tc: float, k_tau: float = 0.5) -> PidGains:
    """Skogestad's first-order PI rule: k_p = tau1/(k (tc + theta)), T_i = min(tau1, 4 (tc + theta))."""
    if not tc > 0:
        raise ValueError("tc must be positive")
    k_p = model.tau1 / (model.k * (tc + model.theta_d))
    t_i = min(model.tau1, 4.0 * (tc + model.theta_d))
    return PidGains(k_p, k_p / t_i, 0.0, k_tau)


def simc_grid(model: FopdtModel, tcs=SIMC_TC_GRID) -> dict[float, PidGains]:
    return {tc: simc_pi(model, tc) for tc in tcs}
