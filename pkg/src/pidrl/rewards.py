"""Stage costs for training and the step-response scorecard."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .pid import PidGains

REWARD_KINDS = ("power_penalty", "hybrid", "hybrid_penalty", "abs_penalty", "square_penalty")


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "abs_penalty"
    lam: float = 0.1
    p: int = 1
    q: int = 2

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("penalty weight must be >= 0")
        if self.p not in (1, 2) or self.q not in (1, 2):
            raise ValueError("p and q must be 1 or 2")


# Named reward variants used on the command line.
REWARD_PRESETS = {
    "eq17": RewardSpec("abs_penalty", 0.1),
    "eq12": RewardSpec("hybrid", 0.0),
    "eqB1": RewardSpec("square_penalty", 0.1),
    "eqB2": RewardSpec("hybrid_penalty", 0.1),
}


def hybrid(e):
    """|e| near the origin, (e^2 + 1)/2 outside the unit band."""
    a = np.abs(e)
    return np.where(a < 1.0, a, 0.5 * (np.square(e) + 1.0))


def cost(spec: RewardSpec, e_t, du_t):
    """Non-negative stage cost; the reward is its negative.  Broadcasts over arrays."""
    e_t = np.asarray(e_t, dtype=float)
    du_t = np.asarray(du_t, dtype=float)
    if spec.kind == "power_penalty":
        c = np.abs(e_t) ** spec.p + spec.lam * np.abs(du_t) ** spec.q
    elif spec.kind == "abs_penalty":
        c = np.abs(e_t) + spec.lam * np.square(du_t)
    elif spec.kind == "square_penalty":
        c = np.square(e_t) + spec.lam * np.square(du_t)
    elif spec.kind == "hybrid":
        c = hybrid(e_t)
    else:
        c = hybrid(e_t) + spec.lam * np.square(du_t)
    return float(c) if c.ndim == 0 else c


def reward(spec: RewardSpec, e_t, du_t):
    return -cost(spec, e_t, du_t)


def lambda_from_du_max(du_max: float) -> float:
    """Normalising penalty weight 1/|du|_max for the input-change term."""
    if not du_max > 0:
        raise ValueError("du_max must be positive")
    return 1.0 / du_max


@dataclass
class MetricsReport:
    iae: float
    ise: float
    tv: float
    tv_u: float
    percent_os: float
    settling_time: float
    epsilon: float
    settled: bool = True
    ms: float = math.nan

    METRICS = ("iae", "ise", "tv", "tv_u", "percent_os", "settling_time")

    def as_dict(self) -> dict:
        return asdict(self)


def step_metrics(
    times,
    y,
    u,
    setpoint_before: float,
    setpoint_after: float,
    epsilon: float | None = None,
    u_before: float | None = None,
    normalized: bool = True,
    tv_on: str = "error",
) -> MetricsReport:
    """Scorecard for one step change.

    ``times``/``y``/``u`` start at the first sample taken with the new
    setpoint.  Normalised IAE/ISE/TV use ``e / |dsp|``; ``tv_u`` divides by the
    first input move (``u[0] - u_before``, or ``u[1] - u[0]`` when
    ``u_before`` is not given) and is NaN when that move is zero.  ``tv_on``
    selects total variation of the error (default) or of the raw output.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if len(t) < 2:
        raise ValueError("need at least two samples")
    dts = np.diff(t)
    dt = dts[0]
    if not np.allclose(dts, dt, rtol=1e-9, atol=1e-12):
        raise ValueError("samples must be uniformly spaced")
    dsp = setpoint_after - setpoint_before
    if normalized and dsp == 0:
        raise ValueError("normalised metrics need a non-zero setpoint change")
    scale = abs(dsp) if normalized else 1.0
    if epsilon is None:
        epsilon = 0.02 * abs(dsp)

    e = setpoint_after - y
    en = e / scale
    iae = float(np.sum(np.abs(en)) * dt)
    ise = float(np.sum(en * en) * dt)
    if tv_on == "error":
        tv = float(np.sum(np.abs(np.diff(en))))
    elif tv_on == "output":
        tv = float(np.sum(np.abs(np.diff(y))))
    else:
        raise ValueError("tv_on must be 'error' or 'output'")

    du0 = (u[0] - u_before) if u_before is not None else (u[1] - u[0])
    tv_u_raw = float(np.sum(np.abs(np.diff(u))))
    if u_before is not None:
        tv_u_raw += abs(u[0] - u_before)
    if normalized:
        tv_u = tv_u_raw / abs(du0) if du0 != 0 else math.nan
    else:
        tv_u = tv_u_raw

    crossed = e[0] * e < 0
    os_ = float(np.max(np.abs(e[crossed]))) if crossed.any() else 0.0
    percent_os = os_ * 100.0 / abs(dsp) if dsp != 0 else math.nan

    outside = np.flatnonzero(np.abs(e) > epsilon)
    settled = True
    if len(outside) == 0:
        st = 0.0
    elif outside[-1] == len(e) - 1:
        settled = False
        st = float(t[-1] - t[0] + dt)
    else:
        st = float(t[outside[-1] + 1] - t[0])
    return MetricsReport(iae, ise, tv, tv_u, percent_os, st, float(epsilon), settled)


def summarize(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation of each metric over ``reports``."""
    out = {}
    for name in MetricsReport.METRICS + ("ms",):
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        if len(vals) == 0:
            out[name] = (math.nan, math.nan)
        else:
            out[name] = (float(np.mean(vals)), float(np.std(vals)))
    return out


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    """Average of per-step reports (the scorecard's per-experiment row)."""
    if not reports:
        raise ValueError("no reports to average")
    vals = {f.name: float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(MetricsReport)
            if f.name not in ("settled",)}
    vals["settled"] = all(r.settled for r in reports)
    return MetricsReport(**vals)


def pid_frequency_response(gains: PidGains, omega, t_filter: float = 0.1) -> np.ndarray:
    s = 1j * np.asarray(omega, dtype=float)
    return gains.k_p + gains.k_i / s + gains.k_d * s / (t_filter * s + 1.0)


def max_sensitivity(gains: PidGains, model, omega_grid=None, t_filter: float = 0.1, max_refine: int = 4) -> float:
    """Peak of |1 / (1 + C G)| over frequency.

    The grid is refined (doubled) while neighbouring samples differ by more
    than 5 %; a warning is issued if that persists.
    """
    if omega_grid is None:
        omega_grid = np.logspace(-4, 2, 4000)
    w = np.asarray(omega_grid, dtype=float)
    if not model.tau1 > 0:
        raise ValueError("model must be stable")
    for _ in range(max_refine + 1):
        s_mag = np.abs(1.0 / (1.0 + pid_frequency_response(gains, w, t_filter) * model.frequency_response(w)))
        rel = np.abs(np.diff(s_mag)) / np.maximum(s_mag[:-1], 1e-300)
        if rel.max() <= 0.05:
            return float(s_mag.max())
        w = np.logspace(np.log10(w[0]), np.log10(w[-1]), 2 * len(w))
    warnings.warn("sensitivity grid still coarse after refinement", RuntimeWarning)
    return float(s_mag.max())
