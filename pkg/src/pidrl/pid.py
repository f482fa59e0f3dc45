"""Incremental (velocity-form) PID with a filtered derivative on the output.

The control law is affine in the four gains::

    u_hat = k_p * d_e + k_i * i_e + k_d * neg_d2y + k_tau * aw + u_prev

where the bracketed signals form the :class:`Observation` seen by the
learning agent.  ``u_hat`` is then clipped to the admissible range.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class PidGains:
    k_p: float
    k_i: float
    k_d: float
    k_tau: float = 0.5

    def __post_init__(self):
        if min(self.k_p, self.k_i, self.k_d) < 0:
            raise ValueError(f"PID gains must be non-negative: {self}")
        if not 0.0 <= self.k_tau <= 1.0:
            raise ValueError(f"k_tau must lie in [0, 1], got {self.k_tau}")

    def as_array(self) -> np.ndarray:
        return np.array([self.k_p, self.k_i, self.k_d, self.k_tau])

    @classmethod
    def from_array(cls, values) -> "PidGains":
        k_p, k_i, k_d, k_tau = (float(v) for v in values)
        return cls(k_p, k_i, k_d, k_tau)


def init_from_kp(k_p: float, k_tau: float = 0.5) -> PidGains:
    """Initial tuning used by the training experiments: k_i = k_p/60, k_d = 0.01 k_p."""
    return PidGains(k_p, k_p / 60.0, 0.01 * k_p, k_tau)


@dataclass(frozen=True)
class Observation:
    d_e: float
    i_e: float
    neg_d2y: float
    aw: float
    u_prev: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_e, self.i_e, self.neg_d2y, self.aw, self.u_prev])


@dataclass(frozen=True)
class PidState:
    """Controller memory between samples.

    ``initialized`` is False right after a cold reset; the first sample then
    seeds the output/error history and contributes no difference terms.
    """

    dt: float
    T_f: float = 0.1
    e_prev: float = 0.0
    dy_f_prev: float = 0.0
    y_prev: float = 0.0
    u_prev: float = 0.0
    u_hat_prev: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.T_f <= 1.0:
            raise ValueError("T_f must lie in [0, 1]")


def cold_state(dt: float, u0: float, T_f: float = 0.1) -> PidState:
    return PidState(dt=dt, T_f=T_f, u_prev=u0, u_hat_prev=u0)


def seeded_state(
    dt: float, u0: float, y0: float, setpoint0: float, T_f: float = 0.1, u_hat0: float | None = None
) -> PidState:
    """Bumpless reset from a known sample (typically steady state before a step)."""
    return PidState(
        dt=dt,
        T_f=T_f,
        e_prev=setpoint0 - y0,
        dy_f_prev=0.0,
        y_prev=y0,
        u_prev=u0,
        u_hat_prev=u0 if u_hat0 is None else u_hat0,
        initialized=True,
    )


def filtered_second_difference(state: PidState, y_t: float) -> tuple[float, float]:
    """Return ``(-d2y_f, dy_f)`` for the new sample ``y_t``."""
    if not state.initialized:
        return 0.0, 0.0
    dy_f = state.T_f * state.dy_f_prev + (1.0 - state.T_f) * (y_t - state.y_prev) / state.dt
    d2y_f = (dy_f - state.dy_f_prev) / state.dt
    return -d2y_f, dy_f


def compute_observation(state: PidState, setpoint: float, y_t: float) -> Observation:
    e = setpoint - y_t
    i_e = state.dt * e
    if not state.initialized:
        return Observation(0.0, i_e, 0.0, 0.0, state.u_prev)
    neg_d2y, _ = filtered_second_difference(state, y_t)
    aw = state.dt * (state.u_hat_prev - state.u_prev)
    return Observation(e - state.e_prev, i_e, neg_d2y, aw, state.u_prev)


def advance_measurement(state: PidState, setpoint: float, y_t: float) -> PidState:
    """Shift the error/output memories after ``y_t`` has been observed."""
    _, dy_f = filtered_second_difference(state, y_t)
    return replace(state, e_prev=setpoint - y_t, y_prev=y_t, dy_f_prev=dy_f, initialized=True)


def control_increment(gains: PidGains, obs: Observation) -> float:
    return gains.k_p * obs.d_e + gains.k_i * obs.i_e + gains.k_d * obs.neg_d2y + gains.k_tau * obs.aw


def pid_step(
    gains: PidGains, state: PidState, obs: Observation, u_min: float, u_max: float, noise: float = 0.0
) -> tuple[float, float, PidState]:
    """Apply the control law to ``obs``; returns ``(u, u_hat, state)``.

    ``noise`` perturbs the proposal before saturation.  Only the input
    memories are updated here; measurement memories are shifted by
    :func:`advance_measurement`.
    """
    if not u_min < u_max:
        raise ValueError("u_min must be below u_max")
    u_hat = control_increment(gains, obs) + obs.u_prev + noise
    u = min(max(u_hat, u_min), u_max)
    return u, u_hat, replace(state, u_prev=u, u_hat_prev=u_hat)


def pid_update(
    gains: PidGains, state: PidState, setpoint: float, y_t: float, u_min: float, u_max: float, noise: float = 0.0
) -> tuple[float, float, Observation, PidState]:
    """One full controller sample: observe, act, and shift memories."""
    obs = compute_observation(state, setpoint, y_t)
    u, u_hat, state = pid_step(gains, state, obs, u_min, u_max, noise)
    state = advance_measurement(state, setpoint, y_t)
    return u, u_hat, obs, state
