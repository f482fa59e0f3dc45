"""Two-tank level process: pump, inflow, outflow and level-sensor lags.

States are ``(p, f_in, f_out, level, measured_level)``.  Every lag is a
first-order filter ``tau * y' + y = target``; a zero time constant turns that
component into an algebraic relation.  Flow is in cm^3/s, level in cm, the
pump command in percent.

The inner flow loop and a pure transport delay on the commanded signal are
stepped together with the ODEs at the integrator rate.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

from .pid import PidGains, PidState, pid_update, seeded_state

INTEGRATOR_DT = 0.1

# Flow loop tuning of the lab rig: k_p = 0.2, k_i = k_p/3, k_d = 0.67 k_p, T_f = 0.1.
FLOW_PID_GAINS = PidGains(0.2, 0.2 / 3.0, 0.67 * 0.2, 0.0)
FLOW_PID_T_F = 0.1


@dataclass(frozen=True)
class PlantParams:
    # Defaults come from scripts/calibrate_plant.py: flow-setpoint -> level
    # FOPDT fit at 60 cm lands on k = 3.44, tau1 = 301.19 s, theta_d = 9.21 s.
    r_tank: float = 5.28798
    r_pipe: float = 0.23387
    f_c: float = 0.6
    f_max: float = 200.0
    tau_p: float = 0.5
    tau_in: float = 1.0
    tau_out: float = 1.0
    tau_m: float = 1.0
    g: float = 981.0
    transport_delay: float = 0.7
    outflow_scale: float = 1.0

    def __post_init__(self):
        for name in ("tau_p", "tau_in", "tau_out", "tau_m", "transport_delay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("r_tank", "r_pipe", "f_max", "f_c", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 < self.outflow_scale <= 1.0:
            raise ValueError("outflow_scale must lie in (0, 1]")

    @property
    def tank_area(self) -> float:
        return math.pi * self.r_tank**2

    @property
    def outflow_coeff(self) -> float:
        """Outflow per sqrt(cm) of level: f_out = coeff * sqrt(level) at equilibrium."""
        return self.outflow_scale * math.pi * self.r_pipe**2 * self.f_c * math.sqrt(2.0 * self.g)

    def outflow_target(self, level: float) -> float:
        return self.outflow_coeff * math.sqrt(max(level, 0.0))

    def min_time_constant(self) -> float:
        taus = [t for t in (self.tau_p, self.tau_in, self.tau_out, self.tau_m) if t > 0]
        return min(taus) if taus else math.inf


@dataclass
class PlantState:
    p: float = 0.0
    f_in: float = 0.0
    f_out: float = 0.0
    level: float = 0.0
    measured_level: float = 0.0
    delay_buffer: deque = field(default_factory=deque)

    def copy(self) -> "PlantState":
        return replace(self, delay_buffer=deque(self.delay_buffer))

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.p, self.f_in, self.f_out, self.level, self.measured_level)


@dataclass(frozen=True)
class PlantCommand:
    """Commanded signal; ``mode`` selects whether the flow loop is closed."""

    value: float
    mode: str = "pump"

    def __post_init__(self):
        if self.mode not in ("pump", "flow"):
            raise ValueError(f"unknown command mode {self.mode!r}")


@dataclass
class FlowLoop:
    """Inner flow controller: flow setpoint -> pump speed, sampled every integrator step."""

    gains: PidGains
    state: PidState

    def update(self, flow_setpoint: float, f_in: float) -> float:
        u, _, _, self.state = pid_update(self.gains, self.state, flow_setpoint, f_in, 0.0, 100.0)
        return u


def filter_step(y_prev: float, y_hat: float, tau: float, dt: float) -> float:
    """Exact update of ``tau*y' + y = y_hat`` over ``dt`` with ``y_hat`` held."""
    if not all(map(math.isfinite, (y_prev, y_hat, tau, dt))):
        raise ValueError("filter_step needs finite inputs")
    if tau < 0 or dt <= 0:
        raise ValueError("need tau >= 0 and dt > 0")
    if tau == 0:
        return y_hat
    return y_hat + (y_prev - y_hat) * math.exp(-dt / tau)


def _effective(x, pbar: float, prm: PlantParams):
    """Resolve algebraic (zero-lag) components and return the ODE right-hand side."""
    p, f_in, f_out, level, m = x
    if prm.tau_p == 0:
        p = pbar
    if prm.tau_in == 0:
        f_in = prm.f_max * p / 100.0
    if prm.tau_out == 0:
        f_out = prm.outflow_target(level)
    dp = 0.0 if prm.tau_p == 0 else (pbar - p) / prm.tau_p
    dfin = 0.0 if prm.tau_in == 0 else (prm.f_max * p / 100.0 - f_in) / prm.tau_in
    dfout = 0.0 if prm.tau_out == 0 else (prm.outflow_target(level) - f_out) / prm.tau_out
    dlevel = (f_in - f_out) / prm.tank_area
    dm = 0.0 if prm.tau_m == 0 else (level - m) / prm.tau_m
    return (dp, dfin, dfout, dlevel, dm)


def _pump_value(command) -> float:
    if isinstance(command, PlantCommand):
        if command.mode != "pump":
            raise ValueError("plant_derivatives needs the pump command; close the flow loop first")
        return command.value
    return float(command)


def plant_derivatives(state: PlantState, command, params: PlantParams) -> tuple:
    """Time derivatives ``(p', f_in', f_out', level', m')``; level is floored at 0 under the root."""
    return _effective(state.as_tuple(), _pump_value(command), params)


def _rk4(x, pbar, prm, dt):
    k1 = _effective(x, pbar, prm)
    x2 = tuple(xi + 0.5 * dt * ki for xi, ki in zip(x, k1))
    k2 = _effective(x2, pbar, prm)
    x3 = tuple(xi + 0.5 * dt * ki for xi, ki in zip(x, k2))
    k3 = _effective(x3, pbar, prm)
    x4 = tuple(xi + dt * ki for xi, ki in zip(x, k3))
    k4 = _effective(x4, pbar, prm)
    return [xi + dt / 6.0 * (a + 2 * b + 2 * c + d) for xi, a, b, c, d in zip(x, k1, k2, k3, k4)]


def _settle_algebraic(x, pbar, prm):
    p, f_in, f_out, level, m = x
    if prm.tau_p == 0:
        p = pbar
    p = min(max(p, 0.0), 100.0)
    level = max(level, 0.0)
    if prm.tau_in == 0:
        f_in = prm.f_max * p / 100.0
    if prm.tau_out == 0:
        f_out = prm.outflow_target(level)
    if prm.tau_m == 0:
        m = level
    return max(f_in, 0.0), max(f_out, 0.0), p, level, m


def delay_length(params: PlantParams, dt: float) -> int:
    return int(round(params.transport_delay / dt))


def _delayed(state: PlantState, value: float, params: PlantParams, dt: float) -> float:
    n = delay_length(params, dt)
    if n == 0:
        return value
    buf = state.delay_buffer
    while len(buf) < n:
        buf.appendleft(value)
    buf.append(value)
    return buf.popleft()


def step_plant(
    state: PlantState,
    command: PlantCommand,
    params: PlantParams,
    dt: float = INTEGRATOR_DT,
    flow_loop: FlowLoop | None = None,
) -> PlantState:
    """Advance one RK4 step of size ``dt``.

    The commanded value passes through the transport delay first.  In
    ``"flow"`` mode the delayed value is the flow setpoint and ``flow_loop``
    turns it into a pump command for this step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > params.min_time_constant() / 2:
        raise ValueError("integration step too coarse")
    new = state.copy()
    value = _delayed(new, command.value, params, dt)
    if command.mode == "flow":
        if flow_loop is None:
            raise ValueError("flow mode needs a flow loop")
        pbar = flow_loop.update(value, state.f_in)
    else:
        pbar = value
    x = _rk4(state.as_tuple(), pbar, params, dt)
    f_in, f_out, p, level, m = _settle_algebraic(x, pbar, params)
    new.p, new.f_in, new.f_out, new.level, new.measured_level = p, f_in, f_out, level, m
    return new


def steady_state(params: PlantParams, level: float, dt: float = INTEGRATOR_DT) -> PlantState:
    """Equilibrium at ``level`` with the inflow matching the outflow."""
    f = params.outflow_target(level)
    p = 100.0 * f / params.f_max
    if p > 100.0:
        raise ValueError(f"level {level} cm is not reachable with f_max={params.f_max}")
    buf = deque([f] * delay_length(params, dt))
    return PlantState(p=p, f_in=f, f_out=f, level=level, measured_level=level, delay_buffer=buf)


def make_flow_loop(
    state: PlantState, gains: PidGains = FLOW_PID_GAINS, dt: float = INTEGRATOR_DT, T_f: float = FLOW_PID_T_F
) -> FlowLoop:
    """Flow loop seeded bumplessly at the plant's current operating point."""
    return FlowLoop(gains, seeded_state(dt, state.p, state.f_in, state.f_in, T_f=T_f))


@dataclass
class LevelLoop:
    """Tunable level controller: level error -> flow setpoint, sampled at the control interval."""

    gains: PidGains
    state: PidState
    u_min: float
    u_max: float


@dataclass(frozen=True)
class LogRecord:
    t: float
    level_sp: float
    level: float
    flow_sp: float
    flow: float
    pump: float
    u_hat: float
    u: float


def closed_loop_step(
    state: PlantState,
    level_setpoint: float,
    level_loop: LevelLoop,
    flow_loop: FlowLoop,
    params: PlantParams,
    control_dt: float,
    t: float = 0.0,
    dt: float = INTEGRATOR_DT,
    noise: float = 0.0,
) -> tuple[PlantState, LogRecord]:
    """Sample the level controller once, then hold its output for ``control_dt``.

    The log record describes the sample: measurement and setpoint at ``t``
    and the input chosen in response.  ``noise`` is added to the controller's
    proposal before saturation (exploration during training).
    """
    y = state.measured_level
    u, u_hat, _, level_loop.state = pid_update(
        level_loop.gains, level_loop.state, level_setpoint, y, level_loop.u_min, level_loop.u_max, noise
    )
    record = LogRecord(t, level_setpoint, y, u, state.f_in, state.p, u_hat, u)
    n = int(round(control_dt / dt))
    if abs(n * dt - control_dt) > 1e-9:
        raise ValueError("control interval must be a multiple of the integrator step")
    cmd = PlantCommand(u, "flow")
    for _ in range(n):
        state = step_plant(state, cmd, params, dt, flow_loop)
    return state, record


def flow_step_response(
    params: PlantParams,
    flow_setpoints,
    durations,
    level0: float = 60.0,
    flow_gains: PidGains = FLOW_PID_GAINS,
    sample_dt: float = 1.0,
    dt: float = INTEGRATOR_DT,
):
    """Open level loop, closed flow loop: hold each flow setpoint for its duration.

    Returns ``(t, flow_sp, measured_level, f_in)`` sampled every ``sample_dt``.
    """
    state = steady_state(params, level0, dt)
    loop = make_flow_loop(state, flow_gains, dt)
    n_sub = int(round(sample_dt / dt))
    ts, us, ys, fs = [], [], [], []
    t = 0.0
    for sp, dur in zip(flow_setpoints, durations):
        cmd = PlantCommand(sp, "flow")
        for _ in range(int(round(dur / sample_dt))):
            ts.append(t)
            us.append(sp)
            ys.append(state.measured_level)
            fs.append(state.f_in)
            for _ in range(n_sub):
                state = step_plant(state, cmd, params, dt, loop)
            t += sample_dt
    return ts, us, ys, fs


def calibrate_to_fopdt(
    params: PlantParams, step_size: float = 1.0, level0: float = 60.0, hold: float = 3000.0, lead: float = 20.0
):
    """Fit the flow-setpoint -> level FOPDT model around ``level0``.

    The flow setpoint is stepped up by ``step_size`` and back down; the
    returned model averages the two fits.
    """
    from .baselines import FopdtModel, NotSettledError, fit_fopdt

    f0 = params.outflow_target(level0)
    t, u, y, _ = flow_step_response(params, [f0, f0 + step_size, f0], [lead, hold, hold], level0)
    n_up = int(round((lead + hold)))
    try:
        up = fit_fopdt(t[:n_up], u[:n_up], y[:n_up])
        down = fit_fopdt(t[n_up - int(lead):], u[n_up - int(lead):], y[n_up - int(lead):])
    except NotSettledError as exc:
        raise NotSettledError("plant not calibratable at this operating point") from exc
    return FopdtModel(
        k=0.5 * (up.k + down.k), tau1=0.5 * (up.tau1 + down.tau1), theta_d=0.5 * (up.theta_d + down.theta_d)
    )
