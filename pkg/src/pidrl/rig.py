"""Simulated test rig: the two-tank plant with its flow loop and the tunable level loop.

The rig plays the part of the operator station: it runs step-change
episodes, logs one row per control sample, and can fall back to a safe
tuning when tracking is poor at the end of an episode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

from .pid import PidGains, seeded_state
from .plant import (
    FLOW_PID_GAINS,
    FLOW_PID_T_F,
    INTEGRATOR_DT,
    LevelLoop,
    PlantParams,
    closed_loop_step,
    make_flow_loop,
    steady_state,
)

PROCESS_COLUMNS = ("t_s", "level_sp_cm", "level_cm", "flow_sp", "flow", "pump_pct", "u_hat", "u", "episode_id")


@dataclass(frozen=True)
class ProcessRow:
    t_s: float
    level_sp_cm: float
    level_cm: float
    flow_sp: float
    flow: float
    pump_pct: float
    u_hat: float
    u: float
    episode_id: int

    @classmethod
    def from_strings(cls, rec: dict) -> "ProcessRow":
        vals = {f.name: (int(rec[f.name]) if f.name == "episode_id" else float(rec[f.name])) for f in fields(cls)}
        return cls(**vals)


def write_process_file(path, rows) -> None:
    """Write rows as CSV via a temporary file so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROCESS_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(r)])
    tmp.replace(path)


def read_process_file(path) -> list[ProcessRow]:
    with open(path, newline="") as fh:
        rows = [ProcessRow.from_strings(rec) for rec in csv.DictReader(fh)]
    ts = [r.t_s for r in rows]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"{path}: timestamps must be strictly increasing")
    return rows


@dataclass
class Episode:
    episode_id: int
    setpoint_before: float
    setpoint: float
    rows: list  # rows[0] is the seed sample taken before the step
    fallback_rows: list
    gains: PidGains

    @property
    def response(self) -> list:
        return self.rows[1:]


class Rig:
    def __init__(
        self,
        plant: PlantParams | None = None,
        level0: float = 60.0,
        control_dt: float = 1.0,
        flow_gains: PidGains = FLOW_PID_GAINS,
        T_f: float = 0.1,
        integrator_dt: float = INTEGRATOR_DT,
        gains: PidGains | None = None,
    ):
        self.plant = plant or PlantParams()
        self.control_dt = control_dt
        self.T_f = T_f
        self.dt = integrator_dt
        if control_dt < integrator_dt:
            raise ValueError("control interval must not be shorter than the integrator step")
        self.state = steady_state(self.plant, level0, integrator_dt)
        self.flow_loop = make_flow_loop(self.state, flow_gains, integrator_dt, FLOW_PID_T_F)
        f0 = self.state.f_in
        self.level_loop = LevelLoop(gains or PidGains(1.0, 0.0, 0.0, 0.0), seeded_state(control_dt, f0, level0, level0, T_f), 0.0, self.plant.f_max)
        self.t = 0.0
        self.setpoint = level0
        self.last_row = ProcessRow(0.0, level0, level0, f0, f0, self.state.p, f0, f0, -1)
        self.t = control_dt

    def sample(self, setpoint: float, episode_id: int, noise: float = 0.0) -> ProcessRow:
        self.state, rec = closed_loop_step(
            self.state, setpoint, self.level_loop, self.flow_loop, self.plant, self.control_dt, self.t, self.dt,
            noise=noise,
        )
        row = ProcessRow(rec.t, rec.level_sp, rec.level, rec.flow_sp, rec.flow, rec.pump, rec.u_hat, rec.u, episode_id)
        self.t = round(self.t + self.control_dt, 9)
        self.last_row = row
        return row

    def reset_controller(self) -> None:
        """Bumpless controller reset from the most recent logged sample."""
        r = self.last_row
        self.level_loop.state = seeded_state(self.control_dt, r.u, r.level_cm, r.level_sp_cm, self.T_f, r.u_hat)

    def run_episode(
        self,
        setpoint: float,
        duration: float,
        gains: PidGains,
        u_limits: tuple[float, float],
        episode_id: int,
        noise=None,
        safe_gains: PidGains | None = None,
        fallback_threshold: float = math.inf,
        max_fallback: float = 1800.0,
    ) -> Episode:
        self.reset_controller()
        seed = self.last_row
        self.level_loop.gains = gains
        self.level_loop.u_min, self.level_loop.u_max = u_limits
        n = int(round(duration / self.control_dt))
        eps = [0.0] * n if noise is None else list(noise)
        rows = [seed] + [self.sample(setpoint, episode_id, eps[k]) for k in range(n)]
        fallback = []
        if safe_gains is not None and abs(setpoint - self.state.measured_level) > fallback_threshold:
            self.level_loop.gains = safe_gains
            for _ in range(int(round(max_fallback / self.control_dt))):
                fallback.append(self.sample(setpoint, -1))
                if abs(setpoint - self.state.measured_level) <= fallback_threshold:
                    break
        before = self.setpoint
        self.setpoint = setpoint
        return Episode(episode_id, before, setpoint, rows, fallback, gains)
