"""Experiment orchestration: training, evaluation and robustness protocols.

The control loop and the trainer only talk through files in the run
directory.  After every episode the rig writes ``process/process_NNNNN.csv``;
the trainer picks up files it has not seen, trains, and rewrites
``params.csv`` whose last row is the gain set the rig loads for the next
episode.  In single-process mode the two sides are interleaved
deterministically, so a fixed seed reproduces every CSV byte for byte.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import REFERENCE_MODEL, FopdtModel, NotSettledError
from .pid import PidGains, init_from_kp
from .plant import FLOW_PID_GAINS, INTEGRATOR_DT, PlantParams
from .rewards import REWARD_PRESETS, MetricsReport, RewardSpec, max_sensitivity, mean_report, step_metrics, summarize
from .rig import Episode, Rig, read_process_file, write_process_file
from .td3 import RoundDiagnostics, Td3Agent, Td3Config, build_transitions, train_round

log = logging.getLogger(__name__)

EVAL_SEQUENCE = (65.0, 60.0, 63.0, 60.0)
UNCONSTRAINED_SETPOINTS = (65.0, 60.0)
CONSTRAINED_SETPOINTS = (65.0, 60.0, 63.0, 60.0)
# Flow-setpoint limits for the constrained protocol: the 5 cm steps of a k_p = 4
# controller saturate them, the 3 cm steps do not.
CONSTRAINED_LIMITS = (22.0, 48.0)
PARAM_COLUMNS = ("timestamp", "k_p", "k_i", "k_d", "k_tau")
EPISODE_COLUMNS = (
    "episode_id", "cycle", "setpoint_before", "setpoint", "iae", "ise", "k_p", "k_i", "k_d", "k_tau",
    "fallback_s", "flagged",
)


@dataclass
class ExperimentConfig:
    mode: str = "train"
    setpoints: tuple = UNCONSTRAINED_SETPOINTS
    episode_timer: float = 240.0
    control_dt: float = 1.0
    cycles: int = 20
    level0: float = 60.0
    initial_gains: PidGains = field(default_factory=lambda: init_from_kp(4.0))
    safe_gains: PidGains = field(default_factory=lambda: init_from_kp(4.0))
    safe_fallback_threshold: float = 2.0
    u_limits: tuple = (0.0, 200.0)
    T_f: float = 0.1
    reward: RewardSpec = field(default_factory=lambda: REWARD_PRESETS["eq17"])
    td3: Td3Config = field(default_factory=Td3Config)
    plant: PlantParams = field(default_factory=PlantParams)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.mode not in ("train", "evaluate", "baseline", "robustness"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.episode_timer > 0 or not self.cycles >= 0:
            raise ValueError("episode timer must be positive and cycles non-negative")
        if self.control_dt < INTEGRATOR_DT:
            raise ValueError("control interval must not be shorter than the integrator step")
        if not self.safe_fallback_threshold > 0:
            raise ValueError("fallback threshold must be positive")
        if not self.u_limits[0] < self.u_limits[1]:
            raise ValueError("u_limits must be increasing")
        if not self.setpoints:
            raise ValueError("need at least one setpoint")

    @property
    def setpoint_sequence(self) -> list[tuple[float, float]]:
        return [(sp, self.episode_timer) for sp in self.setpoints]


def constrained(cfg: ExperimentConfig) -> ExperimentConfig:
    """The mixed 60/65 and 60/63 protocol with tight limits and inverting gradients."""
    return replace(
        cfg,
        setpoints=CONSTRAINED_SETPOINTS,
        u_limits=CONSTRAINED_LIMITS,
        td3=replace(cfg.td3, use_inverting_gradients=True),
    )


def with_initial_kp(cfg: ExperimentConfig, k_p: float) -> ExperimentConfig:
    g = init_from_kp(k_p, cfg.initial_gains.k_tau)
    return replace(cfg, initial_gains=g)


def agent_config(cfg: ExperimentConfig) -> Td3Config:
    lo, hi = cfg.u_limits
    return replace(cfg.td3, u_min=lo, u_max=hi, seed=cfg.seed)


# -- parameter exchange ------------------------------------------------------


def write_params_file(path, history) -> None:
    """Write the gain history atomically; the last row is the live tuning."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARAM_COLUMNS)
        for ts, g in history:
            w.writerow([repr(float(ts)), repr(g.k_p), repr(g.k_i), repr(g.k_d), repr(g.k_tau)])
    tmp.replace(path)


def read_params_file(path) -> list[tuple[float, PidGains]]:
    with open(path, newline="") as fh:
        return [
            (float(r["timestamp"]), PidGains(float(r["k_p"]), float(r["k_i"]), float(r["k_d"]), float(r["k_tau"])))
            for r in csv.DictReader(fh)
        ]


def latest_gains(path) -> PidGains:
    hist = read_params_file(path)
    if not hist:
        raise ValueError(f"{path}: no parameter rows")
    return hist[-1][1]


class Trainer:
    """The learning side of the file exchange."""

    def __init__(self, agent: Td3Agent, reward: RewardSpec, data_dir, params_path, control_dt: float, T_f: float = 0.1):
        self.agent = agent
        self.reward = reward
        self.data_dir = Path(data_dir)
        self.params_path = Path(params_path)
        self.dt = control_dt
        self.T_f = T_f
        self.seen: set[str] = set()
        self.history: list[tuple[float, PidGains]] = []

    def publish(self, timestamp: float) -> None:
        self.history.append((timestamp, self.agent.gains()))
        write_params_file(self.params_path, self.history)

    def poll(self) -> int:
        """Load unseen process files into replay; returns the number of new transitions."""
        n = 0
        for path in sorted(self.data_dir.glob("process_*.csv")):
            if path.name in self.seen:
                continue
            self.seen.add(path.name)
            rows = read_process_file(path)
            trs = build_transitions(rows, self.reward, self.agent.config.d, self.dt, self.T_f)
            self.agent.replay.extend(trs)
            n += len(trs)
        return n

    def step(self, timestamp: float) -> RoundDiagnostics:
        n = self.poll()
        cfg = self.agent.config
        diag = train_round(self.agent, cfg.updates_per_round or n)
        if not diag.failed:
            self.publish(timestamp)
        return diag


def save_checkpoint(agent: Td3Agent, path) -> None:
    arrays = {"actor.theta": agent.actor.theta, "actor_target.theta": agent.actor_target.theta}
    for i, (c, ct) in enumerate(zip(agent.critics, agent.critic_targets)):
        arrays.update({f"critic{i}.{k}": v for k, v in c.params.items()})
        arrays.update({f"critic_target{i}.{k}": v for k, v in ct.params.items()})
    for name, opt in [("actor", agent.actor_opt)] + [(f"critic{i}", o) for i, o in enumerate(agent.critic_opts)]:
        arrays[f"adam.{name}.t"] = np.array(opt.t)
        arrays.update({f"adam.{name}.m.{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam.{name}.v.{k}": v for k, v in opt.v.items()})
    arrays["counters"] = np.array([agent.total_updates, agent.actor_updates])
    np.savez(path, **arrays)


def load_checkpoint(agent: Td3Agent, path) -> Td3Agent:
    with np.load(path) as z:
        agent.actor.load({"theta": z["actor.theta"]})
        agent.actor_target.load({"theta": z["actor_target.theta"]})
        for i, (c, ct) in enumerate(zip(agent.critics, agent.critic_targets)):
            c.load({k: z[f"critic{i}.{k}"] for k in c.params})
            ct.load({k: z[f"critic_target{i}.{k}"] for k in ct.params})
        for name, opt in [("actor", agent.actor_opt)] + [(f"critic{i}", o) for i, o in enumerate(agent.critic_opts)]:
            opt.t = int(z[f"adam.{name}.t"])
            opt.m = {k.split(".m.", 1)[1]: z[k].copy() for k in z.files if k.startswith(f"adam.{name}.m.")}
            opt.v = {k.split(".v.", 1)[1]: z[k].copy() for k in z.files if k.startswith(f"adam.{name}.v.")}
        agent.total_updates, agent.actor_updates = (int(x) for x in z["counters"])
    return agent


# -- training ----------------------------------------------------------------


@dataclass
class EpisodeRecord:
    episode_id: int
    cycle: int
    setpoint_before: float
    setpoint: float
    iae: float
    ise: float
    gains: PidGains
    fallback_s: float = 0.0
    flagged: bool = False

    def row(self) -> list:
        g = self.gains
        return [
            self.episode_id, self.cycle, repr(self.setpoint_before), repr(self.setpoint), repr(self.iae),
            repr(self.ise), repr(g.k_p), repr(g.k_i), repr(g.k_d), repr(g.k_tau), repr(self.fallback_s),
            int(self.flagged),
        ]


@dataclass
class TrainingReport:
    episodes: list
    gains_history: list
    final_gains: PidGains
    runtime_s: float
    agent: Td3Agent | None = None

    def cycle_iae(self) -> np.ndarray:
        """Mean per-episode IAE of each episode cycle."""
        if not self.episodes:
            return np.zeros(0)
        n = max(r.cycle for r in self.episodes) + 1
        return np.array([np.mean([r.iae for r in self.episodes if r.cycle == c]) for c in range(n)])

    def plateau_cycle(self, tol: float = 0.1) -> int | None:
        """First cycle from which every cycle's IAE stays within ``tol`` of the final one."""
        iae = self.cycle_iae()
        if len(iae) == 0:
            return None
        ok = np.abs(iae - iae[-1]) <= tol * iae[-1]
        bad = np.flatnonzero(~ok)
        return 0 if len(bad) == 0 else int(bad[-1] + 1)


def episode_metrics(ep: Episode) -> MetricsReport:
    resp = ep.response
    return step_metrics(
        [r.t_s for r in resp],
        [r.level_cm for r in resp],
        [r.u for r in resp],
        ep.setpoint_before,
        ep.setpoint,
        u_before=ep.rows[0].u,
    )


def write_episodes_file(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for r in records:
            w.writerow(r.row())


def run_training_experiment(cfg: ExperimentConfig, progress=None) -> TrainingReport:
    out = Path(cfg.output_dir)
    data_dir = out / "process"
    data_dir.mkdir(parents=True, exist_ok=True)
    for stale in list(data_dir.glob("*.csv")):
        stale.unlink()
    t0 = time.perf_counter()
    rig = Rig(cfg.plant, cfg.level0, cfg.control_dt, T_f=cfg.T_f)
    agent = Td3Agent(agent_config(cfg), cfg.initial_gains)
    trainer = Trainer(agent, cfg.reward, data_dir, out / "params.csv", cfg.control_dt, cfg.T_f)
    trainer.publish(0.0)
    gains = latest_gains(trainer.params_path)
    records: list[EpisodeRecord] = []
    n_sp = len(cfg.setpoints)
    for cycle in range(cfg.cycles):
        for j, sp in enumerate(cfg.setpoints):
            eid = cycle * n_sp + j
            ep = rig.run_episode(
                sp, cfg.episode_timer, gains, cfg.u_limits, eid,
                safe_gains=cfg.safe_gains, fallback_threshold=cfg.safe_fallback_threshold,
            )
            write_process_file(data_dir / f"process_{eid:05d}.csv", ep.rows)
            fallback_s = 0.0
            if ep.fallback_rows:
                write_process_file(data_dir / f"fallback_{eid:05d}.csv", ep.fallback_rows)
                fallback_s = len(ep.fallback_rows) * cfg.control_dt
                if abs(sp - rig.state.measured_level) > cfg.safe_fallback_threshold:
                    log.error("episode %d: safe fallback did not recover within its time limit", eid)
                else:
                    log.info("episode %d: safe fallback engaged for %.0f s", eid, fallback_s)
            m = episode_metrics(ep)
            diag = trainer.step(rig.t)
            flagged = diag.failed
            if flagged:
                log.warning("episode %d: training round failed; keeping last good gains", eid)
            else:
                gains = latest_gains(trainer.params_path)
            if not all(map(math.isfinite, gains.as_array())) or min(gains.k_p, gains.k_i, gains.k_d) <= 0:
                raise FloatingPointError(f"gains left the admissible set: {gains}")
            records.append(EpisodeRecord(eid, cycle, ep.setpoint_before, sp, m.iae, m.ise, ep.gains, fallback_s, flagged))
            if progress is not None:
                progress(records[-1], gains)
    write_episodes_file(out / "episodes.csv", records)
    save_checkpoint(agent, out / "checkpoint.npz")
    return TrainingReport(records, list(trainer.history), gains, time.perf_counter() - t0, agent)


# -- evaluation --------------------------------------------------------------


@dataclass
class EvaluationResult:
    reports: list
    mean: MetricsReport
    rows: list

    def metrics_rows(self) -> list[dict]:
        out = [{"step": i, **r.as_dict()} for i, r in enumerate(self.reports)]
        out.append({"step": "mean", **self.mean.as_dict()})
        return out


def check_settled(rig: Rig, tol: float = 1e-6) -> None:
    s = rig.state
    if (
        abs(s.level - rig.setpoint) > tol
        or abs(s.measured_level - s.level) > tol
        or abs(s.f_in - s.f_out) > tol * max(1.0, abs(s.f_out))
    ):
        raise NotSettledError("evaluation must start from steady state at the first setpoint")


def run_evaluation(
    gains: PidGains,
    cfg: ExperimentConfig | None = None,
    plant: PlantParams | None = None,
    flow_gains: PidGains = FLOW_PID_GAINS,
    rig: Rig | None = None,
    model: FopdtModel = REFERENCE_MODEL,
) -> EvaluationResult:
    """The four-step scorecard sequence with the input limits out of the way."""
    cfg = cfg or ExperimentConfig()
    plant = plant or cfg.plant
    if rig is None:
        rig = Rig(plant, cfg.level0, cfg.control_dt, flow_gains=flow_gains, T_f=cfg.T_f)
    check_settled(rig)
    ms = max_sensitivity(gains, model, t_filter=cfg.T_f)
    reports, rows = [], []
    for i, sp in enumerate(EVAL_SEQUENCE):
        ep = rig.run_episode(sp, cfg.episode_timer, gains, (0.0, rig.plant.f_max), i)
        rep = episode_metrics(ep)
        rep.ms = ms
        reports.append(rep)
        rows.extend(ep.response)
    return EvaluationResult(reports, mean_report(reports), rows)


ROBUSTNESS_CONDITIONS = ("nominal", "outflow_50", "flow_kp_half")


def robustness_conditions(cfg: ExperimentConfig) -> dict[str, tuple[PlantParams, PidGains]]:
    f = FLOW_PID_GAINS
    return {
        "nominal": (cfg.plant, f),
        "outflow_50": (replace(cfg.plant, outflow_scale=0.5 * cfg.plant.outflow_scale), f),
        "flow_kp_half": (cfg.plant, replace(f, k_p=0.5 * f.k_p)),
    }


def run_robustness_suite(gains: PidGains, cfg: ExperimentConfig | None = None) -> dict[str, EvaluationResult]:
    cfg = cfg or ExperimentConfig()
    return {
        name: run_evaluation(gains, cfg, plant=plant, flow_gains=fg)
        for name, (plant, fg) in robustness_conditions(cfg).items()
    }


def robustness_table(results: dict[str, EvaluationResult]) -> list[dict]:
    """One row per condition with mean and std of each metric over the step changes."""
    table = []
    for name, res in results.items():
        row = {"condition": name}
        for metric, (mu, sd) in summarize(res.reports).items():
            row[f"{metric}_mean"] = mu
            row[f"{metric}_std"] = sd
        table.append(row)
    return table


def format_table(table: list[dict]) -> str:
    if not table:
        return ""
    metrics = MetricsReport.METRICS
    head = "condition".ljust(14) + "".join(m.rjust(20) for m in metrics)
    lines = [head]
    for row in table:
        cells = "".join(f"{row[f'{m}_mean']:.3f} ± {row[f'{m}_std']:.3f}".rjust(20) for m in metrics)
        lines.append(str(row["condition"]).ljust(14) + cells)
    return "\n".join(lines)


def write_dict_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_timeseries(path, rows) -> None:
    write_process_file(path, rows)


# -- report ------------------------------------------------------------------

HEATMAP_EDGES = np.linspace(55.0, 70.0, 61)


def level_heatmap(levels_by_cycle: list, edges=HEATMAP_EDGES) -> np.ndarray:
    """Occupancy counts per episode cycle; samples outside the grid land in the edge bins."""
    edges = np.asarray(edges, dtype=float)
    out = np.zeros((len(levels_by_cycle), len(edges) - 1), dtype=int)
    for i, levels in enumerate(levels_by_cycle):
        y = np.clip(np.asarray(levels, dtype=float), edges[0], edges[-1])
        out[i], _ = np.histogram(y, bins=edges)
    return out


def emit_report(run_dir, out_dir=None) -> list[Path]:
    """Collect whatever artifacts exist in ``run_dir`` into plot-ready tables."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    episodes = []
    ep_path = run_dir / "episodes.csv"
    if ep_path.exists():
        with open(ep_path, newline="") as fh:
            episodes = list(csv.DictReader(fh))
    else:
        warnings.warn(f"{ep_path} missing; training trace omitted")
    path = out / "training_trace.csv"
    write_dict_rows(path, episodes)
    written.append(path)

    params = run_dir / "params.csv"
    hist = read_params_file(params) if params.exists() else []
    if not params.exists():
        warnings.warn(f"{params} missing; gains trajectory omitted")
    path = out / "gains_trajectory.csv"
    write_dict_rows(path, [{"timestamp": t, **asdict(g)} for t, g in hist])
    written.append(path)

    cycle_of = {int(r["episode_id"]): int(r["cycle"]) for r in episodes}
    files = sorted((run_dir / "process").glob("process_*.csv")) if (run_dir / "process").exists() else []
    series, by_cycle = [], {}
    for f in files:
        rows = read_process_file(f)[1:]
        series.extend(rows)
        for r in rows:
            by_cycle.setdefault(cycle_of.get(r.episode_id, r.episode_id), []).append(r.level_cm)
    path = out / "timeseries.csv"
    write_process_file(path, series) if series else write_dict_rows(path, [])
    written.append(path)

    cycles = sorted(by_cycle)
    counts = level_heatmap([by_cycle[c] for c in cycles])
    path = out / "heatmap.csv"
    centers = 0.5 * (HEATMAP_EDGES[:-1] + HEATMAP_EDGES[1:])
    write_dict_rows(
        path,
        [{"cycle": c, **{f"{x:.2f}": int(n) for x, n in zip(centers, row)}} for c, row in zip(cycles, counts)],
    )
    written.append(path)

    for name in ("evaluation.csv", "robustness.csv", "baseline.csv"):
        src = run_dir / name
        if src.exists():
            dst = out / name
            dst.write_bytes(src.read_bytes())
            written.append(dst)
    return written
