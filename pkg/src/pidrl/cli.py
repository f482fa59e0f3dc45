"""Command-line entry point: ``pidrl <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .baselines import REFERENCE_MODEL, SIMC_TC_GRID, simc_grid
from .config import load_config, to_ini
from .harness import ExperimentConfig
from .pid import PidGains
from .plant import calibrate_to_fopdt, flow_step_response
from .rewards import REWARD_PRESETS, max_sensitivity
from .rig import write_process_file

COMMANDS = ("simulate", "train", "evaluate", "baseline", "robustness", "report")


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting
    # values given before the command name
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    p.add_argument("--config", help="INI file with experiment settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--constrained", action="store_true", default=argparse.SUPPRESS if suppress else False, help="mixed-step protocol with tight input limits")
    p.add_argument("--reward", choices=sorted(REWARD_PRESETS))
    p.add_argument("--kp", type=float, help="initial k_p (k_i = k_p/60, k_d = 0.01 k_p)")
    p.add_argument("--cycles", type=int, help="episode cycles for training")
    p.add_argument("--gains", help="k_p,k_i,k_d,k_tau for evaluate/robustness/simulate")
    p.add_argument("--params", help="parameter CSV; its last row gives the gains")
    p.add_argument("--dump-defaults", action="store_true", default=argparse.SUPPRESS if suppress else False, help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pidrl", description=__doc__, parents=[_common()])
    sub = parser.add_subparsers(dest="command")
    helps = {
        "simulate": "closed-loop run of the evaluation sequence (or --open-loop flow step); writes CSV",
        "train": "full training experiment",
        "evaluate": "scorecard metrics for a gain set",
        "baseline": "fit the FOPDT model and tabulate SIMC tunings",
        "robustness": "evaluation under nominal and perturbed plants",
        "report": "collect run artifacts into plot-ready tables",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[_common(suppress=True)], help=helps[name])
        if name == "simulate":
            sp.add_argument("--open-loop", action="store_true", help="flow-setpoint step with the level loop open")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.constrained:
        cfg = harness.constrained(cfg)
    if args.kp is not None:
        cfg = harness.with_initial_kp(cfg, args.kp)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["output_dir"] = args.out
    if args.reward:
        changes["reward"] = REWARD_PRESETS[args.reward]
    if args.cycles is not None:
        changes["cycles"] = args.cycles
    return dataclasses.replace(cfg, **changes) if changes else cfg


def resolve_gains(args, cfg: ExperimentConfig) -> PidGains:
    if args.gains:
        vals = [float(x) for x in args.gains.split(",")]
        if len(vals) == 3:
            vals.append(cfg.initial_gains.k_tau)
        return PidGains.from_array(vals)
    if args.params:
        return harness.latest_gains(args.params)
    default = Path(cfg.output_dir) / "params.csv"
    if default.exists():
        return harness.latest_gains(default)
    return cfg.initial_gains


def _print_report(title: str, res: harness.EvaluationResult) -> None:
    m = res.mean
    print(f"{title}: IAE {m.iae:.3f}  ISE {m.ise:.3f}  TV {m.tv:.3f}  TVu {m.tv_u:.3f}  "
          f"%OS {m.percent_os:.2f}  ST {m.settling_time:.0f}s  Ms {m.ms:.3f}")


def cmd_simulate(args, cfg: ExperimentConfig, out: Path) -> int:
    if args.open_loop:
        f0 = cfg.plant.outflow_target(cfg.level0)
        t, u, y, f = flow_step_response(cfg.plant, [f0, f0 + 1.0], [20.0, 1500.0], cfg.level0)
        path = out / "open_loop.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("t_s", "flow_sp", "flow", "level_cm"))
            w.writerows(zip(map(repr, t), map(repr, u), map(repr, f), map(repr, y)))
    else:
        res = harness.run_evaluation(resolve_gains(args, cfg), cfg)
        path = out / "timeseries.csv"
        write_process_file(path, res.rows)
    print(f"wrote {path}")
    return 0


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    n_sp = len(cfg.setpoints)

    def progress(rec, gains):
        if rec.episode_id % n_sp == n_sp - 1:
            print(f"cycle {rec.cycle:3d}  IAE {rec.iae:8.3f}  k_p {gains.k_p:.4f}  k_i {gains.k_i:.5f}  "
                  f"k_d {gains.k_d:.4f}  k_tau {gains.k_tau:.3f}", flush=True)

    rep = harness.run_training_experiment(cfg, progress)
    res = harness.run_evaluation(rep.final_gains, cfg)
    harness.write_dict_rows(out / "evaluation.csv", res.metrics_rows())
    write_process_file(out / "evaluation_timeseries.csv", res.rows)
    init = harness.run_evaluation(cfg.initial_gains, cfg)
    _print_report("initial", init)
    _print_report("trained", res)
    print(f"plateau cycle {rep.plateau_cycle()}  runtime {rep.runtime_s:.1f}s  final {rep.final_gains}")
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> int:
    gains = resolve_gains(args, cfg)
    res = harness.run_evaluation(gains, cfg)
    harness.write_dict_rows(out / "evaluation.csv", res.metrics_rows())
    write_process_file(out / "evaluation_timeseries.csv", res.rows)
    _print_report(str(gains), res)
    return 0


def cmd_baseline(args, cfg: ExperimentConfig, out: Path) -> int:
    model = calibrate_to_fopdt(cfg.plant, level0=cfg.level0)
    print(f"fitted FOPDT: k = {model.k:.4f}  tau1 = {model.tau1:.2f} s  theta_d = {model.theta_d:.2f} s")
    rows = []
    for label, m in (("fitted", model), ("reference", REFERENCE_MODEL)):
        for tc, g in simc_grid(m, SIMC_TC_GRID).items():
            rows.append({"model": label, "k": m.k, "tau1": m.tau1, "theta_d": m.theta_d, "tc": tc,
                         "k_p": g.k_p, "k_i": g.k_i, "ms": max_sensitivity(g, m)})
    harness.write_dict_rows(out / "baseline.csv", rows)
    for r in rows:
        print(f"{r['model']:>9}  Tc {r['tc']:6.2f}  k_p {r['k_p']:.4f}  k_i {r['k_i']:.5f}  Ms {r['ms']:.3f}")
    return 0


def cmd_robustness(args, cfg: ExperimentConfig, out: Path) -> int:
    gains = resolve_gains(args, cfg)
    results = harness.run_robustness_suite(gains, cfg)
    table = harness.robustness_table(results)
    harness.write_dict_rows(out / "robustness.csv", table)
    text = harness.format_table(table)
    (out / "robustness.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_report(args, cfg: ExperimentConfig, out: Path) -> int:
    for p in harness.emit_report(out):
        print(f"wrote {p}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    if args.dump_defaults:
        sys.stdout.write(to_ini(cfg))
        return 0
    if args.command is None:
        parser.print_help()
        return 1
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = globals()[f"cmd_{args.command}"]
    return handler(args, cfg, out)


if __name__ == "__main__":
    raise SystemExit(main())
