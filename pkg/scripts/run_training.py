"""Run the three training experiments (k_p=4, k_p=2, constrained) back to back
and print the scorecard before and after, plus SIMC at Tc=20 for reference.

Usage: python scripts/run_training.py [out_dir] [cycles]
"""

import sys
from dataclasses import replace
from pathlib import Path

from pidrl import harness
from pidrl.baselines import REFERENCE_MODEL, simc_pi
from pidrl.harness import ExperimentConfig, run_evaluation, run_training_experiment


def describe(label, res):
    m = res.mean
    print(f"  {label:<8} IAE {m.iae:7.3f}  ISE {m.ise:7.3f}  %OS {m.percent_os:6.2f}  ST {m.settling_time:6.1f}")


def main(out="runs", cycles=20):
    out = Path(out)
    base = ExperimentConfig(cycles=cycles)
    variants = {
        "kp4": base,
        "kp2": harness.with_initial_kp(base, 2.0),
        "constrained": harness.constrained(base),
    }
    for name, cfg in variants.items():
        cfg = replace(cfg, output_dir=str(out / name))
        rep = run_training_experiment(cfg)
        print(f"{name}: {rep.runtime_s:.0f}s, plateau cycle {rep.plateau_cycle()}, final {rep.final_gains}")
        describe("initial", run_evaluation(cfg.initial_gains, cfg))
        describe("final", run_evaluation(rep.final_gains, cfg))
    print("SIMC Tc=20")
    describe("simc20", run_evaluation(simc_pi(REFERENCE_MODEL, 20.0)))


if __name__ == "__main__":
    main(*(sys.argv[1:2] or ["runs"]), *(int(a) for a in sys.argv[2:3]))
