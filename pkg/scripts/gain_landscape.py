"""Evaluation IAE over a (k_p, k_i) grid with k_d = 0.01 k_p and k_tau = 0.5.

Useful for judging where the trained gains sit relative to the best fixed PI(D)
tuning reachable on the simulator.  Takes a few minutes on one core.
"""

import numpy as np

from pidrl.harness import run_evaluation
from pidrl.pid import PidGains

KPS = (2.0, 4.0, 6.0, 8.0, 10.0)
KIS = (0.005, 0.01, 0.02, 0.04, 0.067)


def main():
    iae = np.full((len(KPS), len(KIS)), np.nan)
    for i, kp in enumerate(KPS):
        for j, ki in enumerate(KIS):
            try:
                iae[i, j] = run_evaluation(PidGains(kp, ki, 0.01 * kp)).mean.iae
            except Exception as exc:  # unstable corners of the grid
                print(f"k_p={kp} k_i={ki}: {exc}")
    print("k_p \\ k_i " + "".join(f"{ki:>9}" for ki in KIS))
    for kp, row in zip(KPS, iae):
        print(f"{kp:>9} " + "".join(f"{v:9.2f}" for v in row))
    i, j = np.unravel_index(np.nanargmin(iae), iae.shape)
    print(f"best: k_p={KPS[i]} k_i={KIS[j]} IAE={iae[i, j]:.3f}")


if __name__ == "__main__":
    main()
