"""Pick tank/pipe radii and transport delay so the simulated flow->level
response matches the identified model G(s) = 3.44 exp(-9.21 s) / (301.19 s + 1).

Fixed-point iteration: the linearised gain scales like 1/r_pipe^2, the time
constant like r_tank^2, and the dead time shifts one-for-one with the delay.
Deterministic (no random seed involved).  Prints the PlantParams to paste
into plant.py.
"""

import math
from dataclasses import replace

from pidrl.baselines import REFERENCE_MODEL
from pidrl.plant import PlantParams, calibrate_to_fopdt


def main(iterations: int = 6, step_size: float = 1.0):
    params = PlantParams(transport_delay=1.0)
    for i in range(iterations):
        model = calibrate_to_fopdt(params, step_size)
        print(f"iter {i}: k={model.k:.4f} tau1={model.tau1:.2f} theta_d={model.theta_d:.3f}  {params}")
        r_pipe = params.r_pipe * math.sqrt(model.k / REFERENCE_MODEL.k)
        r_tank = params.r_tank * math.sqrt(REFERENCE_MODEL.tau1 / model.tau1 * model.k / REFERENCE_MODEL.k)
        delay = max(0.0, params.transport_delay + REFERENCE_MODEL.theta_d - model.theta_d)
        params = replace(params, r_pipe=round(r_pipe, 5), r_tank=round(r_tank, 5), transport_delay=round(delay, 1))
    model = calibrate_to_fopdt(params, step_size)
    print(f"final: k={model.k:.4f} tau1={model.tau1:.2f} theta_d={model.theta_d:.3f}")
    print(params)


if __name__ == "__main__":
    main()
