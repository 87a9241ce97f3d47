"""Sensitivity of acceptance rate and rescues to tau, lambda and calibration size.

    python scripts/sweep.py --param tau --values 1e-4,1e-3,0.01,0.1,0.6
    python scripts/sweep.py --param lam --values 1,2,4,6,8,16
    python scripts/sweep.py --param calibration_size --values 0,10,25,50,100,200
"""

import argparse

from calspec.calibration import CalibrationConfig, calibrate
from calspec.harness import SWEEP_PARAMS, CostModel, estimate_speedup, sweep
from calspec.synthetic import divergence_fixture


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    ap.add_argument("--values", required=True, help="comma-separated")
    ap.add_argument("--sigma", type=float, default=0.0)
    ap.add_argument("--temperature", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args(argv)

    cast = int if args.param in ("lam", "calibration_size") else float
    values = [cast(v) for v in args.values.split(",")]
    fx = divergence_fixture(sigma=args.sigma)
    cal = CalibrationConfig(seed=1)
    memory = None if args.param == "calibration_size" else calibrate(
        fx.draft, fx.target, fx.calibration_prompts, cal)
    points = sweep(args.param, values, fx.draft, fx.target, fx.eval_prompts,
                   temperature=args.temperature, seed=args.seed, memory=memory,
                   calibration_prompts=fx.calibration_prompts, calibration=cal)
    print(f"{args.param}\tacceptance_rate\trescued\trejections\tspeedup")
    for p in points:
        m = p.result.metrics
        print(f"{p.value:g}\t{m.acceptance_rate:.6f}\t{m.rescued}\t{m.rejections}\t"
              f"{estimate_speedup(m, CostModel()):.6f}")


if __name__ == "__main__":
    main()
