"""Calibrate on the synonym-swap fixture and compare all decoding policies.

    python scripts/divergence_recovery.py --sigma 0.0 --temperature 0.0
"""

import argparse
import sys

from calspec.calibration import CalibrationConfig, calibrate
from calspec.harness import POLICY_NAMES, CostModel, compare_policies, format_rows, make_policy
from calspec.synthetic import divergence_fixture


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigma", type=float, default=0.0, help="draft logit noise")
    ap.add_argument("--strength", type=float, default=1.0, help="synonym swap strength")
    ap.add_argument("--temperature", type=float, default=0.0)
    ap.add_argument("--calibration-prompts", type=int, default=200)
    ap.add_argument("--eval-prompts", type=int, default=100)
    ap.add_argument("--calibration-seed", type=int, default=1)
    ap.add_argument("--seeds", default="3")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    fx = divergence_fixture(args.calibration_prompts, args.eval_prompts,
                            swap_strength=args.strength, sigma=args.sigma)
    mem = calibrate(fx.draft, fx.target, fx.calibration_prompts,
                    CalibrationConfig(seed=args.calibration_seed), workers=args.workers)
    vocab = fx.corpus.vocab
    print(f"# injected pairs: {[tuple(vocab.decode(p)) for p in fx.corpus.pairs]}")
    print(f"# memory: {len(mem)} pairs, {mem.total} rejections")
    for (a, b), n in mem.items()[:8]:
        print(f"#   {vocab.symbol(a)} -> {vocab.symbol(b)}: {n}")

    seeds = [int(s) for s in args.seeds.split(",")]
    results = compare_policies(fx.draft, fx.target, fx.eval_prompts,
                               [make_policy(n) for n in POLICY_NAMES],
                               temperature=args.temperature, seeds=seeds, memory=mem,
                               workers=args.workers)
    sys.stdout.write(format_rows([r.row(CostModel()) for r in results]))
    injected = {frozenset(p) for p in fx.corpus.pairs}
    for r in results:
        spurious = {p: n for p, n in r.rescued_pairs.items() if frozenset(p) not in injected}
        if spurious:
            print(f"# {r.policy} seed {r.seed}: spurious rescues {spurious}")


if __name__ == "__main__":
    main()
