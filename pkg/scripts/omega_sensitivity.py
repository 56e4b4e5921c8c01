#!/usr/bin/env python3
"""Sweep the statistics decay factor and report its effect on throughput."""

import argparse

from delsim import ModelSpec, SessionConfig
from delsim.harness import omega_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=8)
    ap.add_argument("--prompts", type=int, default=6)
    ap.add_argument("--tokens", type=int, default=512)
    ap.add_argument("--omegas", default="0.5,0.6,0.7,0.8,0.9,0.95,1.0")
    args = ap.parse_args()

    L = 8
    profile = [0.3] * L
    profile[0] = 0.95
    profile[-1] = 1.0
    cfg = SessionConfig(L=L, V=32, seed=args.seed, max_new_tokens=args.tokens)
    spec = ModelSpec(
        kind="agreement",
        agreement_profile=tuple(profile),
        confidence_match={"dist": "beta", "a": 12, "b": 3},
        confidence_mismatch={"dist": "beta", "a": 3, "b": 12},
    )
    rows = omega_sweep(spec, cfg, [float(w) for w in args.omegas.split(",")],
                       args.prompts, 32)
    print(f"{'omega':>6} {'eTPL':>8} {'speedup':>8} {'exit switches':>14}")
    for r in rows:
        print(f"{r['omega']:>6.2f} {r['etpl']:>8.4f} {r['sim_speedup']:>7.2f}x "
              f"{r['exit_switches']:>14}")
    speeds = [r["sim_speedup"] for r in rows]
    print(f"spread: {(max(speeds) - min(speeds)) / max(speeds) * 100:.2f}% of max")


if __name__ == "__main__":
    main()
