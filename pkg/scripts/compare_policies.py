#!/usr/bin/env python3
"""Compare all decoding policies on a stationary synthetic model.

Prints per-policy mean eTPL and cost-model speedup over a shared prompt set.
"""

import argparse

import numpy as np

from delsim import ModelSpec, SessionConfig, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--prompts", type=int, default=20)
    ap.add_argument("--tokens", type=int, default=512)
    ap.add_argument("--out", default=None, help="optional output directory for traces")
    args = ap.parse_args()

    L = 16
    profile = [0.3] * L
    profile[1] = 0.95  # layer 2 is the specialist
    profile[-1] = 1.0
    cfg = SessionConfig(L=L, V=64, seed=args.seed, max_new_tokens=args.tokens)
    spec = ModelSpec(
        kind="agreement",
        agreement_profile=tuple(profile),
        confidence_match={"dist": "beta", "a": 12, "b": 3},
        confidence_mismatch={"dist": "beta", "a": 3, "b": 12},
    )
    policies = [
        ("vanilla", {}),
        ("ls", {"exit_layer": 2, "gamma": 6}),
        ("fs", {"exit_layer": 2, "gamma": 6}),
        ("dv", {"exit_layer": 2}),
        ("del", {}),
    ]
    reports = run_experiment(spec, cfg, policies, args.prompts, 32, args.out)

    print(f"{'policy':<10} {'mean eTPL':>10} {'speedup':>8}")
    for name, _ in policies:
        vals = [r.etpl for r in reports if r.policy == name]
        mean = float(np.mean(vals))
        print(f"{name:<10} {mean:>10.4f} {mean * L:>7.2f}x")


if __name__ == "__main__":
    main()
