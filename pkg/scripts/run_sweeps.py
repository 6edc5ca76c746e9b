"""Endpoint error of the integrator against the exact gradient flow: step-size and tolerance sweeps."""
import argparse
import json
from pathlib import Path

from tdlrt import experiments as ex


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/sweeps")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = ex.FlowProblem(seed=args.seed)
    lrs = ex.lr_sweep(problem)
    taus = ex.tau_sweep(problem, lr=0.05)
    for r in (lrs, taus):
        for v, e in zip(r.values, r.errors):
            print(f"{r.parameter}={v:<8g} error {e:.3e}")
        print(f"  pairwise orders {[round(o, 3) for o in r.orders]}, slope {r.slope:.3f}")
    (out / "sweeps.json").write_text(json.dumps({"lr": lrs.summary(), "tau": taus.summary()}, indent=2, default=float))


if __name__ == "__main__":
    main()
