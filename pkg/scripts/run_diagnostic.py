"""Running minimum of the squared projected gradient norm under a decaying step size."""
import argparse
from pathlib import Path

from tdlrt import experiments as ex


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/diagnostic")
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = ex.run_convergence_diagnostic(ex.DiagnosticConfig(steps=args.steps))
    ex.write_records(res.records, out / "diagnostic.csv")
    print(f"min squared projected gradient {res.running_min[-1]:.2e}; below 1e-4 at step {res.hit_step}")


if __name__ == "__main__":
    main()
