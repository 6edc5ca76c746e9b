"""Steps to a target loss from ill-conditioned inits: TDLRT vs naive factor SGD over seeds."""
import argparse
import json
from pathlib import Path

from tdlrt import experiments as ex


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/robustness")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--steps", type=int, default=400)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = ex.run_robustness(ex.RobustnessConfig(seeds=args.seeds, steps=args.steps))
    for name, s in stats.items():
        ex.write_records(ex.robustness_records(s), out / f"{name}.csv")
        print(f"{name:12s} steps {s.mean_steps:7.1f} ± {s.std_steps:5.1f}  reached {s.reached}/{args.seeds}  "
              f"curve std {s.curve_std:.2e}")
    summary = {name: s.summary() for name, s in stats.items()}
    summary["mean_steps_ratio"] = stats["tdlrt"].mean_steps / stats["naive"].mean_steps
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))


if __name__ == "__main__":
    main()
