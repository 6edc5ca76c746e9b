"""Command-line front end: ``tdlrt verify | synthetic | robustness | diagnostic | mnist | fetch-mnist``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import experiments as ex
from .data import DATA_DIR_ENV, fetch_mnist, find_mnist, load_mnist_splits
from .verify import all_passed, format_table, run_checks


def _int_tuple(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def _spectrum(text: str):
    if text == "flat":
        return None
    if text == "decade":
        return "decade"
    raise argparse.ArgumentTypeError("spectrum must be 'flat' or 'decade'")


def _emit(records, out: Optional[str]) -> None:
    if out is None:
        ex.write_records(records, sys.stdout)
    else:
        ex.write_records(records, out)


def _summary(summary: dict, path: Optional[str], stream) -> None:
    text = json.dumps(summary, indent=2, default=float)
    print(text, file=stream)
    if path:
        Path(path).write_text(text + "\n")


# -- commands --------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = run_checks(seed=args.seed, data_dir=args.data_dir)
    print(format_table(results))
    failed = [r for r in results if r.status == "FAIL"]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks without failure")
    return 0 if all_passed(results) else 1


def cmd_synthetic(args) -> int:
    if args.sweep and args.optimizer != "tdlrt":
        raise SystemExit("--sweep measures the tdlrt integrator; drop --optimizer or use tdlrt")
    try:
        cfg = ex.SyntheticRunConfig(
            shape=args.shape,
            true_ranks=args.true_ranks,
            init_ranks=args.init_ranks,
            tau=args.tau,
            lr=args.lr,
            momentum=args.momentum,
            steps=args.steps,
            seed=args.seed,
            optimizer=args.optimizer,
            init_spectrum=args.init_spectrum,
        )
    except ValueError as exc:
        raise SystemExit(f"invalid flags: {exc}")
    result = ex.run_synthetic(cfg)
    _emit(result.records, args.out)
    summary = result.summary()
    if args.sweep:
        problem = ex.FlowProblem(seed=args.seed)
        summary["lr_sweep"] = ex.lr_sweep(problem).summary()
        summary["tau_sweep"] = ex.tau_sweep(problem).summary()
    _summary(summary, args.summary, sys.stderr)
    return 0


def cmd_robustness(args) -> int:
    try:
        cfg = ex.RobustnessConfig(
            seeds=args.seed_count,
            spectrum=args.spectrum,
            target_loss=args.target_loss,
            lr=args.lr,
            tau=args.tau,
            steps=args.steps,
            first_seed=args.seed,
        )
    except ValueError as exc:
        raise SystemExit(f"invalid flags: {exc}")
    stats = ex.run_robustness(cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, s in stats.items():
            ex.write_records(ex.robustness_records(s), out / f"{name}.csv")
    summary = {name: s.summary() for name, s in stats.items()}
    tdlrt, naive = stats.get("tdlrt"), stats.get("naive")
    if tdlrt is not None and naive is not None:
        summary["mean_steps_ratio"] = tdlrt.mean_steps / naive.mean_steps
    _summary(summary, args.summary, sys.stdout)
    return 0


def cmd_diagnostic(args) -> int:
    cfg = ex.DiagnosticConfig(steps=args.steps, lr0=args.lr0, tau=args.tau, batch=args.batch, seed=args.seed)
    result = ex.run_convergence_diagnostic(cfg)
    _emit(result.records, args.out)
    summary = {
        "hit_step": result.hit_step,
        "threshold": cfg.threshold,
        "min_squared_projected_grad": float(result.running_min[-1]),
        "final_ranks": list(result.records[-1].ranks[0]),
    }
    _summary(summary, args.summary, sys.stderr)
    return 0


def cmd_mnist(args) -> int:
    if find_mnist(args.data_dir) is None:
        print(f"MNIST IDX files not found; pass --data-dir or set {DATA_DIR_ENV}", file=sys.stderr)
        return 2
    train, test = load_mnist_splits(args.data_dir, seed=args.seed)
    cfg = ex.MnistConfig(
        subset=args.subset,
        epochs=args.epochs,
        tau=args.tau,
        lr=args.lr,
        momentum=args.momentum,
        batch=args.batch,
        seed=args.seed,
        threads=args.threads,
        channel_only=args.channel_only,
    )

    def progress(epoch, acc, rec):
        print(f"epoch {epoch + 1}: test accuracy {acc:.4f}, ranks {ex.format_ranks(rec.ranks)}, "
              f"c.r. {rec.compression_rate:.3f}", file=sys.stderr)

    result = ex.train_mnist(cfg, train, test, progress)
    _emit(result.records, args.out)
    if args.checkpoint:
        ex.save_network(result.network, args.checkpoint)
    _summary(result.summary(), args.summary, sys.stderr)
    return 0


def cmd_fetch_mnist(args) -> int:
    status = fetch_mnist(args.dest, args.base_url, args.manifest)
    for name, ok in status.items():
        print(f"{name}: {'unverified (manifest written)' if ok is None else 'ok' if ok else 'MISMATCH'}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdlrt", description="Rank-adaptive low-rank training of Tucker layers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the in-process property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synthetic", help="quadratic low-rank recovery")
    p.add_argument("--shape", type=_int_tuple, default=(20, 20, 20))
    p.add_argument("--true-ranks", type=_int_tuple, default=(2, 3, 4))
    p.add_argument("--init-ranks", type=_int_tuple, default=(10, 10, 10))
    p.add_argument("--init-spectrum", type=_spectrum, default=None)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=ex.OPTIMIZERS, default="tdlrt")
    p.add_argument("--sweep", action="store_true", help="also run the step-size and tolerance sweeps")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--summary", help="JSON summary path")
    p.set_defaults(func=cmd_synthetic)

    p = sub.add_parser("robustness", help="steps-to-target over seeds from ill-conditioned inits")
    p.add_argument("--seed-count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--spectrum", type=_spectrum, default="decade")
    p.add_argument("--target-loss", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--out", help="directory for per-optimizer mean-curve CSVs")
    p.add_argument("--summary", help="JSON summary path")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("diagnostic", help="stochastic projected-gradient diagnostic")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr0", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_diagnostic)

    p = sub.add_parser("mnist", help="LeNet-style Tucker network on MNIST")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--subset", type=int, default=10000)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--channel-only", action="store_true", help="keep the spatial kernel modes at full rank")
    p.add_argument("--checkpoint", help="directory for the trained parameters")
    p.add_argument("--out")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_mnist)

    p = sub.add_parser("fetch-mnist", help="download the four gzipped IDX files and check SHA-256")
    p.add_argument("--dest", required=True)
    p.add_argument("--base-url", required=True)
    p.add_argument("--manifest", help="sha256sum-style manifest to verify against")
    p.set_defaults(func=cmd_fetch_mnist)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
