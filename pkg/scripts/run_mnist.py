"""LeNet-style Tucker network on MNIST; needs the IDX files under --data-dir or $TDLRT_DATA_DIR."""
import argparse
import sys
from pathlib import Path

from tdlrt import experiments as ex
from tdlrt.data import find_mnist, load_mnist_splits


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir")
    ap.add_argument("--out", default="results/mnist")
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--channel-only", action="store_true")
    args = ap.parse_args()
    if find_mnist(args.data_dir) is None:
        sys.exit("MNIST IDX files not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ex.MnistConfig(epochs=args.epochs, threads=args.threads, channel_only=args.channel_only)
    train, test = load_mnist_splits(args.data_dir, seed=cfg.seed)

    def progress(epoch, acc, rec):
        print(f"epoch {epoch + 1}: accuracy {acc:.4f}  ranks {ex.format_ranks(rec.ranks)}  c.r. {rec.compression_rate:.3f}")

    res = ex.train_mnist(cfg, train, test, progress)
    ex.write_records(res.records, out / "mnist.csv")
    ex.save_network(res.network, out / "checkpoint")
    ex.dump_summary(res.summary(), out / "summary.json")


if __name__ == "__main__":
    main()
