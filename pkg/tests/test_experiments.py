import csv
import dataclasses
import io
import struct

import numpy as np
import pytest

from tdlrt import data
from tdlrt import experiments as ex


def small(**kw):
    base = dict(shape=(8, 8, 8), true_ranks=(2, 2, 3), init_ranks=(4, 4, 4), steps=15, lr=0.2, tau=0.05)
    base.update(kw)
    return ex.SyntheticRunConfig(**base)


def test_ranks_format_round_trip():
    assert ex.format_ranks(((2, 3, 4), (5, 1))) == "2x3x4;5x1"
    assert ex.parse_ranks("2x3x4;5x1") == ((2, 3, 4), (5, 1))
    assert ex.parse_ranks("") == ()


def test_csv_schema_and_round_trip(tmp_path):
    res = ex.run_synthetic(small())
    path = tmp_path / "run.csv"
    ex.write_records(res.records, path)
    raw = path.read_bytes()
    assert raw.startswith(b"step,loss,test_metric,ranks,compression_rate,projected_grad_norm,wall_ms\r\n")
    rows = list(csv.reader(io.StringIO(raw.decode(), newline="")))
    assert all(len(r) == len(ex.CSV_HEADER) for r in rows)
    assert len(rows) == 1 + 16
    back = ex.read_records(path)
    assert back == res.records
    with pytest.raises(ValueError):
        ex.read_records(io.StringIO("a,b\n1,2\n"))


def test_steps_zero_gives_initial_record():
    res = ex.run_synthetic(small(steps=0))
    assert len(res.records) == 1 and res.records[0].step == 0


def test_compression_consistent_with_ranks():
    res = ex.run_synthetic(small())
    for rec in res.records:
        expected = 1 - ex.storage_for((8, 8, 8), rec.ranks[0]) / 512
        assert rec.compression_rate == pytest.approx(expected, abs=1e-15)


def test_runs_reproducible_except_wall_clock():
    a, b = ex.run_synthetic(small(seed=3)), ex.run_synthetic(small(seed=3))
    strip = [dataclasses.replace(r, wall_ms=0) for r in a.records]
    assert strip == [dataclasses.replace(r, wall_ms=0) for r in b.records]


@pytest.mark.parametrize("name", ex.OPTIMIZERS)
def test_every_optimizer_runs(name):
    res = ex.run_synthetic(small(optimizer=name, steps=5, momentum=0.1))
    assert len(res.records) == 6 and np.isfinite(res.final_error)
    assert res.records[-1].loss < res.records[0].loss


def test_tau_zero_tdlrt_tracks_full_sgd():
    a = ex.run_synthetic(small(tau=0.0, optimizer="tdlrt", steps=30), keep_weights=True)
    b = ex.run_synthetic(small(tau=0.0, optimizer="full", steps=30), keep_weights=True)
    for x, y in zip(a.weights, b.weights):
        assert np.linalg.norm(x - y) <= 1e-9 * np.linalg.norm(y)


def test_config_validation():
    with pytest.raises(ValueError):
        small(optimizer="adam")
    with pytest.raises(ValueError):
        small(init_ranks=(9, 1, 1))
    with pytest.raises(ValueError):
        small(steps=-1)
    with pytest.raises(ValueError):
        ex.RobustnessConfig(seeds=0)


def test_flow_problem_is_on_one_span():
    p = ex.FlowProblem(n=10, rank=6)
    w0, target = ex.flow_problem(p)
    assert w0.ranks == (6, 6, 6)
    proj = ex.TuckerTensor(ex.hosvd(target, ranks=(6, 6, 6)).core, ex.hosvd(target, ranks=(6, 6, 6)).factors)
    assert np.linalg.norm(proj.reconstruct() - target) < 1e-12
    with pytest.raises(ValueError):
        ex.flow_endpoint(p, 0.3, 0.0)


def test_slopes():
    x = [0.1, 0.05, 0.025]
    y = [2 * v**1.5 for v in x]
    assert ex.loglog_slope(x, y) == pytest.approx(1.5)
    assert ex.pairwise_orders(x, y) == pytest.approx([1.5, 1.5])


def test_robustness_identical_seeds_identical_curves():
    cfg = ex.RobustnessConfig(seeds=2, steps=20, optimizers=("tdlrt", "naive"))
    a, b = ex.run_robustness(cfg), ex.run_robustness(cfg)
    for name in a:
        assert np.array_equal(a[name].curves, b[name].curves)
    assert ex.steps_to_target([3.0, 2.0, 0.5], 1.0) == 2
    assert ex.steps_to_target([3.0], 1.0) is None


def test_naive_small_step_reaches_target():
    res = ex.run_synthetic(
        ex.SyntheticRunConfig(
            shape=(10, 10, 10), true_ranks=(2, 3, 4), init_ranks=(6, 6, 6), lr=0.02, steps=2000,
            optimizer="naive", init_spectrum="decade",
        )
    )
    assert ex.steps_to_target(res.losses, 1e-3) is not None


def test_diagnostic_short_run():
    res = ex.run_convergence_diagnostic(ex.DiagnosticConfig(steps=50))
    assert len(res.records) == 51
    assert np.all(np.diff(res.running_min) <= 0)
    assert res.running_min[-1] < res.squared_norms[0]


# -- MNIST harness on synthetic IDX files --------------------------------------------


def write_fake_mnist(root, rng, n_train=300, n_test=500):
    def idx(arr, magic):
        return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()

    # class k lights up a k-dependent stripe so that training has signal
    def sample(n):
        labels = rng.integers(0, 10, n)
        images = rng.integers(0, 60, (n, 28, 28))
        for i, k in enumerate(labels):
            images[i, 2 * k : 2 * k + 4, 4:24] = 255
        return images, labels

    for split, n in (("train", n_train), ("t10k", n_test)):
        images, labels = sample(n)
        stem = "train" if split == "train" else "t10k"
        (root / f"{stem}-images-idx3-ubyte").write_bytes(idx(images, data.IMAGES_MAGIC))
        (root / f"{stem}-labels-idx1-ubyte").write_bytes(idx(labels, data.LABELS_MAGIC))


@pytest.fixture
def fake_mnist(tmp_path, rng):
    write_fake_mnist(tmp_path, rng)
    return data.load_mnist_splits(tmp_path, seed=0)


def tiny_cfg(**kw):
    base = dict(subset=256, epochs=1, batch=64, channels=(4, 6), hidden=32, plateau_window=2)
    base.update(kw)
    return ex.MnistConfig(**base)


def test_untrained_accuracy_is_chance(fake_mnist):
    train, test = fake_mnist
    res = ex.train_mnist(tiny_cfg(epochs=0), train, test)
    assert len(res.records) == 1
    assert abs(res.test_accuracy - 0.1) <= 0.05


def test_training_and_checkpoint_round_trip(fake_mnist, tmp_path):
    train, test = fake_mnist
    res = ex.train_mnist(tiny_cfg(epochs=2), train, test)
    assert res.records[-1].test_metric == res.test_accuracy
    assert res.test_accuracy > 0.5
    assert all(len(r.ranks) == 2 for r in res.records)
    ex.save_network(res.network, tmp_path / "ckpt")
    fresh = ex.load_network(ex.build_lenet(tiny_cfg()), tmp_path / "ckpt")
    assert ex.accuracy(fresh, test) == res.test_accuracy
    assert np.array_equal(fresh.predict(test.images[:, None]), res.network.predict(test.images[:, None]))


def test_threads_do_not_change_results(fake_mnist):
    train, test = fake_mnist
    a = ex.train_mnist(tiny_cfg(threads=1), train, test)
    b = ex.train_mnist(tiny_cfg(threads=3), train, test)
    assert len(a.records) == len(b.records)
    for x, y in zip(a.records, b.records):
        assert x.ranks == y.ranks
        assert x.loss == pytest.approx(y.loss, rel=1e-12, abs=1e-12, nan_ok=True)
    assert a.test_accuracy == b.test_accuracy


def test_channel_only_keeps_spatial_modes(fake_mnist):
    train, test = fake_mnist
    res = ex.train_mnist(tiny_cfg(channel_only=True, tau=0.5), train, test)
    for ranks in res.ranks:
        assert ranks[2:] == (5, 5)


def test_initial_kernel_has_decaying_spectra():
    k = ex.tucker_kernel((6, 4, 5, 5), 0.8, 0, np.random.default_rng(0))
    k.validate()
    assert k.ranks == (6, 4, 5, 5)
    assert np.linalg.norm(k.core) == pytest.approx(np.sqrt(12.0))
