"""In-process verification suite: gradient checks, algorithm equivalence,
truncation and orthonormality contracts, format round-trips.

Each check returns ``(status, detail)`` with status ``PASS``, ``FAIL`` or
``SKIP``. :func:`run_checks` accepts a replacement ``factor_gradients`` so
that a deliberately broken implementation can be shown to be caught.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import model
from .data import IMAGES_MAGIC, LABELS_MAGIC, IdxFormatError, find_mnist, load_mnist, parse_idx, spectral_init
from .dlrt import DlrtConfig, DlrtLayerState, step_efficient, step_fixed_rank, step_reference
from .linalg import qr_orthonormal, svd
from .tensor import fold, frobenius_norm, multi_mode_multiply, unfold
from .tucker import TuckerTensor, from_bytes, to_bytes, truncate

PASS, FAIL, SKIP = "PASS", "FAIL", "SKIP"
FD_STEP = 1e-5
FD_TOL = 1e-6


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function, entry by entry."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def random_tucker(rng, shape, ranks) -> TuckerTensor:
    factors = tuple(qr_orthonormal(rng.standard_normal((n, r)))[0] for n, r in zip(shape, ranks))
    return TuckerTensor(rng.standard_normal(ranks), factors)


def feasible_ranks(ranks) -> bool:
    """Every ``r_i ≤ Π_{j≠i} r_j``, so a generic core has full multilinear rank."""
    total = int(np.prod(ranks))
    return all(r * r <= total for r in ranks)


def random_shape(rng, d, lo=2, hi=6):
    shape = tuple(int(n) for n in rng.integers(lo, hi + 1, d))
    while True:
        ranks = tuple(int(rng.integers(1, n + 1)) for n in shape)
        if feasible_ranks(ranks):
            return shape, ranks


# -- checks ----------------------------------------------------------------------


def check_fold_unfold(rng, **_):
    for _ in range(50):
        d = int(rng.integers(1, 5))
        t = rng.standard_normal(tuple(rng.integers(1, 5, d)))
        for m in range(d):
            if not np.array_equal(fold(unfold(t, m), m, t.shape), t):
                return FAIL, f"mode {m}, shape {t.shape}"
    i, j, k = np.indices((2, 2, 2))
    t = (4 * i + 2 * j + k).astype(np.float64)
    # Kolda: column index of (j, k) in mode-0 unfolding is j + 2k
    expected = np.array([[t[a, c % 2, c // 2] for c in range(4)] for a in range(2)])
    if not np.array_equal(unfold(t, 0), expected):
        return FAIL, "index map of the 2x2x2 example"
    return PASS, "50 random tensors, all modes; 2x2x2 index map"


def check_entrywise_oracle(rng, **_):
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 5))
        shape, ranks = random_shape(rng, d, 1, 4)
        t = random_tucker(rng, shape, ranks)
        oracle = np.zeros(shape)
        for alpha in np.ndindex(*ranks):
            term = t.core[alpha]
            for u, a in zip(t.factors, alpha):
                term = np.multiply.outer(term, u[:, a])
            oracle += term
        worst = max(worst, relative_error(t.reconstruct(), oracle))
    return (PASS if worst <= 1e-12 else FAIL), f"max relative error {worst:.2e}"


def check_qr_svd(rng, **_):
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 9))
        m = rng.standard_normal((n + int(rng.integers(0, 4)), n))
        q, r = qr_orthonormal(m)
        worst = max(worst, np.linalg.norm(q.T @ q - np.eye(n)), relative_error(q @ r, m))
        if np.any(np.diag(r) < 0) or not np.allclose(np.tril(r, -1), 0):
            return FAIL, "R not upper triangular with nonnegative diagonal"
        u, s, v = svd(m)
        worst = max(worst, relative_error(u @ np.diag(s) @ v.T, m))
    q, _ = qr_orthonormal(np.zeros((5, 3)))
    if np.linalg.norm(q.T @ q - np.eye(3)) > 1e-12:
        return FAIL, "deficient input lost full column rank"
    return (PASS if worst <= 1e-12 else FAIL), f"max residual {worst:.2e}"


def check_truncation_contract(rng, **_):
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 5))
        shape, ranks = random_shape(rng, d)
        t = random_tucker(rng, shape, ranks)
        tau = float(10 ** rng.uniform(-4, 0))
        out = truncate(t, tau)
        w = t.reconstruct()
        ratio = frobenius_norm(w - out.reconstruct()) / (tau * frobenius_norm(w))
        worst = max(worst, ratio)
        if out.orthonormality_error() > 1e-10:
            return FAIL, "factors lost orthonormality"
    return (PASS if worst <= 1 + 1e-10 else FAIL), f"max error / budget {worst:.3f}"


def check_layer_gradients(rng, **_):
    worst = 0.0
    # factorized linear under MSE
    w = random_tucker(rng, (4, 5), (3, 2))
    layer = model.FactorizedLinear(w, rng.standard_normal(4))
    x, y = rng.standard_normal((3, 5)), rng.standard_normal((3, 4))
    _, gw, dx = model.full_weight_gradient(layer, x, y)

    def loss_w(dense):
        return model.loss_mse(x @ dense.T + layer.bias, y)[0]

    worst = max(worst, relative_error(gw, finite_difference(loss_w, w.reconstruct())))
    worst = max(worst, relative_error(dx, finite_difference(lambda xx: model.loss_mse(layer.forward(xx)[0], y)[0], x)))
    # conv with padding and stride
    k = random_tucker(rng, (3, 2, 3, 3), (2, 2, 2, 3))
    conv = model.FactorizedConv2d(k, rng.standard_normal(3), stride=2, padding=1)
    xc = rng.standard_normal((2, 2, 5, 5))
    out, cache = conv.forward(xc)
    target = rng.standard_normal(out.shape)
    value, dout = model.loss_mse(out, target)
    grads, dxc = conv.backward(dout, cache)

    def loss_k(kernel):
        return model.loss_mse(model.conv2d_forward(xc, kernel, conv.bias, 2, 1)[0], target)[0]

    worst = max(worst, relative_error(grads["weight"], finite_difference(loss_k, k.reconstruct())))
    worst = max(worst, relative_error(dxc, finite_difference(lambda xx: model.loss_mse(conv.forward(xx)[0], target)[0], xc)))
    return (PASS if worst <= FD_TOL else FAIL), f"max relative error {worst:.2e}"


def check_factor_gradients(rng, factor_gradients=model.factor_gradients, **_):
    worst = 0.0
    for d in (2, 3, 4):
        shape, _ = random_shape(rng, d, 3, 5)
        ranks = tuple(max(1, n - 1) for n in shape)
        t = random_tucker(rng, shape, ranks)
        target = rng.standard_normal(shape)
        weights = rng.standard_normal(shape)

        def loss_dense(dense):
            # non-quadratic so that the check is not degenerate
            return float(np.sum(weights * np.sin(dense)) + 0.5 * np.sum((dense - target) ** 2))

        grad_w = weights * np.cos(t.reconstruct()) + t.reconstruct() - target
        fg = factor_gradients(grad_w, t)
        fd_core = finite_difference(lambda c: loss_dense(TuckerTensor(c, t.factors).reconstruct()), t.core)
        worst = max(worst, relative_error(fg.grad_core, fd_core))
        for i in range(d):
            def loss_u(u, i=i):
                factors = list(t.factors)
                factors[i] = u
                return loss_dense(multi_mode_multiply(t.core, factors))

            worst = max(worst, relative_error(fg.grad_factors[i], finite_difference(loss_u, t.factors[i])))
    return (PASS if worst <= FD_TOL else FAIL), f"max relative error {worst:.2e}"


def check_loss_gradients(rng, **_):
    pred, target = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    worst = relative_error(model.loss_mse(pred, target)[1], finite_difference(lambda p: model.loss_mse(p, target)[0], pred))
    logits, labels = rng.standard_normal((5, 4)), rng.integers(0, 4, 5)
    g = model.loss_softmax_ce(logits, labels)[1]
    worst = max(worst, relative_error(g, finite_difference(lambda z: model.loss_softmax_ce(z, labels)[0], logits)))
    if np.max(np.abs(g.sum(axis=1))) > 1e-14:
        return FAIL, "softmax-CE gradient rows do not sum to zero"
    return (PASS if worst <= FD_TOL else FAIL), f"max relative error {worst:.2e}"


def _quadratic_provider(target):
    return lambda w: w.reconstruct() - target


def check_algorithm_equivalence(rng, **_):
    worst = 0.0
    for _ in range(30):
        d = int(rng.integers(2, 5))
        shape, ranks = random_shape(rng, d, 3, 6)
        t = random_tucker(rng, shape, ranks)
        target = rng.standard_normal(shape)
        cfg = DlrtConfig(tau=float(rng.choice([0.0, 1e-3, 1e-1])), lr=float(rng.uniform(0.01, 0.3)))
        a = step_efficient(DlrtLayerState(t), _quadratic_provider(target), cfg).weight.reconstruct()
        b = step_reference(DlrtLayerState(t), _quadratic_provider(target), cfg).weight.reconstruct()
        worst = max(worst, relative_error(a, b))
    return (PASS if worst <= 1e-9 else FAIL), f"max relative difference {worst:.2e}"


def check_tangent_exactness(rng, **_):
    w0, _ = spectral_init((8, 8, 8), (4, 4, 4), None, seed=int(rng.integers(1 << 30)), scale=1.0)
    target, _ = spectral_init((8, 8, 8), (2, 2, 2), None, seed=int(rng.integers(1 << 30)), scale=1.0)
    target = target.reconstruct()
    cfg = DlrtConfig(tau=0.0, lr=0.1)
    state, dense, worst = DlrtLayerState(w0), w0.reconstruct(), 0.0
    for _ in range(20):
        state = step_efficient(state, _quadratic_provider(target), cfg)
        dense = dense - cfg.lr * (dense - target)
        worst = max(worst, relative_error(state.weight.reconstruct(), dense))
    return (PASS if worst <= 1e-9 else FAIL), f"max deviation from the Euler path {worst:.2e}"


def check_orthonormality(rng, **_):
    worst = 0.0
    for step in (step_efficient, step_reference, step_fixed_rank):
        for _ in range(5):
            shape, ranks = random_shape(rng, 3, 3, 6)
            state = DlrtLayerState(random_tucker(rng, shape, ranks))
            target = rng.standard_normal(shape)
            cfg = DlrtConfig(tau=0.05, lr=0.2, momentum=0.5)
            for _ in range(5):
                state = step(state, _quadratic_provider(target), cfg)
                worst = max(worst, state.weight.orthonormality_error())
    return (PASS if worst <= 1e-10 else FAIL), f"max ||UᵀU - I|| {worst:.2e}"


def check_serialization(rng, **_):
    t = random_tucker(rng, (5, 4, 3), (2, 3, 1))
    back = from_bytes(to_bytes(t))
    same = np.array_equal(back.core, t.core) and all(np.array_equal(a, b) for a, b in zip(back.factors, t.factors))
    return (PASS if same else FAIL), "Tucker container round-trip"


def check_idx_parser(rng, **_):
    images = rng.integers(0, 256, (3, 4, 5), dtype=np.uint8)
    raw = struct.pack(">IIII", IMAGES_MAGIC, 3, 4, 5) + images.tobytes()
    if not np.array_equal(parse_idx(raw, IMAGES_MAGIC), images):
        return FAIL, "round-trip of a synthetic image file"
    for bad in (raw[:-1], struct.pack(">I", LABELS_MAGIC) + raw[4:]):
        try:
            parse_idx(bad, IMAGES_MAGIC)
        except IdxFormatError:
            continue
        return FAIL, "malformed file accepted"
    return PASS, "synthetic file, truncation and bad magic"


def check_mnist_files(rng, data_dir=None, **_):
    paths = find_mnist(data_dir)
    if paths is None:
        return SKIP, "MNIST IDX files not found (set TDLRT_DATA_DIR)"
    train = load_mnist(paths["train_images"], paths["train_labels"])
    test = load_mnist(paths["test_images"], paths["test_labels"])
    ok = train.images.shape[1:] == (28, 28) and set(np.unique(train.labels)) <= set(range(10))
    return (PASS if ok else FAIL), f"{len(train)} train / {len(test)} test images"


CHECKS = [
    ("fold/unfold identity", check_fold_unfold),
    ("Tucker entrywise oracle", check_entrywise_oracle),
    ("QR and SVD contracts", check_qr_svd),
    ("truncation contract", check_truncation_contract),
    ("layer gradients (FD)", check_layer_gradients),
    ("factor/core gradients (FD)", check_factor_gradients),
    ("loss gradients (FD)", check_loss_gradients),
    ("two-tape vs d+1-tape step", check_algorithm_equivalence),
    ("tau=0 exact on tangent flow", check_tangent_exactness),
    ("orthonormality after steps", check_orthonormality),
    ("Tucker container round-trip", check_serialization),
    ("IDX parser", check_idx_parser),
    ("MNIST files", check_mnist_files),
]


@dataclass
class CheckResult:
    name: str
    status: str
    detail: str


def run_checks(seed: int = 0, data_dir=None, factor_gradients: Optional[Callable] = None) -> List[CheckResult]:
    results = []
    kwargs = {"data_dir": data_dir}
    if factor_gradients is not None:
        kwargs["factor_gradients"] = factor_gradients
    for k, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, k])
        try:
            status, detail = fn(rng, **kwargs)
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            status, detail = FAIL, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, status, detail))
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.status:4}  {r.name:<{width}}  {r.detail}" for r in results)


def all_passed(results: List[CheckResult]) -> bool:
    return all(r.status != FAIL for r in results)
