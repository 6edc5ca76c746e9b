"""Desk-scale experiments behind the CLI: synthetic recovery, step-size and
tolerance sweeps, robustness against naive factor descent, the stochastic
convergence diagnostic and a LeNet-style MNIST run.

Every run returns plain dataclasses and a list of :class:`TrainRecord` rows
that :func:`write_records` serializes to CSV.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import full_sgd_step, naive_factorized_step, rgd_hosvd_step
from .data import MnistData, SyntheticSpec, make_low_rank_target, random_orthonormal, spectral_init
from .dlrt import STEPS, DlrtConfig, DlrtLayerState, LRSchedule, TDLRTOptimizer, projected_gradient_norm
from .model import (
    DenseLinear,
    FactorizedConv2d,
    FactorizedLayer,
    Flatten,
    MaxPool2d,
    Network,
    QuadraticTensorLoss,
    ReLU,
    factor_gradients,
)
from .tensor import frobenius_norm
from .tucker import TuckerTensor, hosvd, load_tucker, save_tucker

OPTIMIZERS = ("tdlrt", "tdlrt-fixed", "tdlrt-ref", "naive", "rgd", "full")
CSV_HEADER = ("step", "loss", "test_metric", "ranks", "compression_rate", "projected_grad_norm", "wall_ms")
INIT_SEED_OFFSET = 1000


# -- records ------------------------------------------------------------------


def format_ranks(ranks: Sequence[Sequence[int]]) -> str:
    """``((2, 3, 4), (5, 1))`` -> ``"2x3x4;5x1"``."""
    return ";".join("x".join(str(int(r)) for r in layer) for layer in ranks)


def parse_ranks(text: str) -> tuple:
    if not text:
        return ()
    return tuple(tuple(int(r) for r in layer.split("x")) for layer in text.split(";"))


def storage_for(shape: Sequence[int], ranks: Sequence[int]) -> int:
    return int(np.prod(ranks)) + sum(int(n) * int(r) for n, r in zip(shape, ranks))


def network_compression(shapes: Sequence[Sequence[int]], ranks: Sequence[Sequence[int]]) -> float:
    """``1 - c/f`` summed over layers."""
    full = sum(int(np.prod(s)) for s in shapes)
    compressed = sum(storage_for(s, r) for s, r in zip(shapes, ranks))
    return 1.0 - compressed / full


@dataclass
class TrainRecord:
    step: int
    loss: float
    test_metric: Optional[float]
    ranks: tuple  # one rank tuple per factorized layer
    compression_rate: float
    projected_grad_norm: float
    wall_ms: int

    def row(self) -> list:
        metric = "" if self.test_metric is None else repr(float(self.test_metric))
        return [
            self.step,
            repr(float(self.loss)),
            metric,
            format_ranks(self.ranks),
            repr(float(self.compression_rate)),
            repr(float(self.projected_grad_norm)),
            int(self.wall_ms),
        ]

    @classmethod
    def from_row(cls, row: dict) -> "TrainRecord":
        metric = row["test_metric"]
        return cls(
            step=int(row["step"]),
            loss=float(row["loss"]),
            test_metric=None if metric == "" else float(metric),
            ranks=parse_ranks(row["ranks"]),
            compression_rate=float(row["compression_rate"]),
            projected_grad_norm=float(row["projected_grad_norm"]),
            wall_ms=int(row["wall_ms"]),
        )


def write_records(records: Sequence[TrainRecord], target) -> None:
    """Write records as CSV to a path or an open text handle."""
    if isinstance(target, (str, Path)):
        with open(target, "w", newline="") as fh:
            write_records(records, fh)
        return
    writer = csv.writer(target, lineterminator="\r\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.row())


def read_records(source) -> List[TrainRecord]:
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_records(fh)
    reader = csv.DictReader(source)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [TrainRecord.from_row(row) for row in reader]


def records_to_csv(records: Sequence[TrainRecord]) -> str:
    buf = io.StringIO()
    write_records(records, buf)
    return buf.getvalue()


class _Clock:
    def __init__(self):
        self.start = time.perf_counter()

    def ms(self) -> int:
        return int(round(1000 * (time.perf_counter() - self.start)))


# -- synthetic recovery ----------------------------------------------------------


@dataclass
class SyntheticRunConfig:
    shape: Tuple[int, ...] = (20, 20, 20)
    true_ranks: Tuple[int, ...] = (2, 3, 4)
    init_ranks: Tuple[int, ...] = (10, 10, 10)
    tau: float = 0.05
    lr: float = 0.2
    momentum: float = 0.0
    steps: int = 200
    seed: int = 0
    optimizer: str = "tdlrt"
    target_spectrum: object = None  # flat per-mode spectrum
    init_spectrum: object = None
    init_scale: float = 1.0

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.true_ranks = tuple(int(r) for r in self.true_ranks)
        self.init_ranks = tuple(int(r) for r in self.init_ranks)
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if not len(self.shape) == len(self.true_ranks) == len(self.init_ranks):
            raise ValueError("shape, true ranks and init ranks need the same number of modes")
        for n, r0, r1 in zip(self.shape, self.true_ranks, self.init_ranks):
            if not (1 <= r0 <= n and 1 <= r1 <= n):
                raise ValueError(f"ranks must lie in [1, {n}]")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class SyntheticResult:
    config: SyntheticRunConfig
    records: List[TrainRecord]
    final_error: float  # ||W - W*|| / ||W*||
    final_ranks: tuple
    diverged: bool = False
    weights: Optional[list] = None  # dense iterates when requested

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def rank_trace(self) -> list:
        return [r.ranks[0] for r in self.records]

    def summary(self) -> dict:
        return {
            "optimizer": self.config.optimizer,
            "steps": len(self.records) - 1,
            "final_loss": float(self.records[-1].loss),
            "final_error": float(self.final_error),
            "final_ranks": list(self.final_ranks),
            "diverged": self.diverged,
        }


def synthetic_problem(cfg: SyntheticRunConfig):
    """Target tensor and initial Tucker weight for a recovery run."""
    target = make_low_rank_target(SyntheticSpec(cfg.shape, cfg.true_ranks, cfg.target_spectrum, cfg.seed, 1.0))
    w0, _ = spectral_init(cfg.shape, cfg.init_ranks, cfg.init_spectrum, cfg.seed + INIT_SEED_OFFSET, cfg.init_scale)
    return target, w0


def run_synthetic(cfg: SyntheticRunConfig, keep_weights: bool = False) -> SyntheticResult:
    """Quadratic recovery ``½‖W − W*‖²`` with the chosen optimizer."""
    target, w0 = synthetic_problem(cfg)
    loss = QuadraticTensorLoss(target)
    target_norm = frobenius_norm(target)
    full_count = int(np.prod(cfg.shape))
    clock = _Clock()
    dense_opt = cfg.optimizer == "full"
    weight = w0.reconstruct() if dense_opt else w0
    state = DlrtLayerState(w0)
    dconf = DlrtConfig(tau=cfg.tau, lr=cfg.lr, momentum=cfg.momentum)
    velocity = None

    def grad_of(t: TuckerTensor) -> np.ndarray:
        return loss.grad(t.reconstruct())

    def record(step: int):
        dense = weight if dense_opt else weight.reconstruct()
        g = loss.grad(dense)
        if dense_opt:
            ranks, cr, pg = tuple(cfg.shape), 0.0, frobenius_norm(g)
        else:
            ranks = weight.ranks
            cr = 1.0 - storage_for(cfg.shape, ranks) / full_count
            pg = projected_gradient_norm(weight, g)
        err = frobenius_norm(dense - target) / target_norm
        return TrainRecord(step, loss.value(dense), err, (ranks,), cr, pg, clock.ms()), dense

    rec, dense = record(0)
    records = [rec]
    weights = [dense] if keep_weights else None
    diverged = False
    for step in range(1, cfg.steps + 1):
        try:
            if cfg.optimizer in STEPS:
                state = STEPS[cfg.optimizer](state, grad_of, dconf)
                weight = state.weight
            elif cfg.optimizer == "naive":
                fg = factor_gradients(grad_of(weight), weight)
                weight, velocity = naive_factorized_step(weight, fg, cfg.lr, cfg.momentum, velocity)
            elif cfg.optimizer == "rgd":
                weight = rgd_hosvd_step(weight, grad_of(weight), cfg.lr)
            else:
                weight, velocity = full_sgd_step(weight, loss.grad(weight), cfg.lr, cfg.momentum, velocity)
        except FloatingPointError:
            diverged = True
            break
        rec, dense = record(step)
        if not np.isfinite(rec.loss):
            diverged = True
            break
        records.append(rec)
        if keep_weights:
            weights.append(dense)
    final_dense = weight if dense_opt else weight.reconstruct()
    final_error = frobenius_norm(final_dense - target) / target_norm if not diverged else math.inf
    final_ranks = tuple(cfg.shape) if dense_opt else weight.ranks
    return SyntheticResult(cfg, records, final_error, final_ranks, diverged, weights)


# -- descent check ----------------------------------------------------------------


@dataclass
class DescentResult:
    tau: float
    losses: np.ndarray
    increases: np.ndarray  # L_{t+1} - L_t
    grad_sup: np.ndarray  # running sup of ||∇_W L|| up to step t

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(self.increases < 0))

    @property
    def worst_ratio(self) -> float:
        """``max_t (L_{t+1} − L_t) / (β̂_t τ)``; at most 1 when the bound holds."""
        if self.tau == 0:
            return math.inf if np.any(self.increases > 0) else 0.0
        return float(np.max(self.increases / (self.grad_sup * self.tau)))


def run_descent(tau: float, lr: float = 0.01, steps: int = 100, seed: int = 0, init_spectrum=None,
                init_ranks=(6, 6, 6)) -> DescentResult:
    """Per-step loss changes of the adaptive integrator on ``½‖W − W*‖²`` with ``‖W*‖ = 1``."""
    res = run_synthetic(
        SyntheticRunConfig(shape=(10, 10, 10), true_ranks=(2, 3, 4), init_ranks=init_ranks, tau=tau, lr=lr,
                           steps=steps, seed=seed, init_spectrum=init_spectrum)
    )
    losses = np.asarray(res.losses)
    # ∇_W L = W − W*, so ||∇_W L|| = sqrt(2L)
    sup = np.maximum.accumulate(np.sqrt(2 * losses))[:-1]
    return DescentResult(tau, losses, np.diff(losses), sup)


# -- step-size and tolerance sweeps -----------------------------------------------


@dataclass
class FlowProblem:
    """Quadratic flow whose whole trajectory stays on one factor span.

    Target and initial value share orthonormal factors of width ``rank`` and
    have superdiagonal cores with geometric decay, so the exact flow is
    exactly low rank and its core spectra are graded at every scale (which
    keeps the truncation active for every tested tolerance).
    """

    n: int = 28
    rank: int = 20
    ndim: int = 3
    target_decay: float = 0.45
    init_decay: float = 0.5
    horizon: float = 1.0
    seed: int = 0


def _superdiagonal(r: int, d: int, q: float) -> np.ndarray:
    core = np.zeros((r,) * d)
    for k in range(r):
        core[(k,) * d] = q**k
    return core / np.linalg.norm(core)


def flow_problem(p: FlowProblem):
    rng = np.random.default_rng(p.seed)
    factors = tuple(random_orthonormal(p.n, p.rank, rng) for _ in range(p.ndim))
    target = TuckerTensor(_superdiagonal(p.rank, p.ndim, p.target_decay), factors).reconstruct()
    w0 = TuckerTensor(_superdiagonal(p.rank, p.ndim, p.init_decay), factors)
    return w0, target


def flow_endpoint(p: FlowProblem, lr: float, tau: float) -> TuckerTensor:
    steps = int(round(p.horizon / lr))
    if not math.isclose(steps * lr, p.horizon, rel_tol=1e-12):
        raise ValueError(f"horizon {p.horizon} is not a multiple of lr {lr}")
    w0, target = flow_problem(p)
    loss = QuadraticTensorLoss(target)
    state = DlrtLayerState(w0)
    config = DlrtConfig(tau=tau, lr=lr)
    for _ in range(steps):
        state = STEPS["tdlrt"](state, lambda t: loss.grad(t.reconstruct()), config)
    return state.weight


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, dtype=np.float64)), np.log(np.asarray(y, dtype=np.float64))
    return float(np.polyfit(lx, ly, 1)[0])


def pairwise_orders(x, y) -> list:
    return [
        float(math.log(y[i] / y[i + 1]) / math.log(x[i] / x[i + 1])) if y[i] > 0 and y[i + 1] > 0 else math.nan
        for i in range(len(x) - 1)
    ]


@dataclass
class SweepResult:
    parameter: str
    values: list
    errors: list
    orders: list
    slope: float
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return asdict(self)


def lr_sweep(p: FlowProblem = FlowProblem(), lrs=(0.1, 0.05, 0.025)) -> SweepResult:
    """Endpoint error against the exact flow at ``τ = 0`` for each step size."""
    w0, target = flow_problem(p)
    exact = QuadraticTensorLoss(target).exact_flow(w0.reconstruct(), p.horizon)
    errors = [frobenius_norm(flow_endpoint(p, lr, 0.0).reconstruct() - exact) for lr in lrs]
    return SweepResult("lr", list(lrs), errors, pairwise_orders(lrs, errors), loglog_slope(lrs, errors))


def tau_sweep(p: FlowProblem = FlowProblem(), lr: float = 0.05, taus=(1e-4, 1e-3, 1e-2)) -> SweepResult:
    """Tolerance-induced error ``‖W_τ(T) − W_0(T)‖`` at a fixed step size.

    The untruncated run at the same step size is the reference, so the
    step-size error cancels and only the truncation contribution remains.
    Total errors against the exact flow are reported in ``extra``.
    """
    w0, target = flow_problem(p)
    exact = QuadraticTensorLoss(target).exact_flow(w0.reconstruct(), p.horizon)
    base = flow_endpoint(p, lr, 0.0).reconstruct()
    deviations, totals, ranks = [], [], []
    for tau in taus:
        end = flow_endpoint(p, lr, tau)
        dense = end.reconstruct()
        deviations.append(frobenius_norm(dense - base))
        totals.append(frobenius_norm(dense - exact))
        ranks.append(list(end.ranks))
    ratios = [deviations[i + 1] / deviations[i] if deviations[i] > 0 else math.inf for i in range(len(taus) - 1)]
    extra = {
        "lr": lr,
        "total_errors": totals,
        "untruncated_error": frobenius_norm(base - exact),
        "ratios": ratios,
        "final_ranks": ranks,
    }
    return SweepResult("tau", list(taus), deviations, pairwise_orders(taus, deviations), loglog_slope(taus, deviations) if min(deviations) > 0 else math.nan, extra)


# -- robustness -----------------------------------------------------------------


@dataclass
class RobustnessConfig:
    seeds: int = 10
    shape: Tuple[int, ...] = (10, 10, 10)
    true_ranks: Tuple[int, ...] = (2, 3, 4)
    init_ranks: Tuple[int, ...] = (6, 6, 6)
    spectrum: object = "decade"
    lr: float = 0.1
    tau: float = 0.01
    steps: int = 400
    target_loss: float = 1e-3
    optimizers: Tuple[str, ...] = ("tdlrt", "tdlrt-fixed", "naive")
    first_seed: int = 0

    def __post_init__(self):
        if self.seeds < 1:
            raise ValueError("need at least one seed")
        if self.target_loss <= 0:
            raise ValueError("target loss must be positive")
        for name in self.optimizers:
            if name not in OPTIMIZERS:
                raise ValueError(f"unknown optimizer {name!r}")


def steps_to_target(losses: Sequence[float], target: float) -> Optional[int]:
    hits = np.nonzero(np.asarray(losses) <= target)[0]
    return int(hits[0]) if hits.size else None


@dataclass
class OptimizerStats:
    name: str
    steps: list  # censored at the step budget when the target is missed
    reached: int
    diverged: int
    curves: np.ndarray  # seeds x (steps + 1); NaN after divergence

    @property
    def mean_steps(self) -> float:
        return float(np.mean(self.steps))

    @property
    def std_steps(self) -> float:
        return float(np.std(self.steps))

    @property
    def curve_std(self) -> float:
        """Across-seed standard deviation of the loss, averaged over steps."""
        return float(np.nanmean(np.nanstd(self.curves, axis=0)))

    def summary(self) -> dict:
        return {
            "optimizer": self.name,
            "mean_steps": self.mean_steps,
            "std_steps": self.std_steps,
            "reached": self.reached,
            "diverged": self.diverged,
            "curve_std": self.curve_std,
            "mean_final_loss": float(np.nanmean(self.curves[:, -1])),
        }


def run_robustness(cfg: RobustnessConfig) -> dict:
    """Steps-to-target statistics per optimizer from identical spectral inits."""
    out = {}
    for name in cfg.optimizers:
        steps, curves = [], []
        reached = diverged = 0
        for seed in range(cfg.first_seed, cfg.first_seed + cfg.seeds):
            run = run_synthetic(
                SyntheticRunConfig(
                    shape=cfg.shape,
                    true_ranks=cfg.true_ranks,
                    init_ranks=cfg.init_ranks,
                    tau=cfg.tau,
                    lr=cfg.lr,
                    steps=cfg.steps,
                    seed=seed,
                    optimizer=name,
                    init_spectrum=cfg.spectrum,
                )
            )
            curve = np.full(cfg.steps + 1, np.nan)
            curve[: len(run.records)] = run.losses
            curves.append(curve)
            hit = steps_to_target(run.losses, cfg.target_loss)
            reached += hit is not None
            diverged += run.diverged
            steps.append(cfg.steps if hit is None else hit)
        out[name] = OptimizerStats(name, steps, reached, diverged, np.array(curves))
    return out


def robustness_records(stats: OptimizerStats) -> List[TrainRecord]:
    """Mean loss curve across seeds as records (rank and timing fields unused)."""
    mean = np.nanmean(stats.curves, axis=0)
    return [TrainRecord(k, float(v), None, (), 0.0, math.nan, 0) for k, v in enumerate(mean)]


# -- stochastic convergence diagnostic ----------------------------------------------


@dataclass
class DiagnosticConfig:
    shape: Tuple[int, ...] = (10, 10, 10)
    true_ranks: Tuple[int, ...] = (2, 3, 4)
    init_ranks: Tuple[int, ...] = (6, 6, 6)
    samples: int = 1000
    noise: float = 0.1
    batch: int = 32
    lr0: float = 0.5
    decay_steps: float = 50.0
    tau: float = 0.1
    steps: int = 2000
    threshold: float = 1e-4
    seed: int = 0
    stop_at_threshold: bool = False


@dataclass
class DiagnosticResult:
    records: List[TrainRecord]
    squared_norms: np.ndarray  # ||∇L ×_j P_{U_j}||² on the full data set
    running_min: np.ndarray
    hit_step: Optional[int]


def run_convergence_diagnostic(cfg: DiagnosticConfig) -> DiagnosticResult:
    """Mini-batch quadratic ``mean_k ½‖W − Y_k‖²`` with ``λ_t = λ₀/(1 + t/T)``.

    ``Y_k`` are noisy copies of a low-rank tensor; the logged quantity uses
    the full-data gradient ``W − Ȳ``.
    """
    rng = np.random.default_rng(cfg.seed)
    target = make_low_rank_target(SyntheticSpec(cfg.shape, cfg.true_ranks, None, cfg.seed, 1.0))
    samples = target[None] + cfg.noise * rng.standard_normal((cfg.samples,) + tuple(cfg.shape))
    mean = samples.mean(axis=0)
    w0, _ = spectral_init(cfg.shape, cfg.init_ranks, "decade", cfg.seed + INIT_SEED_OFFSET, 1.0)
    config = DlrtConfig(tau=cfg.tau, lr=cfg.lr0, lr_schedule="inverse_time", decay_steps=cfg.decay_steps)
    schedule = LRSchedule(config)
    state = DlrtLayerState(w0)
    full_count = int(np.prod(cfg.shape))
    clock = _Clock()

    def record(step):
        dense = state.weight.reconstruct()
        g = dense - mean
        pg = projected_gradient_norm(state.weight, g)
        value = 0.5 * float(np.mean(np.sum((samples - dense[None]) ** 2, axis=tuple(range(1, dense.ndim + 1)))))
        cr = 1.0 - storage_for(cfg.shape, state.weight.ranks) / full_count
        return TrainRecord(step, value, None, (state.weight.ranks,), cr, pg, clock.ms())

    records = [record(0)]
    best = records[0].projected_grad_norm ** 2
    hit = 0 if best < cfg.threshold else None
    for t in range(cfg.steps):
        if hit is not None and cfg.stop_at_threshold:
            break
        batch = samples[rng.integers(0, cfg.samples, cfg.batch)].mean(axis=0)
        state = STEPS["tdlrt"](state, lambda w: w.reconstruct() - batch, config, lr=schedule.lr_at(t))
        rec = record(t + 1)
        records.append(rec)
        best = min(best, rec.projected_grad_norm ** 2)
        if hit is None and best < cfg.threshold:
            hit = t + 1
    sq = np.array([r.projected_grad_norm ** 2 for r in records])
    return DiagnosticResult(records, sq, np.minimum.accumulate(sq), hit)


# -- MNIST ------------------------------------------------------------------------


@dataclass
class MnistConfig:
    subset: int = 10000
    epochs: int = 3
    tau: float = 0.1
    lr: float = 0.05
    momentum: float = 0.1
    batch: int = 128
    seed: int = 0
    threads: int = 1
    channels: Tuple[int, int] = (20, 50)
    hidden: int = 500
    channel_only: bool = False  # keep spatial kernel modes at full rank
    init_decay: Optional[float] = 0.8  # geometric core spectra; None: HOSVD of a Gaussian kernel
    lr_schedule: str = "plateau"
    plateau_window: int = 20  # steps per plateau evaluation window
    eval_batch: int = 1000

    def __post_init__(self):
        if self.subset < 1 or self.batch < 1:
            raise ValueError("subset and batch must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def _he_kernel(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def tucker_kernel(shape, decay: Optional[float], seed: int, rng) -> TuckerTensor:
    """Full-rank Tucker kernel with He-scaled norm.

    With ``decay`` the core mode spectra fall off as ``decay**k`` so that the
    rounding tolerance, rather than the initial rank, selects the ranks.
    """
    if decay is None:
        return hosvd(_he_kernel(rng, shape), tol=0.0)
    ranks = [min(n, int(np.prod(shape)) // n) for n in shape]
    spectra = [decay ** np.arange(r, dtype=np.float64) for r in ranks]
    norm = math.sqrt(2.0 * shape[0])  # expected norm of a He-initialized kernel
    t, _ = spectral_init(shape, ranks, spectra, seed, norm)
    return t


def build_lenet(cfg: MnistConfig) -> Network:
    """Two Tucker conv layers (5×5) with pooling, then two dense layers."""
    rng = np.random.default_rng(cfg.seed)
    c1, c2 = cfg.channels
    k1 = tucker_kernel((c1, 1, 5, 5), cfg.init_decay, cfg.seed + 11, rng)
    k2 = tucker_kernel((c2, c1, 5, 5), cfg.init_decay, cfg.seed + 12, rng)
    flat = c2 * 4 * 4
    layers = [
        FactorizedConv2d(k1, np.zeros(c1)),
        ReLU(),
        MaxPool2d(2),
        FactorizedConv2d(k2, np.zeros(c2)),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
        DenseLinear(_he_kernel(rng, (cfg.hidden, flat)), np.zeros(cfg.hidden)),
        ReLU(),
        DenseLinear(_he_kernel(rng, (10, cfg.hidden)) * math.sqrt(0.5), np.zeros(10)),
    ]
    return Network(layers)


def conv_shapes(net: Network) -> list:
    return [layer.weight.shape for layer in net.factorized]


def conv_compression(net: Network) -> float:
    return network_compression(conv_shapes(net), [layer.weight.ranks for layer in net.factorized])


def accuracy(net: Network, data: MnistData, batch_size: int = 1000) -> float:
    pred = net.predict(data.images[:, None], batch_size)
    return float(np.mean(pred == data.labels))


def save_network(net: Network, directory) -> None:
    """Tucker containers for the factorized kernels, ``.npy`` files for the rest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, layer in enumerate(net.layers):
        if isinstance(layer, FactorizedLayer):
            save_tucker(layer.weight, directory / f"layer{k}.tdlt")
        for name, arr in layer.parameters().items():
            if isinstance(layer, FactorizedLayer) and name == "weight":
                continue
            np.save(directory / f"layer{k}_{name}.npy", arr)


def load_network(net: Network, directory) -> Network:
    """Restore parameters saved by :func:`save_network` into an identically built ``net``."""
    directory = Path(directory)
    for k, layer in enumerate(net.layers):
        if isinstance(layer, FactorizedLayer):
            layer.weight = load_tucker(directory / f"layer{k}.tdlt")
        for name in layer.parameters():
            if isinstance(layer, FactorizedLayer) and name == "weight":
                continue
            setattr(layer, name, np.load(directory / f"layer{k}_{name}.npy"))
    return net


@dataclass
class MnistResult:
    config: MnistConfig
    records: List[TrainRecord]
    test_accuracy: float
    compression_rate: float
    ranks: list
    wall_seconds: float
    network: Network = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "test_accuracy": self.test_accuracy,
            "compression_rate": self.compression_rate,
            "ranks": [list(r) for r in self.ranks],
            "wall_seconds": self.wall_seconds,
            "steps": len(self.records) - 1,
        }


def train_mnist(cfg: MnistConfig, train: MnistData, test: MnistData, progress: Optional[Callable] = None) -> MnistResult:
    """TDLRT on the Tucker kernels; plain momentum SGD on biases and dense layers.

    Dense parameters use the gradients of the first tape of each step.
    """
    net = build_lenet(cfg)
    train = train.subset(min(cfg.subset, len(train)))
    conv = net.factorized
    conv_idx = [net.layers.index(layer) for layer in conv]
    floors = None
    if cfg.channel_only:
        floors = [(1, 1, layer.weight.shape[2], layer.weight.shape[3]) for layer in conv]
    config = DlrtConfig(
        tau=cfg.tau,
        lr=cfg.lr,
        momentum=cfg.momentum,
        lr_schedule=cfg.lr_schedule,
    )
    opt = TDLRTOptimizer([layer.weight for layer in conv], config, rank_floors=floors)
    velocity = {}
    rng = np.random.default_rng(cfg.seed + 1)
    clock = _Clock()
    shapes = conv_shapes(net)

    def snapshot(step, value, pg, metric=None):
        ranks = tuple(layer.weight.ranks for layer in conv)
        return TrainRecord(step, value, metric, ranks, network_compression(shapes, ranks), pg, clock.ms())

    records = [snapshot(0, math.nan, math.nan, accuracy(net, test, cfg.eval_batch) if cfg.epochs == 0 else None)]
    step = 0
    window = []
    for epoch in range(cfg.epochs):
        for xb, yb in train.batches(cfg.batch, rng):
            tape = {}

            def provider(weights):
                for layer, w in zip(conv, weights):
                    layer.weight = w
                value, grads = net.loss_and_grads(xb, yb, cfg.threads)
                if not tape:
                    tape["value"], tape["grads"] = value, grads
                return [grads[k]["weight"] for k in conv_idx]

            before = opt.weights
            info = opt.step(provider)
            lr = info["lr"]
            for layer, w in zip(conv, opt.weights):
                layer.weight = w
            grads = tape["grads"]
            for k, layer in enumerate(net.layers):
                for name, g in grads[k].items():
                    if isinstance(layer, FactorizedLayer) and name == "weight":
                        continue
                    v = velocity.get((k, name))
                    v = g if v is None else cfg.momentum * v + g
                    velocity[(k, name)] = v
                    setattr(layer, name, getattr(layer, name) - lr * v)
            pg = math.sqrt(
                sum(projected_gradient_norm(w, grads[k]["weight"]) ** 2 for w, k in zip(before, conv_idx))
            )
            step += 1
            window.append(tape["value"])
            if len(window) == cfg.plateau_window:
                opt.schedule.report(float(np.mean(window)))
                window = []
            records.append(snapshot(step, tape["value"], pg))
        acc = accuracy(net, test, cfg.eval_batch)
        records[-1].test_metric = acc
        if progress is not None:
            progress(epoch, acc, records[-1])
    final_acc = records[-1].test_metric
    if final_acc is None:
        final_acc = accuracy(net, test, cfg.eval_batch)
    ranks = [layer.weight.ranks for layer in conv]
    return MnistResult(cfg, records, final_acc, conv_compression(net), ranks, clock.ms() / 1000.0, net)


def dump_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, default=float) + "\n")
