import numpy as np
import pytest

from tdlrt.dlrt import (
    DlrtConfig,
    DlrtLayerState,
    LRSchedule,
    NonFiniteGradientError,
    TDLRTOptimizer,
    projected_gradient_norm,
    step_efficient,
    step_fixed_rank,
    step_reference,
)
from tdlrt.tensor import frobenius_norm, unfold
from tdlrt.tucker import TuckerTensor
from tdlrt.verify import relative_error

from conftest import feasible, tucker

ADAPTIVE = [step_efficient, step_reference]


def quadratic(target):
    return lambda w: w.reconstruct() - target


@pytest.mark.parametrize("step", ADAPTIVE + [step_fixed_rank])
def test_norm_loss_one_step_is_euler(rng, step):
    t = tucker(rng, (5, 4, 6), (2, 3, 2))
    state = step(DlrtLayerState(t), lambda w: w.reconstruct(), DlrtConfig(lr=0.1))
    assert relative_error(state.weight.reconstruct(), 0.9 * t.reconstruct()) <= 1e-10


@pytest.mark.parametrize("step", ADAPTIVE + [step_fixed_rank])
def test_zero_gradient_keeps_weight(rng, step):
    t = tucker(rng, (5, 4, 6), (2, 3, 2))
    state = step(DlrtLayerState(t), lambda w: np.zeros(w.shape), DlrtConfig(lr=0.1))
    assert np.max(np.abs(state.weight.reconstruct() - t.reconstruct())) <= 1e-12
    assert state.weight.ranks == t.ranks


@pytest.mark.parametrize("step", ADAPTIVE)
def test_large_tau_collapses_to_floor(rng, step):
    t = tucker(rng, (6, 6, 6), (3, 3, 3))
    target = rng.standard_normal(t.shape)
    assert step(DlrtLayerState(t), quadratic(target), DlrtConfig(tau=1.0, lr=0.1)).weight.ranks == (1, 1, 1)
    cfg = DlrtConfig(tau=2.0, lr=0.1, rank_floor=2)
    assert step(DlrtLayerState(t), quadratic(target), cfg).weight.ranks == (2, 2, 2)


def test_two_tape_equals_reference(rng):
    for _ in range(40):
        d = int(rng.integers(2, 5))
        shape, ranks = feasible(rng, d, 3, 6)
        t = tucker(rng, shape, ranks)
        target = rng.standard_normal(shape)
        cfg = DlrtConfig(tau=float(rng.choice([0.0, 1e-2, 0.2])), lr=float(rng.uniform(0.01, 0.5)))
        a = step_efficient(DlrtLayerState(t), quadratic(target), cfg)
        b = step_reference(DlrtLayerState(t), quadratic(target), cfg)
        assert relative_error(a.weight.reconstruct(), b.weight.reconstruct()) <= 1e-9


def test_two_tape_equals_reference_network_wide(rng):
    ts = [tucker(rng, (4, 5, 3), (2, 2, 2)), tucker(rng, (6, 3), (2, 3))]
    targets = [rng.standard_normal(t.shape) for t in ts]

    def provider(ws):
        # coupled through a shared scalar so each tape depends on both layers
        coupling = sum(float(np.sum(w.reconstruct())) for w in ws)
        return [w.reconstruct() - y + 0.01 * coupling for w, y in zip(ws, targets)]

    cfg = DlrtConfig(tau=0.01, lr=0.1)
    a = step_efficient([DlrtLayerState(t) for t in ts], provider, cfg)
    b = step_reference([DlrtLayerState(t) for t in ts], provider, cfg)
    for x, y in zip(a, b):
        assert relative_error(x.weight.reconstruct(), y.weight.reconstruct()) <= 1e-9


@pytest.mark.parametrize("step", ADAPTIVE)
def test_gradient_in_span_is_well_defined(rng, step):
    t = tucker(rng, (6, 5, 4), (2, 2, 2))
    state = step(DlrtLayerState(t), lambda w: w.reconstruct(), DlrtConfig(lr=0.2))
    state.weight.validate()
    assert state.weight.ranks == (2, 2, 2)


def test_tangent_flow_exact(rng):
    w0 = tucker(rng, (8, 7, 6), (3, 3, 3))
    target = tucker(rng, (8, 7, 6), (2, 2, 2)).reconstruct()
    state, dense = DlrtLayerState(w0), w0.reconstruct()
    for _ in range(30):
        state = step_efficient(state, quadratic(target), DlrtConfig(lr=0.1))
        dense = 0.9 * dense + 0.1 * target
        assert relative_error(state.weight.reconstruct(), dense) <= 1e-9


def test_fixed_rank_keeps_ranks_and_converges(rng):
    target_t = tucker(rng, (7, 6, 5), (2, 3, 2))
    target = target_t.reconstruct()
    w0 = tucker(rng, (7, 6, 5), (2, 3, 2))
    state = DlrtLayerState(w0)
    for _ in range(300):
        state = step_fixed_rank(state, quadratic(target), DlrtConfig(lr=0.3))
        assert state.weight.ranks == (2, 3, 2)
    assert relative_error(state.weight.reconstruct(), target) < 1e-6
    adaptive = DlrtLayerState(w0)
    for _ in range(300):
        adaptive = step_efficient(adaptive, quadratic(target), DlrtConfig(lr=0.3))
    assert relative_error(adaptive.weight.reconstruct(), target) < 1e-6


def test_fixed_rank_under_ranked_plateau(rng):
    target = tucker(rng, (6, 6, 6), (3, 3, 3)).reconstruct()
    bound = 0.0
    for i in range(3):
        s = np.linalg.svd(unfold(target, i), compute_uv=False)
        bound = max(bound, 0.5 * float(np.sum(s[2:] ** 2)))
    state = DlrtLayerState(tucker(rng, (6, 6, 6), (2, 2, 2)))
    losses = []
    for _ in range(200):
        state = step_fixed_rank(state, quadratic(target), DlrtConfig(lr=0.3))
        losses.append(0.5 * frobenius_norm(state.weight.reconstruct() - target) ** 2)
    assert min(losses) >= bound * (1 - 1e-12)
    assert abs(losses[-1] - losses[-20]) <= 1e-6 * losses[-1]


def test_momentum_tracks_core_shape(rng):
    t = tucker(rng, (8, 8, 8), (4, 4, 4))
    target = tucker(rng, (8, 8, 8), (2, 2, 2)).reconstruct()
    state = DlrtLayerState(t)
    cfg = DlrtConfig(tau=0.05, lr=0.2, momentum=0.5)
    seen = set()
    for _ in range(30):
        state = step_efficient(state, quadratic(target), cfg)
        assert state.core_momentum.shape == state.weight.core.shape
        seen.add(state.weight.ranks)
    assert len(seen) > 1
    assert state.rank_trace[0] == (4, 4, 4) and len(state.rank_trace) == 31


def test_momentum_matches_heavy_ball_in_fixed_space(rng):
    # full ranks: bases span everything, so the method is dense heavy-ball
    t = tucker(rng, (3, 3, 3), (3, 3, 3))
    target = rng.standard_normal(t.shape)
    cfg = DlrtConfig(lr=0.1, momentum=0.5)
    state, w, v = DlrtLayerState(t), t.reconstruct(), np.zeros(t.shape)
    for _ in range(10):
        state = step_efficient(state, quadratic(target), cfg)
        v = 0.5 * v + (w - target)
        w = w - 0.1 * v
    assert relative_error(state.weight.reconstruct(), w) <= 1e-9


@pytest.mark.parametrize("step", ADAPTIVE + [step_fixed_rank])
def test_non_finite_gradient_aborts(rng, step):
    t = tucker(rng, (3, 3), (2, 2))
    with pytest.raises(NonFiniteGradientError):
        step(DlrtLayerState(t), lambda w: np.full(w.shape, np.nan), DlrtConfig())
    with pytest.raises(ValueError):
        step(DlrtLayerState(t), lambda w: np.zeros((2, 2)), DlrtConfig())


def test_orthonormality_after_steps(rng):
    for step in ADAPTIVE + [step_fixed_rank]:
        state = DlrtLayerState(tucker(rng, (6, 5, 4), (3, 3, 2)))
        target = rng.standard_normal((6, 5, 4))
        for _ in range(10):
            state = step(state, quadratic(target), DlrtConfig(tau=0.02, lr=0.3, momentum=0.3))
            assert state.weight.orthonormality_error() <= 1e-10


def test_truncation_contract_per_step(rng):
    state = DlrtLayerState(tucker(rng, (6, 6, 6), (3, 3, 3)))
    target = rng.standard_normal((6, 6, 6))
    for tau in (1e-3, 0.05, 0.3):
        info = {}
        step_efficient(state, quadratic(target), DlrtConfig(tau=tau, lr=0.1), info=info)
        pre = info["pre_truncation"][0]
        assert info["truncation_error"][0] <= tau * frobenius_norm(pre.core) * (1 + 1e-12)


def test_projected_gradient_norm(rng):
    t = tucker(rng, (4, 3, 5), (2, 2, 3))
    assert projected_gradient_norm(t, np.zeros(t.shape)) == 0
    in_span = TuckerTensor(rng.standard_normal(t.ranks), t.factors).reconstruct()
    assert projected_gradient_norm(t, in_span) == pytest.approx(frobenius_norm(in_span), rel=1e-12)
    g = rng.standard_normal(t.shape)
    # vec in Fortran order: vec(X ×_j P_j) = (P_3 ⊗ P_2 ⊗ P_1) vec(X)
    p = [u @ u.T for u in t.factors]
    proj = np.kron(p[2], np.kron(p[1], p[0])) @ g.ravel(order="F")
    assert projected_gradient_norm(DlrtLayerState(t), g) == pytest.approx(np.linalg.norm(proj), rel=1e-12)


def test_config_validation():
    for bad in (dict(tau=-1), dict(lr=0), dict(momentum=1.0), dict(rank_floor=0), dict(lr_schedule="cosine")):
        with pytest.raises(ValueError):
            DlrtConfig(**bad)


def test_schedules():
    sched = LRSchedule(DlrtConfig(lr=1.0, lr_schedule="plateau", plateau_patience=2))
    for metric in (5, 4, 4, 4):
        sched.report(metric)
    assert sched.lr_at(0) == pytest.approx(0.1)
    inv = LRSchedule(DlrtConfig(lr=1.0, lr_schedule="inverse_time", decay_steps=50))
    assert inv.lr_at(50) == pytest.approx(0.5)
    const = LRSchedule(DlrtConfig(lr=0.3))
    const.report(1.0)
    assert const.lr_at(1000) == 0.3


def test_optimizer_driver(rng):
    ws = [tucker(rng, (5, 4), (2, 2)), tucker(rng, (3, 4, 5), (2, 2, 2))]
    targets = [rng.standard_normal(w.shape) for w in ws]
    opt = TDLRTOptimizer(ws, DlrtConfig(tau=0.01, lr=0.2), variant="tdlrt-ref", rank_caps=[(3, 3), None])
    for _ in range(5):
        info = opt.step(lambda cur: [w.reconstruct() - y for w, y in zip(cur, targets)])
    assert info["lr"] == 0.2 and opt.step_count == 5
    assert all(r <= 3 for r in opt.weights[0].ranks)
    with pytest.raises(ValueError):
        TDLRTOptimizer(ws, DlrtConfig(), variant="sgd")
