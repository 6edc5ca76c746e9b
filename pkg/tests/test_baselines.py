import numpy as np
import pytest

from tdlrt.baselines import full_sgd_step, naive_factorized_step, rgd_hosvd_step, tangent_projection
from tdlrt.data import spectral_init
from tdlrt.dlrt import DlrtConfig, DlrtLayerState, step_efficient
from tdlrt.model import FactorGradients, factor_gradients
from tdlrt.tensor import frobenius_norm, inner
from tdlrt.tucker import TuckerTensor
from tdlrt.verify import relative_error

from conftest import tucker


def test_naive_zero_gradients_unchanged(rng):
    t = tucker(rng, (4, 5, 3), (2, 2, 2))
    zero = FactorGradients(np.zeros(t.ranks), tuple(np.zeros_like(u) for u in t.factors))
    out, _ = naive_factorized_step(t, zero, 0.1)
    assert np.array_equal(out.core, t.core) and all(np.array_equal(a, b) for a, b in zip(out.factors, t.factors))


def test_naive_leaves_stiefel(rng):
    t = tucker(rng, (5, 5, 5), (2, 2, 2))
    target = rng.standard_normal(t.shape)
    out, _ = naive_factorized_step(t, factor_gradients(t.reconstruct() - target, t), 0.1)
    assert out.orthonormality_error() > 1e-6


def test_naive_momentum_and_non_finite(rng):
    t = tucker(rng, (3, 3), (2, 2))
    g = factor_gradients(rng.standard_normal((3, 3)), t)
    _, v1 = naive_factorized_step(t, g, 0.1, 0.9)
    _, v2 = naive_factorized_step(t, g, 0.1, 0.9, v1)
    np.testing.assert_allclose(v2[0], 1.9 * g.grad_core)
    bad = FactorGradients(np.full(t.ranks, np.inf), g.grad_factors)
    with pytest.raises(FloatingPointError):
        naive_factorized_step(t, bad, 0.1)


def test_naive_slower_on_ill_conditioned_core():
    w0, _ = spectral_init((8, 8, 8), (3, 3, 3), [1.0, 1e-3, 1e-6], seed=3, scale=0.0)
    target, _ = spectral_init((8, 8, 8), (3, 3, 3), None, seed=4, scale=1.0)
    target = target.reconstruct()

    def loss(w):
        return 0.5 * frobenius_norm(w.reconstruct() - target) ** 2

    naive, state = w0, DlrtLayerState(w0)
    naive_curve, tdlrt_curve = [], []
    for _ in range(100):
        naive, _ = naive_factorized_step(naive, factor_gradients(naive.reconstruct() - target, naive), 0.1)
        state = step_efficient(state, lambda w: w.reconstruct() - target, DlrtConfig(tau=0.01, lr=0.1))
        naive_curve.append(loss(naive))
        tdlrt_curve.append(loss(state.weight))
    assert tdlrt_curve[-1] < 1e-3 * naive_curve[-1]
    assert sum(t < n for t, n in zip(tdlrt_curve, naive_curve)) >= 95


def test_rgd_tangent_step_is_euler(rng):
    w = tucker(rng, (6, 5, 4), (2, 3, 2))
    target = TuckerTensor(rng.standard_normal(w.ranks), w.factors).reconstruct()
    out = rgd_hosvd_step(w, w.reconstruct() - target, 0.2)
    euler = 0.8 * w.reconstruct() + 0.2 * target
    assert relative_error(out.reconstruct(), euler) <= 1e-9
    assert out.ranks == w.ranks


def test_rgd_zero_gradient_and_rank_preservation(rng):
    w = tucker(rng, (6, 5, 4), (2, 3, 2))
    out = rgd_hosvd_step(w, np.zeros(w.shape), 0.3)
    assert relative_error(out.reconstruct(), w.reconstruct()) <= 1e-12
    for _ in range(5):
        out = rgd_hosvd_step(out, rng.standard_normal(w.shape), 0.1)
        assert out.ranks == w.ranks
        out.validate()


def test_tangent_projection_properties(rng):
    w = tucker(rng, (5, 6, 4), (2, 3, 2))
    x = rng.standard_normal(w.shape)
    px = tangent_projection(w, x)
    assert relative_error(tangent_projection(w, px), px) <= 1e-10
    assert abs(inner(x - px, px)) <= 1e-10 * frobenius_norm(x) ** 2
    assert frobenius_norm(px) <= frobenius_norm(x) * (1 + 1e-10)
    # W itself and core perturbations are tangent
    assert relative_error(tangent_projection(w, w.reconstruct()), w.reconstruct()) <= 1e-10


def test_tangent_projection_survives_ill_conditioned_core(rng):
    w, _ = spectral_init((6, 6, 6), (3, 3, 3), [1.0, 1e-3, 1e-6], seed=7, scale=0.0)
    px = tangent_projection(w, rng.standard_normal(w.shape))
    assert np.all(np.isfinite(px))


def test_full_sgd(rng):
    w, g = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    out, _ = full_sgd_step(w, g, 0.1)
    np.testing.assert_allclose(out, w - 0.1 * g)
    g2 = rng.standard_normal((3, 4))
    w1, v1 = full_sgd_step(w, g, 0.1, 0.9)
    w2, _ = full_sgd_step(w1, g2, 0.1, 0.9, v1)
    np.testing.assert_allclose(w2, w - 0.1 * g - 0.1 * (0.9 * g + g2), rtol=1e-14)
    same, _ = full_sgd_step(w, np.zeros_like(w), 0.1)
    assert np.array_equal(same, w)
