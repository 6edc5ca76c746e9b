"""Comparison optimizers: naive factor SGD, Tucker RGD with HOSVD retraction, dense SGD."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .model import FactorGradients
from .tensor import multi_mode_multiply, unfold
from .tucker import TuckerTensor, hosvd


def _finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite update")


def naive_factorized_step(
    weight: TuckerTensor,
    grads: FactorGradients,
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Sequence[np.ndarray]] = None,
):
    """Simultaneous SGD on the core and every factor, no re-orthonormalization.

    Returns ``(new_weight, new_velocity)``; the velocity list holds the core
    buffer first, then one buffer per factor.
    """
    params = [weight.core, *weight.factors]
    g = [grads.grad_core, *grads.grad_factors]
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_v = [momentum * v + gi for v, gi in zip(velocity, g)]
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    _finite(*new_p)
    return TuckerTensor(new_p[0], tuple(new_p[1:])), new_v


def _regularized_pinv_right(s: np.ndarray) -> np.ndarray:
    """``Sᵀ(SSᵀ + εI)⁻¹`` with ``ε = 1e-12‖S‖²``; equals ``S†`` for full row rank."""
    gram = s @ s.T
    eps = 1e-12 * float(np.sum(s * s))
    return np.linalg.solve(gram + eps * np.eye(gram.shape[0]), s).T


def tangent_projection(weight: TuckerTensor, x) -> np.ndarray:
    """Orthogonal projection of ``x`` onto the tangent space of fixed-rank Tucker tensors at ``weight``.

    ``P(W)X = δC ×_i U_i + Σ_j C ×_j δU_j ×_{k≠j} U_k`` with
    ``δC = X ×_i U_iᵀ`` and
    ``δU_j = (I − U_jU_jᵀ) Mat_j(X ×_{k≠j} U_kᵀ) Mat_j(C)†``.
    """
    x = np.asarray(x, dtype=np.float64)
    core, factors = weight.core, weight.factors
    d = weight.ndim
    delta_core = multi_mode_multiply(x, factors, transpose=True)
    out = multi_mode_multiply(delta_core, factors)
    for j in range(d):
        partial = multi_mode_multiply(x, [None if k == j else u for k, u in enumerate(factors)], transpose=True)
        u = factors[j]
        a = unfold(partial, j)
        a = a - u @ (u.T @ a)
        delta_u = a @ _regularized_pinv_right(unfold(core, j))
        term = [u if k != j else delta_u for k, u in enumerate(factors)]
        out = out + multi_mode_multiply(core, term)
    return out


def rgd_hosvd_step(weight: TuckerTensor, grad_w, lr: float) -> TuckerTensor:
    """Riemannian gradient step followed by a fixed-rank HOSVD retraction."""
    g = tangent_projection(weight, grad_w)
    moved = weight.reconstruct() - lr * g
    _finite(moved)
    return hosvd(moved, ranks=weight.ranks)


def full_sgd_step(w, grad_w, lr: float, momentum: float = 0.0, velocity=None):
    """Dense momentum SGD ``v ← βv + ∇``, ``W ← W − λv``; returns ``(W, v)``."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(grad_w, dtype=np.float64)
    v = g if velocity is None else momentum * velocity + g
    return w - lr * v, v
