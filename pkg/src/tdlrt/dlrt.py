"""Rank-adaptive dynamical low-rank training of Tucker layers.

Three step functions share one core stage:

* :func:`step_efficient`: augments every basis with ``∇_{U_i} L`` from a
  single gradient tape, then a second tape gives the core descent direction.
* :func:`step_reference`: forms ``K_i = U_i S_i``, takes a descent step on
  each ``K_i`` (one tape per mode), augments with the old basis and then
  runs the same core stage (``d + 1`` tapes).
* :func:`step_fixed_rank`: K-step without augmentation; ranks never change.

A gradient provider maps the current Tucker weights to dense ``∇_W L``
arrays, one per layer, for a fixed mini-batch. Step functions accept either
one :class:`DlrtLayerState` (provider takes and returns single values) or a
list of them (provider takes and returns lists).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .linalg import orthonormal_basis
from .model import core_qr, factor_gradients, k_gradient
from .tensor import fold, frobenius_norm, multi_mode_multiply
from .tucker import TuckerTensor, hosvd, truncate_with_rotations

GradProvider = Callable


class NonFiniteGradientError(FloatingPointError):
    """A gradient tape produced NaN or Inf; the step was aborted."""


@dataclass
class DlrtConfig:
    tau: float = 0.0
    lr: float = 0.01
    momentum: float = 0.0
    adaptive: bool = True
    rank_floor: Union[int, Sequence[int]] = 1
    rank_cap: Optional[Sequence[int]] = None
    lr_schedule: str = "constant"  # constant | plateau | inverse_time
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    decay_steps: float = 50.0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        floors = [self.rank_floor] if isinstance(self.rank_floor, int) else list(self.rank_floor)
        if min(floors) < 1:
            raise ValueError("rank floor must be at least 1")
        if self.lr_schedule not in ("constant", "plateau", "inverse_time"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class DlrtLayerState:
    weight: TuckerTensor
    core_momentum: Optional[np.ndarray] = None
    rank_trace: list = field(default_factory=list)
    # per-layer overrides of the config's floors and caps
    rank_floor: Optional[Sequence[int]] = None
    rank_cap: Optional[Sequence[int]] = None

    def __post_init__(self):
        if not self.rank_trace:
            self.rank_trace = [self.weight.ranks]


class LRSchedule:
    """Learning-rate schedule; ``report`` feeds the plateau rule a metric to minimize."""

    def __init__(self, config: DlrtConfig):
        self.config = config
        self.base = config.lr
        self.scale = 1.0
        self._best = math.inf
        self._stale = 0

    def lr_at(self, step: int) -> float:
        if self.config.lr_schedule == "inverse_time":
            return self.base / (1.0 + step / self.config.decay_steps)
        return self.base * self.scale

    def report(self, metric: float) -> None:
        if self.config.lr_schedule != "plateau":
            return
        if metric < self._best:
            self._best = metric
            self._stale = 0
            return
        self._stale += 1
        if self._stale >= self.config.plateau_patience:
            self.scale *= self.config.plateau_factor
            self._stale = 0


# -- helpers ------------------------------------------------------------------


def _normalize(states, grad_provider):
    if isinstance(states, DlrtLayerState):
        def provider(weights):
            return [grad_provider(weights[0])]
        return [states], provider, True
    return list(states), grad_provider, False


def _tape(provider, weights) -> List[np.ndarray]:
    grads = [np.asarray(g, dtype=np.float64) for g in provider(weights)]
    if len(grads) != len(weights):
        raise ValueError("gradient provider returned the wrong number of gradients")
    for g, w in zip(grads, weights):
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {w.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; step aborted")
    return grads


def _floors(state: DlrtLayerState, config: DlrtConfig):
    return state.rank_floor if state.rank_floor is not None else config.rank_floor


def _caps(state: DlrtLayerState, config: DlrtConfig):
    return state.rank_cap if state.rank_cap is not None else config.rank_cap


def _basis_change(new_bases, old_bases):
    return [un.T @ u for un, u in zip(new_bases, old_bases)]


def _core_stage(states, new_bases, provider, config, lr, rounding, info):
    """Lift the core onto the new bases, descend once, then round."""
    lifted = []
    for s, bases in zip(states, new_bases):
        change = _basis_change(bases, s.weight.factors)
        core = multi_mode_multiply(s.weight.core, change)
        mom = None
        if config.momentum > 0 and s.core_momentum is not None:
            mom = multi_mode_multiply(s.core_momentum, change)
        lifted.append((TuckerTensor(core, tuple(bases)), mom))
    grads_w = _tape(provider, [t for t, _ in lifted])
    out = []
    pre_list, err_list = [], []
    for s, (t, mom), g in zip(states, lifted, grads_w):
        grad_core = multi_mode_multiply(g, t.factors, transpose=True)
        direction = grad_core if mom is None else config.momentum * mom + grad_core
        pre = TuckerTensor(t.core - lr * direction, t.factors)
        post, rotations = rounding(s, pre)
        if config.momentum > 0:
            direction = multi_mode_multiply(direction, rotations, transpose=True)
            new_mom = direction
        else:
            new_mom = None
        pre_list.append(pre)
        # factors share U_new, so the error is measured on the cores
        err_list.append(
            frobenius_norm(pre.core - multi_mode_multiply(post.core, rotations))
        )
        out.append(
            dataclasses.replace(
                s,
                weight=post,
                core_momentum=new_mom,
                rank_trace=s.rank_trace + [post.ranks],
            )
        )
    if info is not None:
        info["pre_truncation"] = pre_list
        info["truncation_error"] = err_list
        info["core_grad_w"] = grads_w
    return out


def _adaptive_rounding(config):
    def rounding(state, pre):
        if config.adaptive:
            return truncate_with_rotations(pre, config.tau, _floors(state, config), _caps(state, config))
        # fixed-rank rounding back to the incoming ranks
        ranks = state.weight.ranks
        small = hosvd(pre.core, ranks=ranks)
        factors = tuple(u @ r for u, r in zip(pre.factors, small.factors))
        return TuckerTensor(small.core, factors), list(small.factors)
    return rounding


def _identity_rounding(state, pre):
    return pre, [np.eye(r) for r in pre.ranks]


def _augmented_width(u: np.ndarray) -> int:
    n, r = u.shape
    return min(2 * r, n)


# -- step functions -------------------------------------------------------------


def step_efficient(states, grad_provider: GradProvider, config: DlrtConfig, lr: Optional[float] = None, info: Optional[dict] = None):
    """One two-tape step: augment with factor gradients, project, descend, round."""
    states, provider, single = _normalize(states, grad_provider)
    lr = config.lr if lr is None else lr
    grads_w = _tape(provider, [s.weight for s in states])
    new_bases = []
    for s, g in zip(states, grads_w):
        fg = factor_gradients(g, s.weight)
        bases = []
        for u, gu in zip(s.weight.factors, fg.grad_factors):
            bases.append(orthonormal_basis(np.hstack([u, gu]), _augmented_width(u)))
        new_bases.append(bases)
    if info is not None:
        info["grad_w"] = grads_w
    out = _core_stage(states, new_bases, provider, config, lr, _adaptive_rounding(config), info)
    return out[0] if single else out


def step_reference(states, grad_provider: GradProvider, config: DlrtConfig, lr: Optional[float] = None, info: Optional[dict] = None):
    """One ``d + 1``-tape step with an explicit descent on every ``K_i = U_i S_i``.

    Mode ``i`` gets its own tape evaluated at the reparametrized weight
    ``Ten_i(Q_iᵀ) ×_{j≠i} U_j ×_i K_i``; the K-gradient is ``Mat_i(∇_W) V_i``.
    """
    states, provider, single = _normalize(states, grad_provider)
    lr = config.lr if lr is None else lr
    d_max = max(s.weight.ndim for s in states)
    new_bases = [[None] * s.weight.ndim for s in states]
    first_grads = None
    for mode in range(d_max):
        params, tape_weights = [], []
        for s in states:
            w = s.weight
            if mode >= w.ndim:
                params.append(None)
                tape_weights.append(w)
                continue
            q, sfac = core_qr(w.core, mode)
            k = w.factors[mode] @ sfac
            ten_shape = list(w.ranks)
            ten_shape[mode] = q.shape[1]
            ten_q = fold(q.T, mode, ten_shape)
            factors = list(w.factors)
            factors[mode] = k
            params.append((q, k))
            tape_weights.append(TuckerTensor(ten_q, tuple(factors)))
        grads_w = _tape(provider, tape_weights)
        if first_grads is None:
            first_grads = grads_w
        for idx, (s, p, g) in enumerate(zip(states, params, grads_w)):
            if p is None:
                continue
            q, k = p
            u = s.weight.factors[mode]
            k_new = k - lr * k_gradient(g, s.weight, mode, q)
            if config.adaptive:
                basis = orthonormal_basis(np.hstack([k_new, u]), _augmented_width(u))
            else:
                basis = orthonormal_basis(k_new, u.shape[1])
            new_bases[idx][mode] = basis
    if info is not None:
        info["grad_w"] = first_grads
    rounding = _adaptive_rounding(config) if config.adaptive else _identity_rounding
    out = _core_stage(states, new_bases, provider, config, lr, rounding, info)
    return out[0] if single else out


def step_fixed_rank(states, grad_provider: GradProvider, config: DlrtConfig, lr: Optional[float] = None, info: Optional[dict] = None):
    """Two-tape fixed-rank step: K-step re-orthonormalized at width ``r_i``, then the core.

    All K-gradients come from the first tape since every reparametrization
    evaluates the same weight.
    """
    states, provider, single = _normalize(states, grad_provider)
    lr = config.lr if lr is None else lr
    grads_w = _tape(provider, [s.weight for s in states])
    new_bases = []
    for s, g in zip(states, grads_w):
        w = s.weight
        bases = []
        for mode, u in enumerate(w.factors):
            q, sfac = core_qr(w.core, mode)
            k_new = u @ sfac - lr * k_gradient(g, w, mode, q)
            bases.append(orthonormal_basis(k_new, u.shape[1]))
        new_bases.append(bases)
    if info is not None:
        info["grad_w"] = grads_w
    out = _core_stage(states, new_bases, provider, config, lr, _identity_rounding, info)
    return out[0] if single else out


STEPS = {
    "tdlrt": step_efficient,
    "tdlrt-ref": step_reference,
    "tdlrt-fixed": step_fixed_rank,
}


def projected_gradient_norm(state, grad_w) -> float:
    """``‖∇_W ×_j U_j U_jᵀ‖`` for the factors of ``state`` (state or Tucker weight)."""
    weight = state.weight if isinstance(state, DlrtLayerState) else state
    proj = multi_mode_multiply(np.asarray(grad_w, dtype=np.float64), weight.factors, transpose=True)
    # ‖X ×_j U_jU_jᵀ‖ = ‖X ×_j U_jᵀ‖ for orthonormal U_j
    return frobenius_norm(multi_mode_multiply(proj, weight.factors))


class TDLRTOptimizer:
    """Stateful driver around the step functions for a list of layers."""

    def __init__(self, weights: Sequence[TuckerTensor], config: DlrtConfig, variant: str = "tdlrt",
                 rank_floors: Optional[Sequence] = None, rank_caps: Optional[Sequence] = None):
        if variant not in STEPS:
            raise ValueError(f"unknown variant {variant!r}")
        self.config = config
        self.variant = variant
        self.schedule = LRSchedule(config)
        self.step_count = 0
        floors = rank_floors or [None] * len(weights)
        caps = rank_caps or [None] * len(weights)
        self.states = [
            DlrtLayerState(w, rank_floor=f, rank_cap=c) for w, f, c in zip(weights, floors, caps)
        ]

    @property
    def weights(self) -> List[TuckerTensor]:
        return [s.weight for s in self.states]

    def step(self, grad_provider: GradProvider) -> dict:
        info: dict = {"lr": self.schedule.lr_at(self.step_count)}
        self.states = STEPS[self.variant](self.states, grad_provider, self.config, lr=info["lr"], info=info)
        self.step_count += 1
        return info
