"""Dense tensor algebra: unfoldings, foldings and n-mode products.

Tensors are plain ``numpy.ndarray`` values of dtype float64; matrices are
2-d arrays. Modes are 0-based. The unfolding follows the Kolda convention:
the remaining modes index the columns in increasing order, the earliest
varying fastest.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def as_tensor(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError("a tensor needs at least one mode")
    return arr


def _check_mode(ndim: int, mode: int) -> None:
    if not isinstance(mode, (int, np.integer)) or not 0 <= mode < ndim:
        raise ValueError(f"invalid mode {mode!r} for a {ndim}-mode tensor")


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization of shape ``(n_mode, prod of the others)``."""
    t = as_tensor(t)
    _check_mode(t.ndim, mode)
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(m, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    m = np.asarray(m, dtype=np.float64)
    shape = tuple(int(n) for n in shape)
    _check_mode(len(shape), mode)
    rest = int(np.prod([n for i, n in enumerate(shape) if i != mode]))
    if m.ndim != 2 or m.shape != (shape[mode], rest):
        raise ValueError(
            f"matrix of shape {m.shape} cannot be folded along mode {mode} into {shape}"
        )
    moved = (shape[mode],) + tuple(n for i, n in enumerate(shape) if i != mode)
    return np.moveaxis(np.reshape(m, moved, order="F"), 0, mode)


def mode_multiply(t, m, mode: int) -> np.ndarray:
    """n-mode product ``t ×_mode m``: contracts the columns of ``m`` with mode ``mode``."""
    t = as_tensor(t)
    m = np.asarray(m, dtype=np.float64)
    _check_mode(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix of shape {m.shape} does not match mode {mode} of size {t.shape[mode]}"
        )
    # tensordot puts the new axis last; move it back into place
    return np.moveaxis(np.tensordot(t, m, axes=([mode], [1])), -1, mode)


def multi_mode_multiply(t, factors: Sequence[Optional[np.ndarray]], transpose: bool = False) -> np.ndarray:
    """Apply ``mode_multiply`` for every mode with a non-``None`` factor.

    With ``transpose=True`` each factor is applied as its transpose, which is
    the usual projection ``t ×_i U_iᵀ``.
    """
    t = as_tensor(t)
    if len(factors) != t.ndim:
        raise ValueError(f"expected {t.ndim} factors, got {len(factors)}")
    for mode, m in enumerate(factors):
        if m is None:
            continue
        m = np.asarray(m, dtype=np.float64)
        t = mode_multiply(t, m.T if transpose else m, mode)
    return t


def inner(t1, t2) -> float:
    t1, t2 = as_tensor(t1), as_tensor(t2)
    if t1.shape != t2.shape:
        raise ValueError(f"shape mismatch {t1.shape} vs {t2.shape}")
    return float(np.dot(t1.ravel(), t2.ravel()))


def frobenius_norm(t) -> float:
    return float(np.linalg.norm(as_tensor(t).ravel()))
