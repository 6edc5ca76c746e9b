"""Deterministic QR / SVD primitives used by the integrators and by rounding."""
from __future__ import annotations

import numpy as np

# relative size below which a QR pivot counts as a lost direction
QR_DEFICIENCY_TOL = 1e-12
# singular values below this fraction of the largest are treated as zero
SVD_ZERO_FLOOR = 1e-14

_COMPLETION_SEED = 20240229


def _orthogonalize(v: np.ndarray, basis: np.ndarray) -> np.ndarray:
    if basis.shape[1] == 0:
        return v
    return v - basis @ (basis.T @ v)


def qr_orthonormal(m, seed: int = _COMPLETION_SEED):
    """Thin QR with nonnegative ``diag(R)`` and a full-rank ``Q``.

    Columns are processed left to right by classical Gram-Schmidt with
    reorthogonalization. A column whose residual falls below
    ``QR_DEFICIENCY_TOL`` times its norm is replaced in ``Q`` by a seeded
    random unit vector orthogonal to all other columns; its ``R`` diagonal
    keeps the (tiny) residual norm so ``QR`` still reproduces ``m``.

    Parameters
    ----------
    m : ndarray of shape (rows, cols) with rows >= cols
    seed : int
        Seed for the completion vectors; same input and seed give
        bit-identical output.

    Returns
    -------
    Q : ndarray (rows, cols), orthonormal columns
    R : ndarray (cols, cols), upper triangular
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("qr_orthonormal expects a matrix")
    rows, cols = m.shape
    if rows < cols:
        raise ValueError(f"qr_orthonormal needs rows >= cols, got {m.shape}")
    q = np.zeros((rows, cols))
    r = np.zeros((cols, cols))
    rng = None
    for k in range(cols):
        col = m[:, k]
        basis = q[:, :k]
        v = col.copy()
        coeffs = np.zeros(k)
        if k:
            # two passes always, a third only if the second still cancelled a lot
            for sweep in range(3):
                c = basis.T @ v
                v_next = v - basis @ c
                coeffs += c
                settled = sweep >= 1 and np.linalg.norm(v_next) > 0.5 * np.linalg.norm(v)
                v = v_next
                if settled:
                    break
        r[:k, k] = coeffs
        res = np.linalg.norm(v)
        scale = np.linalg.norm(col)
        if res > QR_DEFICIENCY_TOL * (scale if scale > 0 else 1.0):
            q[:, k] = v / res
            r[k, k] = res
            continue
        if rng is None:
            rng = np.random.default_rng(seed)
        while True:
            w = rng.standard_normal(rows)
            w = _orthogonalize(w, basis)
            w = _orthogonalize(w, basis)
            nw = np.linalg.norm(w)
            if nw > 1e-8:
                break
        q[:, k] = w / nw
        r[k, k] = res
    return q, r


def orthonormal_basis(m, width: int | None = None, seed: int = _COMPLETION_SEED) -> np.ndarray:
    """Orthonormal basis of width ``min(cols, rows)`` (or ``width``) for the columns of ``m``.

    When ``m`` has more columns than rows the leading ``rows`` columns are used,
    with seeded completion covering any lost directions.
    """
    m = np.asarray(m, dtype=np.float64)
    rows, cols = m.shape
    w = min(rows, cols) if width is None else min(width, rows, cols)
    q, _ = qr_orthonormal(m[:, :w], seed=seed)
    return q


def svd(m):
    """Thin SVD ``m = U diag(s) Vᵀ`` with a deterministic sign convention.

    Each column of ``U`` has its largest-magnitude entry made nonnegative; the
    matching column of ``V`` is flipped alongside.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("svd expects a matrix")
    if m.size == 0:
        k = min(m.shape)
        return np.zeros((m.shape[0], k)), np.zeros(k), np.zeros((m.shape[1], k))
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    signs = column_signs(u)
    return u * signs, s, vt.T * signs


def column_signs(u: np.ndarray) -> np.ndarray:
    """±1 per column so that each column's largest-magnitude entry becomes nonnegative."""
    if u.shape[0] == 0:
        return np.ones(u.shape[1])
    idx = np.argmax(np.abs(u), axis=0)
    picked = u[idx, np.arange(u.shape[1])]
    return np.where(picked < 0, -1.0, 1.0)


def truncation_rank(s, budget: float, r_min: int = 1, zero_floor: float = SVD_ZERO_FLOOR) -> int:
    """Smallest rank ``r >= r_min`` whose discarded tail has 2-norm ``<= budget``.

    Singular values below ``zero_floor * s[0]`` count as exact zeros. If no rank
    satisfies the budget, ``len(s)`` is returned.
    """
    if budget < 0:
        raise ValueError("truncation budget must be nonnegative")
    s = np.asarray(s, dtype=np.float64)
    n = len(s)
    if n == 0:
        return 0
    r_min = min(max(int(r_min), 0), n)
    s_eff = np.where(s < zero_floor * s[0], 0.0, s) if s[0] > 0 else np.zeros(n)
    # tails[r] = ||s[r:]||, computed from the small end for accuracy
    tails = np.sqrt(np.concatenate([np.cumsum((s_eff**2)[::-1])[::-1], [0.0]]))
    for r in range(r_min, n + 1):
        if tails[r] <= budget:
            return r
    return n
