"""Tucker tensors: reconstruction, HOSVD, tolerance-driven rounding, storage."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from .linalg import column_signs, qr_orthonormal, svd, truncation_rank
from .tensor import as_tensor, frobenius_norm, multi_mode_multiply, unfold

ORTHONORMALITY_TOL = 1e-10

MAGIC = b"TDLT"
FORMAT_VERSION = 1

RankSpec = Union[int, Sequence[int], None]


@dataclass(frozen=True)
class TuckerTensor:
    """``W = core ×_1 U_1 ⋯ ×_d U_d`` with factor ``i`` of shape ``(n_i, r_i)``.

    Construction does not check factor orthonormality, since the naive
    factorized baseline deliberately leaves the Stiefel manifold; call
    :meth:`validate` where the invariant is required.
    """

    core: np.ndarray
    factors: tuple

    def __post_init__(self):
        core = as_tensor(self.core)
        factors = tuple(np.asarray(u, dtype=np.float64) for u in self.factors)
        if len(factors) != core.ndim:
            raise ValueError(f"{core.ndim}-mode core needs {core.ndim} factors, got {len(factors)}")
        for i, u in enumerate(factors):
            if u.ndim != 2 or u.shape[1] != core.shape[i]:
                raise ValueError(f"factor {i} has shape {u.shape}, core mode size {core.shape[i]}")
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "factors", factors)

    @property
    def ndim(self) -> int:
        return self.core.ndim

    @property
    def ranks(self) -> tuple:
        return tuple(self.core.shape)

    @property
    def shape(self) -> tuple:
        return tuple(u.shape[0] for u in self.factors)

    def reconstruct(self) -> np.ndarray:
        return multi_mode_multiply(self.core, self.factors)

    def orthonormality_error(self) -> float:
        return max(
            float(np.linalg.norm(u.T @ u - np.eye(u.shape[1]))) for u in self.factors
        )

    def validate(self, tol: float = ORTHONORMALITY_TOL) -> None:
        for i, (n, r) in enumerate(zip(self.shape, self.ranks)):
            if not 1 <= r <= n:
                raise ValueError(f"mode {i}: rank {r} outside [1, {n}]")
        err = self.orthonormality_error()
        if err > tol:
            raise ValueError(f"factors not orthonormal (error {err:.3e})")
        if not np.all(np.isfinite(self.core)):
            raise ValueError("core has non-finite entries")


def reconstruct(t: TuckerTensor) -> np.ndarray:
    return t.reconstruct()


def _per_mode(value: RankSpec, d: int, default: int) -> list:
    if value is None:
        return [default] * d
    if isinstance(value, (int, np.integer)):
        return [int(value)] * d
    value = [int(v) for v in value]
    if len(value) != d:
        raise ValueError(f"expected {d} per-mode values, got {len(value)}")
    return value


def _widen(u: np.ndarray, r: int) -> np.ndarray:
    # pad an orthonormal basis with deterministic completion columns
    if u.shape[1] >= r:
        return u[:, :r]
    padded = np.hstack([u, np.zeros((u.shape[0], r - u.shape[1]))])
    q, _ = qr_orthonormal(padded)
    return q


def _leading_factors(w: np.ndarray, tol, ranks, rank_floor, rank_caps):
    d = w.ndim
    caps = _per_mode(rank_caps, d, 0)
    floors = _per_mode(rank_floor, d, 1)
    budget = 0.0 if tol is None else tol * frobenius_norm(w) / math.sqrt(d)
    factors = []
    for i in range(d):
        n = w.shape[i]
        u, s, _ = svd(unfold(w, i))
        if ranks is not None:
            r = ranks[i]
        elif tol is not None and tol >= 1:
            # an orthogonal projection never errs by more than ||w||
            r = min(floors[i], n)
        else:
            r = truncation_rank(s, budget, r_min=min(floors[i], len(s)))
            r = max(r, min(floors[i], n))
            if rank_caps is not None:
                r = min(r, caps[i])
        r = max(1, min(r, n))
        factors.append(_widen(u, r))
    return factors


def hosvd(
    w,
    tol: Optional[float] = None,
    ranks: Optional[Sequence[int]] = None,
    rank_floor: RankSpec = 1,
    rank_caps: RankSpec = None,
) -> TuckerTensor:
    """Truncated higher-order SVD of a dense tensor.

    Either ``ranks`` fixes the Tucker ranks or ``tol`` (relative, default 0)
    selects per mode the smallest rank whose discarded singular values have
    norm at most ``tol * ||w|| / sqrt(d)``, which gives
    ``||w - reconstruct|| <= tol * ||w||`` overall.
    """
    w = as_tensor(w)
    if ranks is not None:
        ranks = [int(r) for r in ranks]
        if len(ranks) != w.ndim:
            raise ValueError(f"expected {w.ndim} ranks, got {len(ranks)}")
        for i, (r, n) in enumerate(zip(ranks, w.shape)):
            if not 1 <= r <= n:
                raise ValueError(f"rank {r} for mode {i} exceeds mode size {n}")
    elif tol is not None and tol < 0:
        raise ValueError("tolerance must be nonnegative")
    factors = _leading_factors(w, tol, ranks, rank_floor, rank_caps)
    core = multi_mode_multiply(w, factors, transpose=True)
    return TuckerTensor(core, tuple(factors))


def round_core(core, tol: float, rank_floor: RankSpec = 1, rank_caps: RankSpec = None):
    """HOSVD rounding of a core; returns the small core and per-mode rotations.

    The rotations ``R_i`` have orthonormal columns and satisfy
    ``new_core = core ×_i R_iᵀ``.
    """
    t = hosvd(core, tol=tol, rank_floor=rank_floor, rank_caps=rank_caps)
    return t.core, list(t.factors)


def truncate_with_rotations(
    t: TuckerTensor,
    tol: float,
    rank_floor: RankSpec = 1,
    rank_caps: RankSpec = None,
):
    """Round ``t`` to relative tolerance ``tol`` and pull the factors back.

    Returns ``(rounded, rotations)`` where ``rounded.factors[i] = U_i @ R_i``.
    Factor columns are sign-normalized; the sign is folded into ``R_i``.
    """
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    _, rotations = round_core(t.core, tol, rank_floor, rank_caps)
    factors = []
    for i, (u, rot) in enumerate(zip(t.factors, rotations)):
        pulled = u @ rot
        signs = column_signs(pulled)
        rotations[i] = rot * signs
        factors.append(pulled * signs)
    core = multi_mode_multiply(t.core, rotations, transpose=True)
    return TuckerTensor(core, tuple(factors)), rotations


def truncate(
    t: TuckerTensor,
    tol: float,
    rank_floor: RankSpec = 1,
    rank_caps: RankSpec = None,
) -> TuckerTensor:
    """Rounding task: smallest (quasi-optimal) ranks with ``||W - W'|| <= tol ||W||``.

    The bound holds when no rank cap is active.
    """
    return truncate_with_rotations(t, tol, rank_floor, rank_caps)[0]


def storage_count(t: TuckerTensor) -> int:
    return int(np.prod(t.ranks)) + sum(n * r for n, r in zip(t.shape, t.ranks))


def compression_rate(full_params: int, compressed_params: int) -> float:
    """``1 - c/f``; negative when the factorization is larger than the dense tensor."""
    if full_params == 0:
        raise ValueError("full parameter count must be positive")
    return 1.0 - compressed_params / full_params


# -- binary checkpoint container ---------------------------------------------


def write_tucker(t: TuckerTensor, fh: BinaryIO) -> None:
    d = t.ndim
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, d))
    fh.write(struct.pack(f"<{d}I", *t.shape))
    fh.write(struct.pack(f"<{d}I", *t.ranks))
    fh.write(np.ascontiguousarray(t.core, dtype="<f8").tobytes())
    for u in t.factors:
        fh.write(np.ascontiguousarray(u, dtype="<f8").tobytes())


def read_tucker(fh: BinaryIO) -> TuckerTensor:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated Tucker container")
        return buf

    if take(4) != MAGIC:
        raise ValueError("not a Tucker container (bad magic)")
    version, d = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    shape = struct.unpack(f"<{d}I", take(4 * d))
    ranks = struct.unpack(f"<{d}I", take(4 * d))
    n_core = int(np.prod(ranks))
    core = np.frombuffer(take(8 * n_core), dtype="<f8").reshape(ranks).astype(np.float64)
    factors = []
    for n, r in zip(shape, ranks):
        factors.append(np.frombuffer(take(8 * n * r), dtype="<f8").reshape(n, r).astype(np.float64))
    return TuckerTensor(core, tuple(factors))


def to_bytes(t: TuckerTensor) -> bytes:
    buf = io.BytesIO()
    write_tucker(t, buf)
    return buf.getvalue()


def from_bytes(data: bytes) -> TuckerTensor:
    return read_tucker(io.BytesIO(data))


def save_tucker(t: TuckerTensor, path) -> None:
    with open(Path(path), "wb") as fh:
        write_tucker(t, fh)


def load_tucker(path) -> TuckerTensor:
    with open(Path(path), "rb") as fh:
        return read_tucker(fh)
