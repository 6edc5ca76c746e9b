"""MNIST IDX ingestion and synthetic low-rank problem generators."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .linalg import qr_orthonormal, svd
from .tensor import fold, unfold
from .tucker import TuckerTensor

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

DATA_DIR_ENV = "TDLRT_DATA_DIR"


class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IdxFormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def parse_idx(raw: bytes, expected_magic: Optional[int] = None, source: str = "<bytes>") -> np.ndarray:
    """Decode an unsigned-byte IDX payload into a ``uint8`` array."""
    if len(raw) < 4:
        raise IdxFormatError(f"{source}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{source}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxFormatError(f"{source}: unsupported IDX type 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{source}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if ndim else 0
    payload = len(raw) - header
    if payload != count:
        raise IdxFormatError(f"{source}: expected {count} data bytes, found {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic, str(path))


@dataclass
class MnistData:
    images: np.ndarray  # (N, 28, 28) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "MnistData":
        return MnistData(self.images[:n], self.labels[:n])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[tuple]:
        """Yield ``(images[:, None], labels)`` mini-batches, shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx][:, None], self.labels[idx]


def load_mnist(images_path, labels_path, seed: Optional[int] = None) -> MnistData:
    """Parse an image/label IDX pair; optionally shuffle deterministically with ``seed``."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected 1 dimension, got {labels.ndim}")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(y))
        x, y = x[perm], y[perm]
    return MnistData(x, y)


def _locate(directory: Path, stem: str) -> Optional[Path]:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    return None


def find_mnist(data_dir=None) -> Optional[dict]:
    """Paths of the four standard files under ``data_dir`` (or ``$TDLRT_DATA_DIR``), or ``None``."""
    root = data_dir if data_dir is not None else os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    root = Path(root)
    for candidate in (root, root / "mnist", root / "MNIST" / "raw"):
        found = {key: _locate(candidate, stem) for key, stem in MNIST_FILES.items()}
        if all(found.values()):
            return found
    return None


def load_mnist_splits(data_dir=None, seed: Optional[int] = None):
    paths = find_mnist(data_dir)
    if paths is None:
        raise FileNotFoundError(
            f"MNIST IDX files not found; set {DATA_DIR_ENV} or pass a data directory"
        )
    train = load_mnist(paths["train_images"], paths["train_labels"], seed=seed)
    test = load_mnist(paths["test_images"], paths["test_labels"])
    return train, test


# -- SHA-256 manifests -------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def read_manifest(path) -> dict:
    """``sha256sum``-style lines: ``<hex digest>  <file name>``."""
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        digest, name = line.split(maxsplit=1)
        entries[name.lstrip("*")] = digest.lower()
    return entries


def write_manifest(directory, names: Sequence[str], path) -> None:
    directory = Path(directory)
    lines = [f"{sha256_file(directory / n)}  {n}" for n in names]
    Path(path).write_text("\n".join(lines) + "\n")


def verify_manifest(directory, manifest_path) -> dict:
    """Map each manifest entry to ``True``/``False`` (``None`` if the file is missing)."""
    directory = Path(directory)
    status = {}
    for name, digest in read_manifest(manifest_path).items():
        p = directory / name
        status[name] = None if not p.exists() else sha256_file(p) == digest
    return status


def fetch_mnist(dest, base_url: str, manifest_path=None) -> dict:
    """Download the four gzipped files from ``base_url`` into ``dest``.

    With a manifest every file is checked and a mismatch raises; without one
    a manifest of the downloaded digests is written next to the data.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    names = [stem + ".gz" for stem in MNIST_FILES.values()]
    for name in names:
        target = dest / name
        if not target.exists():
            urllib.request.urlretrieve(base_url.rstrip("/") + "/" + name, target)
    if manifest_path is None:
        write_manifest(dest, names, dest / "SHA256SUMS")
        return {n: None for n in names}
    status = verify_manifest(dest, manifest_path)
    bad = [n for n, ok in status.items() if ok is False]
    if bad:
        raise IdxFormatError(f"SHA-256 mismatch for {', '.join(bad)}")
    return status


# -- synthetic problems --------------------------------------------------------

Spectrum = Union[str, Sequence[float], Sequence[Sequence[float]], None]


def decade_spectrum(r: int) -> np.ndarray:
    return 10.0 ** (-np.arange(r, dtype=np.float64))


def _resolve_spectra(spectrum: Spectrum, ranks: Sequence[int]) -> list:
    d = len(ranks)
    if spectrum is None:
        spectra = [np.ones(r) for r in ranks]
    elif isinstance(spectrum, str):
        if spectrum != "decade":
            raise ValueError(f"unknown spectrum {spectrum!r}")
        spectra = [decade_spectrum(r) for r in ranks]
    else:
        seq = list(spectrum)
        if seq and np.ndim(seq[0]) == 0:
            spectra = [np.asarray(seq, dtype=np.float64)] * d
        else:
            spectra = [np.asarray(s, dtype=np.float64) for s in seq]
    if len(spectra) != d:
        raise ValueError(f"need {d} spectra, got {len(spectra)}")
    for i, (s, r) in enumerate(zip(spectra, ranks)):
        if len(s) != r:
            raise ValueError(f"mode {i}: spectrum of length {len(s)} for rank {r}")
        if np.any(s <= 0) or np.any(np.diff(s) > 0):
            raise ValueError(f"mode {i}: spectrum must be positive and nonincreasing")
    return spectra


def random_orthonormal(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = qr_orthonormal(rng.standard_normal((n, r)))
    return q


def core_with_spectra(ranks: Sequence[int], spectra: Sequence[np.ndarray], rng: np.random.Generator, sweeps: int = 200):
    """Core whose mode unfoldings carry the requested singular values.

    Equal ranks with equal spectra give an exact superdiagonal core. Otherwise
    a random core is alternately rescaled mode by mode (all spectra first
    normalized to a common norm); the last mode is then exact and the others
    approximate. Returns ``(core, realized_spectra)``.
    """
    ranks = [int(r) for r in ranks]
    d = len(ranks)
    for i, r in enumerate(ranks):
        rest = int(np.prod([ranks[j] for j in range(d) if j != i]))
        if r > rest:
            raise ValueError(f"rank {r} of mode {i} exceeds the product {rest} of the other ranks")
    same = len(set(ranks)) == 1 and all(np.array_equal(spectra[0], s) for s in spectra)
    if same:
        core = np.zeros(ranks)
        for k, sigma in enumerate(spectra[0]):
            core[(k,) * d] = sigma
    else:
        norm = np.linalg.norm(spectra[0])
        targets = [s * (norm / np.linalg.norm(s)) for s in spectra]
        core = rng.standard_normal(ranks)
        for _ in range(sweeps):
            for i in range(d):
                u, _, v = svd(unfold(core, i))
                core = fold(u @ np.diag(targets[i]) @ v.T, i, ranks)
    realized = [np.linalg.svd(unfold(core, i), compute_uv=False) for i in range(d)]
    return core, realized


@dataclass
class SyntheticSpec:
    shape: Sequence[int]
    true_ranks: Sequence[int]
    spectrum: Spectrum = None
    seed: int = 0
    scale: float = 1.0  # Frobenius norm of the generated tensor; 0 keeps the raw spectrum

    def __post_init__(self):
        if len(self.shape) != len(self.true_ranks):
            raise ValueError("shape and ranks must have the same length")
        for n, r in zip(self.shape, self.true_ranks):
            if not 1 <= r <= n:
                raise ValueError(f"rank {r} outside [1, {n}]")


def spectral_init(shape, ranks, spectrum: Spectrum = "decade", seed: int = 0, scale: float = 0.0):
    """Tucker tensor with random orthonormal factors and prescribed core spectra.

    Returns ``(tucker, realized_spectra)``.
    """
    shape = [int(n) for n in shape]
    ranks = [int(r) for r in ranks]
    for n, r in zip(shape, ranks):
        if not 1 <= r <= n:
            raise ValueError(f"rank {r} outside [1, {n}]")
    spectra = _resolve_spectra(spectrum, ranks)
    rng = np.random.default_rng(seed)
    factors = [random_orthonormal(n, r, rng) for n, r in zip(shape, ranks)]
    core, realized = core_with_spectra(ranks, spectra, rng)
    if scale:
        factor = scale / np.linalg.norm(core)
        core = core * factor
        realized = [s * factor for s in realized]
    return TuckerTensor(core, tuple(factors)), realized


def make_low_rank_target(spec: SyntheticSpec) -> np.ndarray:
    t, _ = spectral_init(spec.shape, spec.true_ranks, spec.spectrum, spec.seed, spec.scale)
    return t.reconstruct()
