"""Monte-Carlo semantic kernel: cosine-normalized robustness inner products
mapped through an RBF, and Gram-matrix assembly.

The kernel of two formulae is exp(-(1 - c)/sigma^2) where c is the cosine
similarity of their robustness vectors over a shared trajectory set. Values
live in (0, 1]; 1 means behavioral equivalence over the sampled signals.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFormulaError
from .semantics import RobustnessVector, robustness_matrix
from .signals import TrajectorySet

__all__ = [
    "DEFAULT_SIGMA2",
    "GramMatrix",
    "raw_inner",
    "cosine_similarity",
    "rbf",
    "gram",
    "gram_from_robustness",
    "save_gram",
    "load_gram",
    "export_gram_csv",
]

DEFAULT_SIGMA2 = 0.2

_MAGIC = b"STLG"
_VERSION = 1


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Symmetric PSD kernel matrix over a batch of formulae."""

    values: np.ndarray
    sigma2: float
    n_signals: int
    ids: tuple[str, ...]

    def __post_init__(self):
        b = self.values.shape[0]
        if self.values.shape != (b, b):
            raise ValueError(f"gram matrix must be square, got {self.values.shape}")
        if len(self.ids) != b:
            raise ValueError("id list length must match matrix size")
        self.values.setflags(write=False)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _vector_values(r) -> np.ndarray:
    return r.values if isinstance(r, RobustnessVector) else np.asarray(r, dtype=np.float64)


def raw_inner(ri, rj) -> float:
    """(1/N) sum of elementwise products of two robustness vectors."""
    a, b = _vector_values(ri), _vector_values(rj)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    return float(a @ b / a.shape[0])


def cosine_similarity(ri, rj) -> float:
    """Scale-invariant similarity of robustness vectors, in [-1, 1]."""
    a, b = _vector_values(ri), _vector_values(rj)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateFormulaError("zero-norm robustness vector has no direction")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def rbf(kprime: float, sigma2: float = DEFAULT_SIGMA2) -> float:
    """Map cosine similarity into (0, 1]: exp(-(2 - 2 k') / (2 sigma^2))."""
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return float(np.exp(-(1.0 - kprime) / sigma2))


def gram_from_robustness(
    matrix: np.ndarray,
    sigma2: float = DEFAULT_SIGMA2,
    ids: tuple[str, ...] | None = None,
) -> GramMatrix:
    """Assemble the Gram matrix from precomputed robustness rows (B, N)."""
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    matrix = np.asarray(matrix, dtype=np.float64)
    b, n = matrix.shape
    ids = ids if ids is not None else tuple(str(i) for i in range(b))
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateFormulaError(
            f"zero-norm robustness vector for formula id {ids[bad[0]]!r}"
        )
    unit = matrix / norms[:, None]
    cos = unit @ unit.T
    cos = np.clip((cos + cos.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(cos, 1.0)
    values = np.exp(-(1.0 - cos) / sigma2)
    return GramMatrix(values, sigma2, n, tuple(ids))


def gram(
    formulae,
    ts: TrajectorySet,
    sigma2: float = DEFAULT_SIGMA2,
    ids=None,
) -> GramMatrix:
    """Compute robustness vectors once, then the full kernel matrix."""
    ids = tuple(ids) if ids is not None else tuple(str(i) for i in range(len(formulae)))
    matrix = robustness_matrix(formulae, ts, ids)
    return gram_from_robustness(matrix, sigma2, ids)


# ---------------------------------------------------------------------------
# Cache: magic, u32 version, u32 B, u32 N, f64 sigma2, id block (u32 length +
# newline-joined utf-8), f64 values row-major.

def save_gram(gm: GramMatrix, path) -> None:
    id_block = "\n".join(gm.ids).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIId", _VERSION, gm.size, gm.n_signals, gm.sigma2))
        fh.write(struct.pack("<I", len(id_block)))
        fh.write(id_block)
        fh.write(np.ascontiguousarray(gm.values, dtype="<f8").tobytes())


def load_gram(path) -> GramMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad gram cache magic {magic!r}")
        version, b, n_signals, sigma2 = struct.unpack("<IIId", fh.read(20))
        if version != _VERSION:
            raise ValueError(f"unsupported gram cache version {version}")
        (id_len,) = struct.unpack("<I", fh.read(4))
        ids = tuple(fh.read(id_len).decode("utf-8").split("\n")) if id_len else ()
        values = np.frombuffer(fh.read(b * b * 8), dtype="<f8").astype(np.float64)
        if values.size != b * b:
            raise ValueError("truncated gram cache")
    return GramMatrix(values.reshape(b, b), sigma2, n_signals, ids)


def export_gram_csv(gm: GramMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *gm.ids])
        for fid, row in zip(gm.ids, gm.values):
            writer.writerow([fid, *(f"{v:.12g}" for v in row)])
