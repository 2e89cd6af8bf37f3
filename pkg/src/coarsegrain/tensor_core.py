"""Dense tensor kernels: contraction, matricization and truncated eigensolves.

Tensors are plain ``float64`` numpy arrays in C (row-major) order, so the
last index varies fastest.  Everything here is a pure function.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

#: eigenvalues below ``EIG_FLOOR * trace`` count as exact zeros
EIG_FLOOR = 1e-14
#: negative eigenvalues down to ``-NEG_CLAMP * trace`` are roundoff
NEG_CLAMP = 1e-10
#: relative gap below which neighbouring eigenvalues are one multiplet
DEGENERATE_TOL = 1e-12


def as_tensor(values, shape=None) -> np.ndarray:
    """Return ``values`` as a finite float64 array, optionally reshaped."""
    t = np.asarray(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"dimensions must be >= 1, got {shape}")
        if t.size != int(np.prod(shape)):
            raise ShapeError(f"{t.size} values cannot fill shape {shape}")
        t = t.reshape(shape)
    if not np.all(np.isfinite(t)):
        raise NumericError("tensor contains non-finite values")
    return np.ascontiguousarray(t)


def contract(a, b, pairs: Sequence[Tuple[int, int]] = ()) -> np.ndarray:
    """Sum over paired indices of ``a`` and ``b``.

    The result carries the uncontracted indices of ``a`` in order, then
    those of ``b``.  An empty ``pairs`` gives the outer product.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ia = [int(p[0]) for p in pairs]
    ib = [int(p[1]) for p in pairs]
    if len(set(ia)) != len(ia) or len(set(ib)) != len(ib):
        raise ArgumentError(f"repeated index in contraction pairs {list(pairs)}")
    for i, j in zip(ia, ib):
        if not (-a.ndim <= i < a.ndim) or not (-b.ndim <= j < b.ndim):
            raise ArgumentError(f"index pair ({i}, {j}) out of range")
        if a.shape[i] != b.shape[j]:
            raise ShapeError(
                f"cannot contract index {i} (dim {a.shape[i]}) "
                f"with index {j} (dim {b.shape[j]})"
            )
    return np.tensordot(a, b, axes=(ia, ib))


def matricize(t, row_indices: Sequence[int]) -> np.ndarray:
    """Flatten ``t`` into a matrix with ``row_indices`` grouped as rows.

    Rows are the listed indices flattened row-major in the listed order;
    columns are the remaining indices in their original order.  Undo with
    ``m.reshape([t.shape[i] for i in rows + cols])`` followed by the
    inverse transpose.
    """
    t = np.asarray(t, dtype=np.float64)
    rows = [int(i) for i in row_indices]
    if len(set(rows)) != len(rows) or any(not 0 <= i < t.ndim for i in rows):
        raise ArgumentError(f"row indices {rows} invalid for order-{t.ndim} tensor")
    cols = [i for i in range(t.ndim) if i not in rows]
    nrow = int(np.prod([t.shape[i] for i in rows], dtype=np.int64))
    ncol = int(np.prod([t.shape[i] for i in cols], dtype=np.int64))
    return np.ascontiguousarray(np.transpose(t, rows + cols)).reshape(nrow, ncol)


@dataclass(frozen=True)
class EigenResult:
    """Retained part of a Hermitian eigendecomposition.

    ``eigenvalues`` holds the full (clamped) spectrum in descending order;
    ``eigenvectors`` holds only the ``kept`` leading columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    truncation_error: float
    kept: int

    @property
    def retained(self) -> np.ndarray:
        return self.eigenvalues[: self.kept]


def eig_truncated(m, cutoff: float = 0.0, max_dim: Optional[int] = None) -> EigenResult:
    """Diagonalize a symmetric PSD matrix and keep its dominant eigenvectors.

    The kept count ``D`` is the smallest one whose truncation error
    ``sum(discarded) / trace`` is below ``cutoff``.  It is then widened to
    cover a degenerate multiplet straddling the boundary, capped at the
    number of eigenvalues above ``EIG_FLOOR * trace`` (at least one), and
    finally clamped to ``max_dim``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"non-finite entries in {m.shape[0]}x{m.shape[0]} matrix")
    if not 0.0 <= cutoff < 1.0:
        raise ArgumentError(f"cutoff must lie in [0, 1), got {cutoff}")
    if max_dim is not None and max_dim < 1:
        raise ArgumentError(f"max_dim must be >= 1, got {max_dim}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > 1e-8 * scale:
        raise ArgumentError("matrix is not symmetric within 1e-8")
    m = 0.5 * (m + m.T)

    n = m.shape[0]
    try:
        evals, evecs = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed on {n}x{n} matrix: {exc}") from exc
    evals = evals[::-1].copy()
    evecs = evecs[:, ::-1]

    trace = float(np.trace(m))
    if evals[-1] < -NEG_CLAMP * max(abs(trace), 1e-300):
        raise NumericError(
            f"{n}x{n} matrix is not positive semidefinite (eigenvalue {evals[-1]:.3e})"
        )
    evals = np.clip(evals, 0.0, None)
    total = float(evals.sum())
    if total <= 0.0:
        return EigenResult(evals, np.ascontiguousarray(evecs[:, :1]), 0.0, 1)

    # tail[k] = weight discarded when keeping k eigenvalues
    tail = np.concatenate([np.cumsum(evals[::-1])[::-1], [0.0]]) / total
    below = np.nonzero(tail[1:] < cutoff)[0]
    kept = int(below[0]) + 1 if below.size else n
    nonzero = max(1, int(np.count_nonzero(evals > EIG_FLOOR * total)))
    while kept < nonzero and evals[kept - 1] - evals[kept] < DEGENERATE_TOL * total:
        kept += 1
    kept = min(kept, nonzero)
    if max_dim is not None:
        kept = min(kept, int(max_dim))
    return EigenResult(
        eigenvalues=evals,
        eigenvectors=np.ascontiguousarray(evecs[:, :kept]),
        truncation_error=float(min(max(tail[kept], 0.0), 1.0)),
        kept=kept,
    )
