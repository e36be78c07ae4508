"""Dense linear algebra primitives.

Matrices are plain 2-D numpy arrays (row-major). Everything here is a pure
function: inputs are never modified.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.linalg import lapack

from .errors import GatherIndexError, NotPositiveDefinite, ShapeError

# rows per chunk in the column-norm reduction; bounds the temporary |a| buffer
_NORM_CHUNK = 64


def _as_2d(a, name="a"):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    """Matrix product with a fixed accumulation order.

    ``out[i, j]`` is accumulated as ``((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    with one rounding per multiply and per add, which is exactly what a naive
    triple loop in the same element type produces.
    """
    a = _as_2d(a, "a")
    b = _as_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    for k in range(a.shape[1]):
        out += np.multiply(a[:, k : k + 1], b[k : k + 1, :])
    return out


def gram_accumulate(acc, x_chunk):
    """Return ``acc + x_chunk @ x_chunk.T``, symmetrized exactly, in f64."""
    acc = _as_2d(acc, "acc")
    x = _as_2d(x_chunk, "x_chunk").astype(np.float64, copy=False)
    n = acc.shape[0]
    if acc.shape != (n, n) or x.shape[0] != n:
        raise ShapeError(f"gram_accumulate: acc {acc.shape}, chunk {x.shape}")
    g = acc.astype(np.float64) + x @ x.T
    return 0.5 * (g + g.T)


def cholesky_lower(g):
    """LL^T factorization via LAPACK potrf. Raises NotPositiveDefinite."""
    g = _as_2d(g, "g")
    if g.shape[0] != g.shape[1]:
        raise ShapeError(f"cholesky: matrix must be square, got {g.shape}")
    c, info = lapack.dpotrf(np.asarray(g, dtype=np.float64), lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ShapeError(f"potrf: illegal argument {-info}")
    return c


def spd_solve(g, rhs):
    """Solve ``Y @ g = rhs`` for symmetric positive definite ``g`` (f64).

    ``rhs`` is m x k and ``g`` is k x k; the solve is applied from the right.
    """
    g = _as_2d(g, "g")
    rhs = _as_2d(rhs, "rhs")
    k = g.shape[0]
    if g.shape != (k, k) or rhs.shape[1] != k:
        raise ShapeError(f"spd_solve: g {g.shape}, rhs {rhs.shape}")
    if k == 0:
        return np.zeros(rhs.shape, dtype=np.float64)
    c = cholesky_lower(g)
    # g symmetric: Y g = R  <=>  g Y^T = R^T
    yt, info = lapack.dpotrs(c, np.asarray(rhs, dtype=np.float64).T, lower=1)
    if info != 0:
        raise ShapeError(f"potrs: illegal argument {-info}")
    return np.ascontiguousarray(yt.T)


def _check_index(idx: Sequence[int], bound: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size:
        if idx[0] < 0 or idx[-1] >= bound:
            raise GatherIndexError(f"index out of range [0, {bound})")
        if np.any(np.diff(idx) <= 0):
            raise GatherIndexError("indices must be strictly increasing")
    return idx


def gather_rows(a, idx):
    a = _as_2d(a)
    return a[_check_index(idx, a.shape[0]), :].copy()


def gather_cols(a, idx):
    a = _as_2d(a)
    return a[:, _check_index(idx, a.shape[1])].copy()


def col_l1_norms(a) -> np.ndarray:
    """Per-column sum of absolute values, accumulated in f64.

    Rows are streamed through a small reusable buffer so large weights are
    read once without a full-size temporary.
    """
    a = _as_2d(a)
    out = np.zeros(a.shape[1], dtype=np.float64)
    buf = np.empty((min(_NORM_CHUNK, a.shape[0]), a.shape[1]), dtype=a.dtype)
    for start in range(0, a.shape[0], _NORM_CHUNK):
        chunk = a[start : start + _NORM_CHUNK]
        tmp = buf[: chunk.shape[0]]
        np.abs(chunk, out=tmp)
        out += tmp.sum(axis=0, dtype=np.float64)
    return out


def row_l2_norms(a) -> np.ndarray:
    a = _as_2d(a).astype(np.float64, copy=False)
    return np.sqrt(np.einsum("ij,ij->i", a, a))
