"""Outlier-aware weight splitting and the dense x sparse product.

``B = dense_small + sparse`` where ``dense_small`` keeps every entry with
``|b| < T`` and the CSC ``sparse`` part keeps the full value of every entry
with ``|b| >= T``.  With ``T`` tied to the depth block, 16-bit accumulation of
``A @ dense_small`` cannot saturate, and adding ``A @ sparse`` back in 32 bits
restores the exact product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qgemm import _backend

I16_MAX = 32767
U8_MAX = 255


class SaturationBoundError(ValueError):
    """16-bit accumulation was requested with weights that can saturate it."""


@dataclass(frozen=True)
class SparseWeightCSC:
    col_ptr: np.ndarray  # int64, n_total + 1
    row_idx: np.ndarray  # int32
    values: np.ndarray  # int8
    k_total: int
    n_total: int

    @property
    def nnz(self) -> int:
        return int(self.col_ptr[-1])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.k_total, self.n_total), dtype=np.int8)
        cols = np.repeat(np.arange(self.n_total), np.diff(self.col_ptr))
        out[self.row_idx, cols] = self.values
        return out


@dataclass(frozen=True)
class SplitWeight:
    dense_small: np.ndarray
    sparse: SparseWeightCSC
    threshold: int


def max_threshold(kcb: int) -> int:
    """Largest ``T`` with ``255 * (T - 1) * kcb <= 32767``, capped at 128."""
    return min(128, I16_MAX // (U8_MAX * kcb) + 1)


def i16_bound_holds(max_small: int, kcb: int) -> bool:
    """True when ``kcb`` depth steps of ``255 * max_small`` stay inside int16.

    Pair sums are covered too: a pair is two of those steps.
    """
    return U8_MAX * max_small * kcb <= I16_MAX


def split_outliers(B: np.ndarray, threshold: int) -> SplitWeight:
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    B = np.asarray(B)
    if B.ndim != 2:
        raise ValueError(f"expected a K x N matrix, got shape {B.shape}")
    B = B.astype(np.int8)
    K, N = B.shape
    big = np.abs(B.astype(np.int16)) >= threshold
    dense = np.where(big, 0, B).astype(np.int8)
    # transpose so nonzero() walks column by column with rows ascending
    cols, rows = np.nonzero(big.T)
    col_ptr = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=N), out=col_ptr[1:])
    sparse = SparseWeightCSC(
        col_ptr=col_ptr,
        row_idx=rows.astype(np.int32),
        values=B[rows, cols].astype(np.int8),
        k_total=K,
        n_total=N,
    )
    return SplitWeight(dense, sparse, int(threshold))


def spmdm_block(A: np.ndarray, sparse: SparseWeightCSC, acc_block: np.ndarray, ic: int, jc: int) -> None:
    """``acc_block += A[ic:ic+rows] @ sparse[:, jc:jc+cols]`` in place, 32-bit."""
    rows, cols = acc_block.shape
    if ic < 0 or jc < 0 or ic + rows > A.shape[0] or jc + cols > sparse.n_total:
        raise ValueError(f"block ({ic}, {jc}) of shape {acc_block.shape} out of bounds")
    if sparse.nnz == 0:
        return
    _backend.get().spmdm(np.ascontiguousarray(A, dtype=np.uint8), sparse.col_ptr, sparse.row_idx,
                         sparse.values, acc_block, ic, jc)


def spmdm(A: np.ndarray, sparse: SparseWeightCSC) -> np.ndarray:
    """Whole-matrix ``A @ sparse``; the engine uses the block form."""
    out = np.zeros((A.shape[0], sparse.n_total), dtype=np.int32)
    spmdm_block(A, sparse, out, 0, 0)
    return out
