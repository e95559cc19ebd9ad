"""Panel layouts consumed by the microkernels.

Both operands are stored k-pair interleaved so a kernel step reads the two
consecutive depth entries it multiplies together from adjacent bytes:

* activation block: ``mr``-row panels, each ``[pair][row][2]``
* weight block: ``nr``-column panels, each ``[pair][col][2]``

Everything outside the valid extents is zero.  Zero activations and zero
weights contribute nothing to the dot products, and offsets are summed only
over valid entries, so padding never needs a correction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from qgemm import _backend
from qgemm.quant import ColOffsets, RowOffsets, compute_col_offsets


def round_up(x: int, m: int) -> int:
    return -(-x // m) * m


@dataclass(frozen=True)
class BlockingParams:
    mcb: int = 56
    ncb: int = 32
    kcb: int = 256
    mr: int = 14
    nr: int = 32

    def __post_init__(self):
        for name in ("mcb", "ncb", "kcb", "mr", "nr"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.mcb % self.mr:
            raise ValueError(f"mcb ({self.mcb}) must be a multiple of mr ({self.mr})")
        if self.ncb % self.nr:
            raise ValueError(f"ncb ({self.ncb}) must be a multiple of nr ({self.nr})")
        if self.kcb % 2:
            raise ValueError(f"kcb ({self.kcb}) must be even")

    def with_(self, **kw) -> "BlockingParams":
        return replace(self, **kw)


@dataclass
class PackedActivationBlock:
    data: np.ndarray  # uint8, length n_panels * mr * k_padded
    rows_valid: int
    k_valid: int
    mr: int
    row_offsets: Optional[RowOffsets] = None

    @property
    def k_padded(self) -> int:
        return self.k_valid + (self.k_valid & 1)

    @property
    def n_panels(self) -> int:
        return -(-self.rows_valid // self.mr)


@dataclass(frozen=True)
class PackedWeight:
    """A weight matrix packed once and reused for every GEMM.

    ``data`` holds a grid of ``kcb x ncb`` blocks, k-block major.  Edge blocks
    are padded to full size so block ``(kb, jb)`` always starts at
    ``(kb * n_col_blocks + jb) * kcb * ncb``.

    ``outlier_threshold`` is set when the matrix is the small-magnitude part of
    an outlier split; ``col_offsets`` always describe the unsplit weights.
    """

    data: np.ndarray
    col_offsets: ColOffsets
    blocking: BlockingParams
    k_total: int
    n_total: int
    max_abs: int
    outlier_threshold: Optional[int] = None

    @property
    def n_k_blocks(self) -> int:
        return -(-self.k_total // self.blocking.kcb)

    @property
    def n_col_blocks(self) -> int:
        return -(-self.n_total // self.blocking.ncb)

    def block_offset(self, kb: int, jb: int) -> int:
        bp = self.blocking
        return (kb * self.n_col_blocks + jb) * bp.kcb * bp.ncb


def _check_block_start(A: np.ndarray, ic: int, kc: int):
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {A.shape}")
    M, K = A.shape
    if not (0 <= ic < M and 0 <= kc < K):
        raise ValueError(f"block start ({ic}, {kc}) outside matrix of shape {A.shape}")


def _pack_a(A, ic, kc, bp, with_offsets, out):
    A = np.ascontiguousarray(A, dtype=np.uint8)
    _check_block_start(A, ic, kc)
    rows = min(bp.mcb, A.shape[0] - ic)
    k_valid = min(bp.kcb, A.shape[1] - kc)
    need = round_up(rows, bp.mr) * (k_valid + (k_valid & 1))
    if out is None:
        out = np.empty(need, dtype=np.uint8)
    elif out.size < need:
        raise ValueError(f"pack buffer holds {out.size} bytes, block needs {need}")
    ro = np.empty(rows, dtype=np.int32) if with_offsets else None
    _backend.get().pack_a(A, ic, kc, rows, k_valid, bp.mr, out, ro)
    offsets = RowOffsets(ro, row_base=ic, k_span=k_valid) if with_offsets else None
    return PackedActivationBlock(out[:need], rows, k_valid, bp.mr, offsets)


def pack_a_with_row_offsets(A: np.ndarray, ic: int, kc: int, bp: BlockingParams,
                            out: Optional[np.ndarray] = None) -> PackedActivationBlock:
    """Pack the ``mcb x kcb`` block of ``A`` at ``(ic, kc)`` and sum its rows in the same pass.

    Edge blocks are clipped to the matrix.  ``out`` may supply a reusable
    buffer of at least ``mcb * kcb`` bytes.
    """
    return _pack_a(A, ic, kc, bp, True, out)


def pack_a_plain(A: np.ndarray, ic: int, kc: int, bp: BlockingParams,
                 out: Optional[np.ndarray] = None) -> PackedActivationBlock:
    """Same layout as :func:`pack_a_with_row_offsets`, without the row sums."""
    return _pack_a(A, ic, kc, bp, False, out)


def unpack_activation_block(pa: PackedActivationBlock) -> np.ndarray:
    kp = pa.k_padded
    full = pa.data[: pa.n_panels * pa.mr * kp].reshape(pa.n_panels, kp // 2, pa.mr, 2)
    full = full.transpose(0, 2, 1, 3).reshape(pa.n_panels * pa.mr, kp)
    return full[: pa.rows_valid, : pa.k_valid].copy()


def _pack_b_data(B: np.ndarray, bp: BlockingParams) -> np.ndarray:
    K, N = B.shape
    nkb, njb = -(-K // bp.kcb), -(-N // bp.ncb)
    padded = np.zeros((nkb * bp.kcb, njb * bp.ncb), dtype=np.int8)
    padded[:K, :N] = B
    # (kb, pair, t, jb, panel, col) -> (kb, jb, panel, pair, col, t)
    blocks = padded.reshape(nkb, bp.kcb // 2, 2, njb, bp.ncb // bp.nr, bp.nr)
    return np.ascontiguousarray(blocks.transpose(0, 3, 4, 1, 5, 2)).ravel()


def _as_weight(B) -> np.ndarray:
    B = np.asarray(B)
    if B.ndim != 2 or B.shape[0] < 1 or B.shape[1] < 1:
        raise ValueError(f"expected a non-empty K x N weight matrix, got shape {B.shape}")
    if B.dtype != np.int8:
        if B.min() < -128 or B.max() > 127:
            raise ValueError("weight entries must fit in signed 8 bits")
        B = B.astype(np.int8)
    return B


def prepack_weights(B: np.ndarray, bp: Optional[BlockingParams] = None) -> PackedWeight:
    B = _as_weight(B)
    bp = bp or BlockingParams()
    K, N = B.shape
    return PackedWeight(
        data=_pack_b_data(B, bp),
        col_offsets=compute_col_offsets(B),
        blocking=bp,
        k_total=K,
        n_total=N,
        max_abs=int(np.abs(B.astype(np.int16)).max()),
    )


def prepack_split(split, bp: Optional[BlockingParams] = None) -> PackedWeight:
    """Prepack the small-magnitude part of a :class:`~qgemm.sparse.SplitWeight`.

    Column offsets come from the reconstructed original weights so the
    requantization step sees the full matrix once the sparse part is added back.
    """
    bp = bp or BlockingParams()
    dense = _as_weight(split.dense_small)
    K, N = dense.shape
    original = dense.astype(np.int32) + split.sparse.to_dense().astype(np.int32)
    return PackedWeight(
        data=_pack_b_data(dense, bp),
        col_offsets=compute_col_offsets(original),
        blocking=bp,
        k_total=K,
        n_total=N,
        max_abs=int(np.abs(dense.astype(np.int16)).max()),
        outlier_threshold=split.threshold,
    )


def unpack_weight(pw: PackedWeight) -> np.ndarray:
    bp = pw.blocking
    nkb, njb = pw.n_k_blocks, pw.n_col_blocks
    blocks = pw.data.reshape(nkb, njb, bp.ncb // bp.nr, bp.kcb // 2, bp.nr, 2)
    padded = blocks.transpose(0, 3, 5, 1, 2, 4).reshape(nkb * bp.kcb, njb * bp.ncb)
    return padded[: pw.k_total, : pw.n_total].copy()
