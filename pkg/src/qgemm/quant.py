"""Affine quantization algebra.

A real value ``x`` is represented by an 8-bit integer ``q`` through
``x = scale * (q - zero_point)``.  The GEMM ``C = A @ B`` is carried out on the
quantized operands and corrected with per-row sums of ``A`` (row offsets),
per-column sums of ``B`` (column offsets) and the constant
``K * zp_a * zp_b`` before being scaled back to 8 bits (requantization).

Activations (``A``) and outputs (``C``) are unsigned 8-bit, weights (``B``)
are signed 8-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

U8_MIN, U8_MAX = 0, 255
S8_MIN, S8_MAX = -128, 127


def qrange(signed: bool) -> tuple[int, int]:
    return (S8_MIN, S8_MAX) if signed else (U8_MIN, U8_MAX)


def round_half_away(x):
    """Round to nearest, ties away from zero.  Works on scalars and arrays.

    ``x - trunc(x)`` is exact in binary floating point, so the tie test does
    not suffer from the ``floor(x + 0.5)`` double-rounding problem.
    """
    if isinstance(x, np.ndarray):
        t = np.trunc(x)
        frac = x - t
        return t + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)
    t = float(math.trunc(x))
    if abs(x - t) >= 0.5:
        t += math.copysign(1.0, x)
    return t


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    signed: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        lo, hi = qrange(self.signed)
        if not lo <= self.zero_point <= hi:
            kind = "signed" if self.signed else "unsigned"
            raise ValueError(f"zero_point {self.zero_point} outside {kind} range [{lo}, {hi}]")


@dataclass(frozen=True)
class RowOffsets:
    """Sums of unsigned activation rows over ``k_span`` entries of one k range."""

    values: np.ndarray
    row_base: int
    k_span: int


@dataclass(frozen=True)
class ColOffsets:
    """Sums of signed weight columns over the full depth."""

    values: np.ndarray


@dataclass(frozen=True)
class RequantParams:
    multiplier: float
    zp_a: int
    zp_b: int
    zp_c: int
    k_total: int
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (math.isfinite(self.multiplier) and self.multiplier > 0):
            raise ValueError(f"multiplier must be positive and finite, got {self.multiplier}")
        if self.k_total < 1:
            raise ValueError(f"k_total must be >= 1, got {self.k_total}")
        if not U8_MIN <= self.zp_c <= U8_MAX:
            raise ValueError(f"zp_c {self.zp_c} outside [0, 255]")

    @classmethod
    def from_quant_params(cls, qa: QuantParams, qb: QuantParams, qc: QuantParams,
                          k_total: int, bias=None) -> "RequantParams":
        return cls(
            multiplier=qa.scale * qb.scale / qc.scale,
            zp_a=qa.zero_point,
            zp_b=qb.zero_point,
            zp_c=qc.zero_point,
            k_total=k_total,
            bias=None if bias is None else np.asarray(bias, dtype=np.int32),
        )


def choose_quant_params(min_val: float, max_val: float, signed: bool = False) -> QuantParams:
    """Pick scale and zero point covering ``[min_val, max_val]`` widened to include 0."""
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise ValueError("min_val and max_val must be finite")
    if min_val > max_val:
        raise ValueError(f"min_val {min_val} > max_val {max_val}")
    min_val = min(min_val, 0.0)
    max_val = max(max_val, 0.0)
    qmin, qmax = qrange(signed)
    scale = (max_val - min_val) / (qmax - qmin)
    if not math.isfinite(scale):
        raise ValueError(f"range [{min_val}, {max_val}] too wide to quantize")
    if scale == 0.0:
        # empty range, or one so narrow the step underflows
        scale = 1.0
    zp = int(round_half_away(qmin - min_val / scale))
    zp = max(qmin, min(qmax, zp))
    return QuantParams(scale=scale, zero_point=zp, signed=signed)


def quantize(x, qp: QuantParams, signed: Optional[bool] = None):
    if signed is None:
        signed = qp.signed
    qmin, qmax = qrange(signed)
    if isinstance(x, np.ndarray):
        q = round_half_away(x / qp.scale) + qp.zero_point
        return np.clip(q, qmin, qmax).astype(np.int8 if signed else np.uint8)
    q = int(round_half_away(x / qp.scale)) + qp.zero_point
    return max(qmin, min(qmax, q))


def dequantize(q, qp: QuantParams):
    if isinstance(q, np.ndarray):
        return qp.scale * (q.astype(np.float64) - qp.zero_point)
    return qp.scale * (q - qp.zero_point)


def compute_col_offsets(Bq: np.ndarray) -> ColOffsets:
    Bq = np.asarray(Bq)
    if Bq.ndim != 2 or Bq.shape[0] < 1 or Bq.shape[1] < 1:
        raise ValueError(f"expected a non-empty K x N matrix, got shape {Bq.shape}")
    return ColOffsets(Bq.sum(axis=0, dtype=np.int32))


def compute_row_offsets(Aq: np.ndarray, row_base: int = 0) -> RowOffsets:
    Aq = np.asarray(Aq)
    return RowOffsets(Aq.sum(axis=1, dtype=np.int32), row_base=row_base, k_span=Aq.shape[1])


def adjust(acc, row_off, col_off, rp: RequantParams, bias=None):
    """Apply the zero-point corrections (and bias) to raw dot products.

    Broadcasts: ``row_off`` indexes rows, ``col_off`` and ``bias`` index columns.
    Computed in 64-bit so intermediate terms cannot overflow.
    """
    adjusted = np.asarray(acc, dtype=np.int64)
    if rp.zp_b:
        adjusted = adjusted - rp.zp_b * np.asarray(row_off, dtype=np.int64)[..., :, None]
    if rp.zp_a:
        adjusted = adjusted - rp.zp_a * np.asarray(col_off, dtype=np.int64)
    adjusted = adjusted + rp.k_total * rp.zp_a * rp.zp_b
    if bias is not None:
        adjusted = adjusted + np.asarray(bias, dtype=np.int64)
    return adjusted


def requantize_array(adjusted: np.ndarray, rp: RequantParams, relu: bool = False) -> np.ndarray:
    q = round_half_away(rp.multiplier * adjusted.astype(np.float64)) + rp.zp_c
    lo = rp.zp_c if relu else U8_MIN
    return np.clip(q, lo, U8_MAX).astype(np.uint8)


def requantize(acc: int, i: int, j: int, ro: RowOffsets, co: ColOffsets, rp: RequantParams) -> int:
    """Requantize a single full-depth dot product at output position ``(i, j)``.

    ``i`` is a global row index and is looked up relative to ``ro.row_base``.
    """
    adjusted = (
        int(acc)
        - rp.zp_b * int(ro.values[i - ro.row_base])
        - rp.zp_a * int(co.values[j])
        + rp.k_total * rp.zp_a * rp.zp_b
    )
    if rp.bias is not None:
        adjusted += int(rp.bias[j])
    q = int(round_half_away(rp.multiplier * float(adjusted))) + rp.zp_c
    return max(U8_MIN, min(U8_MAX, q))
