"""Reference implementations with no blocking, packing or pipelines.

Any disagreement between these and the engine is an engine bug.
"""

from __future__ import annotations

import numpy as np

from qgemm.quant import QuantParams, dequantize, quantize


def naive_gemm_i32(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``C[i, j] = sum_k A[i, k] * B[k, j]``, accumulated as rank-1 updates in int64.

    Loops over ``k`` only; each step is one widened outer product.
    """
    A = np.asarray(A).astype(np.int64)
    B = np.asarray(B).astype(np.int64)
    M, K = A.shape
    C = np.zeros((M, B.shape[1]), dtype=np.int64)
    for k in range(K):
        C += np.multiply.outer(A[:, k], B[k])
    return C.astype(np.int32)


def naive_gemm_scalar(A, B) -> np.ndarray:
    """Plain i, j, k triple loop on Python ints.  Only for small shapes."""
    A = np.asarray(A).tolist()
    B = np.asarray(B).tolist()
    M, K, N = len(A), len(B), len(B[0])
    C = [[0] * N for _ in range(M)]
    for i in range(M):
        for j in range(N):
            s = 0
            for k in range(K):
                s += A[i][k] * B[k][j]
            C[i][j] = s
    return np.array(C, dtype=np.int64).reshape(M, N).astype(np.int32)


def real_domain_reference(A_real, B_real, qa: QuantParams, qb: QuantParams, qc: QuantParams) -> np.ndarray:
    """Quantize the inputs, multiply their dequantized reals, quantize the product."""
    a = dequantize(quantize(np.asarray(A_real, dtype=np.float64), qa, signed=False), qa)
    b = dequantize(quantize(np.asarray(B_real, dtype=np.float64), qb, signed=True), qb)
    return quantize(a @ b, qc, signed=False)


def scalar_saturating_pairs(a_pair, b_pair, acc16: int) -> int:
    """One 16-bit accumulate step: exact pair sum, clip, add, clip."""
    lo, hi = -(1 << 15), (1 << 15) - 1
    pair = sum(int(x) * int(y) for x, y in zip(a_pair, b_pair))
    if pair > hi:
        pair = hi
    elif pair < lo:
        pair = lo
    total = acc16 + pair
    if total > hi:
        return hi
    if total < lo:
        return lo
    return total


def saturating_gemm_i16(A, B, kcb: int) -> np.ndarray:
    """Whole-matrix model of 16-bit accumulation that widens every ``kcb`` depth entries."""
    A = np.asarray(A).tolist()
    B = np.asarray(B).tolist()
    M, K, N = len(A), len(B), len(B[0])
    C = np.zeros((M, N), dtype=np.int64)
    for i in range(M):
        for j in range(N):
            total = 0
            for kc in range(0, K, kcb):
                acc = 0
                for k in range(kc, min(kc + kcb, K), 2):
                    a_pair = (A[i][k], A[i][k + 1] if k + 1 < K else 0)
                    b_pair = (B[k][j], B[k + 1][j] if k + 1 < K else 0)
                    acc = scalar_saturating_pairs(a_pair, b_pair, acc)
                total += acc
            C[i, j] = total
    return C.astype(np.int32)
