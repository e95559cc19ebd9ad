"""Numpy implementations of the hot kernels.

Signatures match the compiled core one for one.  The macro kernels work on a
whole cache block at a time instead of looping over register tiles: every
output element has its own independent accumulation chain, so the result is
the same as tile-by-tile evaluation, including where 16-bit saturation hits.
"""

import numpy as np

NAME = "python"


def pack_a(A, ic, kc, rows, k_valid, mr, out, row_offsets=None):
    kpad = k_valid + (k_valid & 1)
    npan = -(-rows // mr)
    need = npan * mr * kpad
    if out.shape[0] < need:
        raise ValueError("pack buffer too small")
    src = A[ic:ic + rows, kc:kc + k_valid]
    blk = np.zeros((npan * mr, kpad), dtype=np.uint8)
    blk[:rows, :k_valid] = src
    out[:need] = blk.reshape(npan, mr, kpad // 2, 2).transpose(0, 2, 1, 3).ravel()
    if row_offsets is not None:
        row_offsets[:rows] = src.sum(axis=1, dtype=np.int32)


def _unpanel(pa, pb, pb_off, rows, cols, k_valid, mr, nr, kcb):
    npairs = (k_valid + 1) // 2
    kpad = 2 * npairs
    npan = -(-rows // mr)
    a = pa[:npan * mr * kpad].reshape(npan, npairs, mr, 2).transpose(0, 2, 1, 3)
    a = a.reshape(npan * mr, kpad)[:rows]
    qn = -(-cols // nr)
    b = pb[pb_off:pb_off + qn * kcb * nr].reshape(qn, kcb // 2, nr, 2)[:, :npairs]
    b = b.transpose(1, 3, 0, 2).reshape(kpad, qn * nr)[:, :cols]
    return a.astype(np.int32), b.astype(np.int32)


def macro_i32(pa, pb, pb_off, cbuf, jc, rows, cols, k_valid, mr, nr, kcb, kind=0):
    a, b = _unpanel(pa, pb, pb_off, rows, cols, k_valid, mr, nr, kcb)
    cbuf[:rows, jc:jc + cols] += a @ b


def macro_i16(pa, pb, pb_off, cbuf, jc, rows, cols, k_valid, mr, nr, kcb, kind=0):
    a, b = _unpanel(pa, pb, pb_off, rows, cols, k_valid, mr, nr, kcb)
    if b.size and 255 * int(np.abs(b).max()) * a.shape[1] <= 32767:
        # no partial sum can leave int16, so clipping would never fire
        cbuf[:rows, jc:jc + cols] += a @ b
        return
    acc = np.zeros((rows, cols), dtype=np.int32)
    for p in range(0, a.shape[1], 2):
        t = np.multiply.outer(a[:, p], b[p]) + np.multiply.outer(a[:, p + 1], b[p + 1])
        np.clip(t, -32768, 32767, out=t)
        acc += t
        np.clip(acc, -32768, 32767, out=acc)
    cbuf[:rows, jc:jc + cols] += acc


def spmdm(A, col_ptr, row_idx, values, block, ic, jc):
    rows, cols = block.shape
    for j in range(cols):
        lo, hi = col_ptr[jc + j], col_ptr[jc + j + 1]
        if lo == hi:
            continue
        ks = row_idx[lo:hi]
        block[:, j] += A[ic:ic + rows, ks].astype(np.int32) @ values[lo:hi].astype(np.int32)
