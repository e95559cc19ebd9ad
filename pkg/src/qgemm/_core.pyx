# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: activation packing, macro kernels, sparse add.

All loops run without the GIL so caller-managed worker threads overlap.
``kind`` selects the register-tile kernel (0) or the single-row kernel (1).
"""

from libc.stdint cimport int8_t, int16_t, int32_t, int64_t, uint8_t
from libc.stdlib cimport free, malloc
from libc.string cimport memset

NAME = "compiled"


cdef inline int32_t sat16(int32_t x) noexcept nogil:
    # ternaries rather than branches so the compiler can emit min/max
    x = x if x < 32767 else 32767
    return x if x > -32768 else -32768


def pack_a(const uint8_t[:, ::1] A, Py_ssize_t ic, Py_ssize_t kc, Py_ssize_t rows,
           Py_ssize_t k_valid, Py_ssize_t mr, uint8_t[::1] out, int32_t[::1] row_offsets=None):
    cdef Py_ssize_t kpad = k_valid + (k_valid & 1)
    cdef Py_ssize_t need = ((rows + mr - 1) // mr) * mr * kpad
    cdef Py_ssize_t i, k, base
    cdef int32_t s
    cdef uint8_t v
    cdef bint with_ro = row_offsets is not None
    if out.shape[0] < need:
        raise ValueError("pack buffer too small")
    if with_ro and row_offsets.shape[0] < rows:
        raise ValueError("row offset buffer too small")
    with nogil:
        memset(&out[0], 0, need)
        for i in range(rows):
            base = (i // mr) * mr * kpad + (i % mr) * 2
            s = 0
            for k in range(k_valid):
                v = A[ic + i, kc + k]
                out[base + (k >> 1) * 2 * mr + (k & 1)] = v
                s += v
            if with_ro:
                row_offsets[i] = s


cdef void _tile_i32(const uint8_t* a, const int8_t* b, int32_t* acc, Py_ssize_t npairs,
                    Py_ssize_t mr, Py_ssize_t nr, Py_ssize_t mv, Py_ssize_t nv) noexcept nogil:
    cdef Py_ssize_t p, i, j
    cdef int32_t a0, a1
    cdef int32_t* row
    cdef const uint8_t* ap
    cdef const int8_t* bp
    for p in range(npairs):
        ap = a + p * 2 * mr
        bp = b + p * 2 * nr
        for i in range(mv):
            a0 = ap[2 * i]
            a1 = ap[2 * i + 1]
            row = acc + i * nr
            for j in range(nv):
                row[j] += a0 * bp[2 * j] + a1 * bp[2 * j + 1]


cdef void _tile_i16(const uint8_t* a, const int8_t* b, int32_t* acc, Py_ssize_t npairs,
                    Py_ssize_t mr, Py_ssize_t nr, Py_ssize_t mv, Py_ssize_t nv) noexcept nogil:
    # per pair: one saturation after the paired multiply-add, one after the add
    cdef Py_ssize_t p, i, j
    cdef int32_t a0, a1, t
    cdef int32_t* row
    cdef const uint8_t* ap
    cdef const int8_t* bp
    for p in range(npairs):
        ap = a + p * 2 * mr
        bp = b + p * 2 * nr
        for i in range(mv):
            a0 = ap[2 * i]
            a1 = ap[2 * i + 1]
            row = acc + i * nr
            for j in range(nv):
                t = sat16(a0 * bp[2 * j] + a1 * bp[2 * j + 1])
                row[j] = sat16(row[j] + t)


def macro_i32(const uint8_t[::1] pa, const int8_t[::1] pb, Py_ssize_t pb_off,
              int32_t[:, ::1] cbuf, Py_ssize_t jc, Py_ssize_t rows, Py_ssize_t cols,
              Py_ssize_t k_valid, Py_ssize_t mr, Py_ssize_t nr, Py_ssize_t kcb, int kind=0):
    cdef Py_ssize_t npairs = (k_valid + 1) // 2
    cdef Py_ssize_t a_stride = mr * 2 * npairs
    cdef Py_ssize_t b_stride = kcb * nr
    cdef Py_ssize_t it, jt, ir, jr, i, j, p, mv, nv
    cdef int32_t s
    cdef const uint8_t* a
    cdef const int8_t* b
    cdef int32_t* acc = <int32_t*>malloc(mr * nr * sizeof(int32_t))
    if acc == NULL:
        raise MemoryError()
    with nogil:
        if kind == 1:
            a = &pa[0]
            for jt in range((cols + nr - 1) // nr):
                jr = jt * nr
                nv = min(nr, cols - jr)
                b = &pb[pb_off + jt * b_stride]
                for j in range(nv):
                    s = 0
                    for p in range(npairs):
                        s = s + a[2 * p] * b[p * 2 * nr + 2 * j] + a[2 * p + 1] * b[p * 2 * nr + 2 * j + 1]
                    cbuf[0, jc + jr + j] += s
        else:
            for it in range((rows + mr - 1) // mr):
                ir = it * mr
                mv = min(mr, rows - ir)
                a = &pa[it * a_stride]
                for jt in range((cols + nr - 1) // nr):
                    jr = jt * nr
                    nv = min(nr, cols - jr)
                    b = &pb[pb_off + jt * b_stride]
                    memset(acc, 0, mr * nr * sizeof(int32_t))
                    _tile_i32(a, b, acc, npairs, mr, nr, mv, nv)
                    for i in range(mv):
                        for j in range(nv):
                            cbuf[ir + i, jc + jr + j] += acc[i * nr + j]
    free(acc)


def macro_i16(const uint8_t[::1] pa, const int8_t[::1] pb, Py_ssize_t pb_off,
              int32_t[:, ::1] cbuf, Py_ssize_t jc, Py_ssize_t rows, Py_ssize_t cols,
              Py_ssize_t k_valid, Py_ssize_t mr, Py_ssize_t nr, Py_ssize_t kcb, int kind=0):
    cdef Py_ssize_t npairs = (k_valid + 1) // 2
    cdef Py_ssize_t a_stride = mr * 2 * npairs
    cdef Py_ssize_t b_stride = kcb * nr
    cdef Py_ssize_t it, jt, ir, jr, i, j, p, mv, nv
    cdef int32_t s, t
    cdef const uint8_t* a
    cdef const int8_t* b
    # int32 storage, but every stored value has passed through sat16
    cdef int32_t* acc = <int32_t*>malloc(mr * nr * sizeof(int32_t))
    if acc == NULL:
        raise MemoryError()
    with nogil:
        if kind == 1:
            a = &pa[0]
            for jt in range((cols + nr - 1) // nr):
                jr = jt * nr
                nv = min(nr, cols - jr)
                b = &pb[pb_off + jt * b_stride]
                for j in range(nv):
                    s = 0
                    for p in range(npairs):
                        t = sat16(a[2 * p] * b[p * 2 * nr + 2 * j] + a[2 * p + 1] * b[p * 2 * nr + 2 * j + 1])
                        s = sat16(s + t)
                    cbuf[0, jc + jr + j] += s
        else:
            for it in range((rows + mr - 1) // mr):
                ir = it * mr
                mv = min(mr, rows - ir)
                a = &pa[it * a_stride]
                for jt in range((cols + nr - 1) // nr):
                    jr = jt * nr
                    nv = min(nr, cols - jr)
                    b = &pb[pb_off + jt * b_stride]
                    memset(acc, 0, mr * nr * sizeof(int32_t))
                    _tile_i16(a, b, acc, npairs, mr, nr, mv, nv)
                    # widen once per depth block
                    for i in range(mv):
                        for j in range(nv):
                            cbuf[ir + i, jc + jr + j] += acc[i * nr + j]
    free(acc)


def spmdm(const uint8_t[:, ::1] A, const int64_t[::1] col_ptr, const int32_t[::1] row_idx,
          const int8_t[::1] values, int32_t[:, :] block, Py_ssize_t ic, Py_ssize_t jc):
    cdef Py_ssize_t rows = block.shape[0]
    cdef Py_ssize_t cols = block.shape[1]
    cdef Py_ssize_t i, j, idx, k
    cdef int32_t v
    with nogil:
        for j in range(cols):
            for idx in range(col_ptr[jc + j], col_ptr[jc + j + 1]):
                k = row_idx[idx]
                v = values[idx]
                for i in range(rows):
                    block[i, j] += A[ic + i, k] * v
