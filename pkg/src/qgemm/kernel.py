"""Blocked GEMM driver and register-tile microkernels.

Loop structure of :func:`execute_gemm`::

    for ic in rows of this worker's stripe, step mcb      # Loop1
        for kc in 0..K, step kcb                          # Loop2: pack A block + row sums
            for jc in 0..N, step ncb                      # Loop3: B already packed
                for ir in 0..mcb, step mr                 # Loop4 \
                    for jr in 0..ncb, step nr             # Loop5  } macro kernel
                        for k in 0..kcb                   # Loop6 /
            (after the last kc) run the output pipeline on block (ic, jc)

The engine never starts threads.  Callers that want parallelism run one
:func:`execute_gemm` per worker with distinct ``thread_id``; each call writes
only its own contiguous stripe of ``mcb``-aligned rows.

:func:`microkernel_i32` and :func:`microkernel_i16` are scalar reference
versions of one register-tile update.  The driver uses the backend macro
kernels, which implement the same contract over whole cache blocks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from qgemm import dispatch
from qgemm.pack import BlockingParams, PackedWeight, pack_a_plain, pack_a_with_row_offsets, round_up
from qgemm.pipeline import BlockContext, OutputPipeline, PipelineError
from qgemm.sparse import SaturationBoundError, i16_bound_holds

I16_MIN, I16_MAX = -32768, 32767


class KernelVariant(enum.Enum):
    ACC_I32 = "i32"
    ACC_I16 = "i16"

    @classmethod
    def parse(cls, v) -> "KernelVariant":
        if isinstance(v, cls):
            return v
        try:
            return cls(str(v).lower())
        except ValueError:
            raise ValueError(f"unknown kernel variant {v!r}; expected 'i32' or 'i16'") from None


@dataclass
class OpCounter:
    """Counts accumulator updates and the multiply-adds feeding them."""

    steps: int = 0
    macs: int = 0

    @property
    def macs_per_step(self) -> float:
        return self.macs / self.steps if self.steps else 0.0


def saturate_i16(x: int) -> int:
    return I16_MAX if x > I16_MAX else I16_MIN if x < I16_MIN else x


def _panels(pa_panel, pb_panel, mr, nr, k_valid):
    npairs = (k_valid + 1) // 2
    a = np.asarray(pa_panel)[: npairs * 2 * mr].reshape(npairs, mr, 2)
    b = np.asarray(pb_panel)[: npairs * 2 * nr].reshape(npairs, nr, 2)
    return a, b, npairs


def microkernel_i32(pa_panel, pb_panel, acc: np.ndarray, k_valid: int,
                    counter: Optional[OpCounter] = None) -> np.ndarray:
    """``acc[i, j] += sum_k a[i, k] * b[k, j]`` over one packed panel pair, one depth step at a time."""
    mr, nr = acc.shape
    a, b, _ = _panels(pa_panel, pb_panel, mr, nr, k_valid)
    for k in range(k_valid):
        p, t = divmod(k, 2)
        for i in range(mr):
            ai = int(a[p, i, t])
            for j in range(nr):
                acc[i, j] += ai * int(b[p, j, t])
        if counter is not None:
            counter.steps += mr * nr
            counter.macs += mr * nr
    return acc


def microkernel_i16(pa_panel, pb_panel, acc16: np.ndarray, k_valid: int,
                    counter: Optional[OpCounter] = None) -> np.ndarray:
    """Saturating 16-bit tile update, one depth pair per accumulate step.

    Per pair: the two products are summed exactly and saturated to int16, then
    added to the accumulator with a second saturation.  Nothing else clips.
    """
    mr, nr = acc16.shape
    a, b, npairs = _panels(pa_panel, pb_panel, mr, nr, k_valid)
    for p in range(npairs):
        for i in range(mr):
            a0, a1 = int(a[p, i, 0]), int(a[p, i, 1])
            for j in range(nr):
                t = saturate_i16(a0 * int(b[p, j, 0]) + a1 * int(b[p, j, 1]))
                acc16[i, j] = saturate_i16(int(acc16[i, j]) + t)
        if counter is not None:
            counter.steps += mr * nr
            counter.macs += 2 * mr * nr
    return acc16


def spill_i16_to_i32(acc16: np.ndarray, acc32: np.ndarray) -> np.ndarray:
    acc32 += acc16.astype(np.int32)
    acc16[...] = 0
    return acc32


def _check_i16(pw: PackedWeight, K: int, allow_saturation: bool):
    if allow_saturation:
        return
    kcb_eff = min(pw.blocking.kcb, round_up(K, 2))
    if pw.outlier_threshold is not None:
        max_small, what = pw.outlier_threshold - 1, f"outlier threshold {pw.outlier_threshold}"
    else:
        max_small, what = pw.max_abs, f"unsplit weights with max |b| = {pw.max_abs}"
    if not i16_bound_holds(max_small, kcb_eff):
        raise SaturationBoundError(
            f"16-bit accumulation can saturate: {what} with kcb={kcb_eff} gives "
            f"255*{max_small}*{kcb_eff} = {255 * max_small * kcb_eff} > 32767; "
            f"split outliers with threshold <= {32767 // (255 * kcb_eff) + 1} or lower kcb")


def stripe_blocks(n_blocks: int, thread_id: int, num_threads: int) -> range:
    """Contiguous share of row blocks for one worker."""
    return range(thread_id * n_blocks // num_threads, (thread_id + 1) * n_blocks // num_threads)


def execute_gemm(A: np.ndarray, pw: PackedWeight, out: np.ndarray,
                 pipeline: Optional[OutputPipeline] = None, variant=KernelVariant.ACC_I32,
                 thread_id: int = 0, num_threads: int = 1, *,
                 cache: Optional[dispatch.KernelCache] = None,
                 kernel: Optional[dispatch.KernelDescriptor] = None,
                 allow_saturation: bool = False) -> None:
    """Compute this worker's row stripe of ``pipeline(A @ B)`` into ``out``.

    ``A`` is unsigned 8-bit ``M x K``; ``pw`` holds the prepacked ``K x N``
    weights; ``out`` is ``M x N`` with the pipeline writer's dtype.  ``kernel``
    bypasses dispatch (used to compare specialized and generic kernels).
    ``allow_saturation`` skips the 16-bit bound check.
    """
    variant = KernelVariant.parse(variant)
    pipeline = pipeline if pipeline is not None else OutputPipeline()
    A = np.asarray(A)
    if A.ndim != 2 or A.dtype != np.uint8:
        raise ValueError(f"A must be a 2-D uint8 matrix, got {A.dtype} with shape {A.shape}")
    A = np.ascontiguousarray(A)
    M, K = A.shape
    if K != pw.k_total:
        raise ValueError(f"A has K={K} but packed weights have K={pw.k_total}")
    N = pw.n_total
    if out.shape != (M, N):
        raise ValueError(f"out has shape {out.shape}, expected {(M, N)}")
    if out.dtype != pipeline.out_dtype:
        raise PipelineError(f"writer produces {pipeline.out_dtype} but out is {out.dtype}")
    if not (num_threads >= 1 and 0 <= thread_id < num_threads):
        raise ValueError(f"invalid thread_id={thread_id} for num_threads={num_threads}")
    if variant is KernelVariant.ACC_I16:
        _check_i16(pw, K, allow_saturation)

    wb = pw.blocking
    if kernel is None:
        cache = cache if cache is not None else dispatch.default_cache()
        kernel = cache.get_or_build(dispatch.classify(M, N, K, variant, wb))
    elif kernel.shape_class.variant != variant.value:
        raise ValueError("kernel descriptor variant does not match requested variant")
    mr = kernel.mr_eff
    bp = BlockingParams(mcb=min(wb.mcb, round_up(M, mr)), ncb=wb.ncb, kcb=wb.kcb, mr=mr, nr=wb.nr)
    macro, kind = kernel.macro, kernel.kind_code

    n_row_blocks = -(-M // bp.mcb)
    my_blocks = stripe_blocks(n_row_blocks, thread_id, num_threads)
    if not my_blocks:
        return
    need_ro = pipeline.needs_row_offsets
    pack = pack_a_with_row_offsets if need_ro else pack_a_plain
    c_buffer = np.empty((bp.mcb, N), dtype=np.int32)
    a_buffer = np.empty(bp.mcb * bp.kcb, dtype=np.uint8)
    row_sums = np.empty(bp.mcb, dtype=np.int32)
    n_kb, n_jb = pw.n_k_blocks, pw.n_col_blocks

    for ib in my_blocks:
        ic = ib * bp.mcb
        rows = min(bp.mcb, M - ic)
        c_buffer[:rows] = 0
        row_sums[:rows] = 0
        for kb in range(n_kb):
            kc = kb * bp.kcb
            pa = pack(A, ic, kc, bp, out=a_buffer)
            if need_ro:
                row_sums[:rows] += pa.row_offsets.values
            last_k = kb == n_kb - 1
            for jb in range(n_jb):
                jc = jb * bp.ncb
                cols = min(bp.ncb, N - jc)
                macro(pa.data, pw.data, pw.block_offset(kb, jb), c_buffer, jc, rows, cols,
                      pa.k_valid, bp.mr, bp.nr, bp.kcb, kind)
                if last_k:
                    ctx = BlockContext(ic, jc, A, row_sums[:rows] if need_ro else None)
                    pipeline.run_block(c_buffer[:rows, jc:jc + cols], ctx, out)


def gemm(A: np.ndarray, pw: PackedWeight, pipeline: Optional[OutputPipeline] = None,
         variant=KernelVariant.ACC_I32, num_threads: int = 1, **kw) -> np.ndarray:
    """Allocate the output and run every worker share in turn on this thread."""
    pipeline = pipeline if pipeline is not None else OutputPipeline()
    out = np.empty((np.shape(A)[0], pw.n_total), dtype=pipeline.out_dtype)
    for t in range(num_threads):
        execute_gemm(A, pw, out, pipeline, variant, t, num_threads, **kw)
    return out
