"""Command-line harness: ``verify``, ``bench`` and ``demo``."""

from __future__ import annotations

import argparse
import statistics
import sys
import threading
import time
from pathlib import Path

import numpy as np

from qgemm import _backend, oracle
from qgemm.dispatch import default_cache
from qgemm.kernel import KernelVariant, execute_gemm
from qgemm.pack import BlockingParams, prepack_split, prepack_weights, round_up
from qgemm.pipeline import OutputPipeline, Requantize, SpMDMAdd, WriteRawI32
from qgemm.quant import RequantParams, choose_quant_params, quantize
from qgemm.sparse import SaturationBoundError, max_threshold, split_outliers

EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2

DEFAULT_SHAPES = [
    (1, 1, 1),
    (1, 64, 64),
    (1, 256, 1024),
    (16, 16, 16),
    (64, 64, 64),
    (64, 800, 320),
    (128, 128, 128),
    (256, 256, 256),
    (512, 512, 512),
]

BENCH_HEADER = "M,N,K,variant,threads,ns_median,gops"


class UsageError(Exception):
    pass


def parse_shapes(text: str) -> list[tuple[int, int, int]]:
    shapes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise UsageError(f"line {lineno}: expected 'M N K', got {raw!r}")
        try:
            dims = tuple(int(p, 10) for p in parts)
        except ValueError:
            raise UsageError(f"line {lineno}: non-integer dimension in {raw!r}") from None
        if min(dims) < 1:
            raise UsageError(f"line {lineno}: dimensions must be >= 1")
        shapes.append(dims)
    return shapes


def load_shapes(path):
    if path is None:
        return list(DEFAULT_SHAPES)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read shapes file: {e}") from None
    shapes = parse_shapes(text)
    if not shapes:
        raise UsageError(f"no shapes in {path}")
    return shapes


def blocking_from_args(args, base: BlockingParams | None = None) -> BlockingParams:
    base = base or BlockingParams()
    kw = {k: getattr(args, k) for k in ("mcb", "ncb", "kcb", "mr", "nr") if getattr(args, k) is not None}
    try:
        return base.with_(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


def run_threads(A, pw, out, pipeline, variant, threads):
    """Run one ``execute_gemm`` per worker on ``threads`` fresh threads."""
    errors = []

    def work(tid):
        try:
            execute_gemm(A, pw, out, pipeline, variant, tid, threads)
        except BaseException as e:  # re-raised on the calling thread
            errors.append(e)

    if threads == 1:
        work(0)
    else:
        workers = [threading.Thread(target=work, args=(t,)) for t in range(threads)]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
    if errors:
        raise errors[0]
    return out


def _prepare_weights(B, bp, variant, threshold):
    """Pack ``B`` for ``variant``; for 16-bit, split outliers first."""
    K = B.shape[0]
    if variant is KernelVariant.ACC_I32:
        return prepack_weights(B, bp), []
    kcb_eff = min(bp.kcb, round_up(K, 2))
    T = threshold if threshold is not None else max_threshold(kcb_eff)
    split = split_outliers(B, T)
    return prepack_split(split, bp), [SpMDMAdd(split.sparse)]


def _random_problem(rng, M, N, K):
    A = rng.integers(0, 256, size=(M, K), dtype=np.uint8)
    B = rng.integers(-128, 128, size=(K, N), dtype=np.int8)
    return A, B


def cmd_verify(args) -> int:
    shapes = load_shapes(args.shapes)
    bp = blocking_from_args(args)
    variant = KernelVariant.parse(args.variant)
    rng = np.random.default_rng(args.seed)
    failures = 0
    for M, N, K in shapes:
        A, B = _random_problem(rng, M, N, K)
        pw, stages = _prepare_weights(B, bp, variant, args.threshold)
        raw = run_threads(A, pw, np.empty((M, N), np.int32), OutputPipeline(stages + [WriteRawI32()]),
                          variant, args.threads)
        raw_dev = int(np.abs(raw.astype(np.int64) - oracle.naive_gemm_i32(A, B)).max())

        # requantized path against the real-domain reference
        A_real = rng.uniform(-1.0, 3.0, size=(M, K))
        B_real = rng.uniform(-0.4, 1.0, size=(K, N))
        qa = choose_quant_params(A_real.min(), A_real.max(), signed=False)
        qb = choose_quant_params(B_real.min(), B_real.max(), signed=True)
        ref_real = (A_real @ B_real)
        qc = choose_quant_params(ref_real.min(), ref_real.max(), signed=False)
        Aq, Bq = quantize(A_real, qa), quantize(B_real, qb)
        pwq, stages_q = _prepare_weights(Bq, bp, variant, args.threshold)
        rp = RequantParams.from_quant_params(qa, qb, qc, K)
        outq = run_threads(Aq, pwq, np.empty((M, N), np.uint8),
                           OutputPipeline(stages_q + [Requantize(rp, pwq.col_offsets)]), variant, args.threads)
        expect = oracle.real_domain_reference(A_real, B_real, qa, qb, qc)
        q_dev = int(np.abs(outq.astype(np.int32) - expect.astype(np.int32)).max())

        ok = raw_dev == 0 and q_dev <= 1
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} M={M} N={N} K={K} variant={variant.value} "
              f"threads={args.threads} max_dev_raw={raw_dev} max_dev_quant={q_dev}")
    print(f"summary: {len(shapes) - failures}/{len(shapes)} shapes passed")
    return EXIT_OK if failures == 0 else EXIT_FAIL


def _time_ns(fn, repeats, warmup=2):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def _bench_row(M, N, K, variant, threads, ns):
    gops = 2.0 * M * N * K / ns if ns else float("inf")
    return f"{M},{N},{K},{variant},{threads},{ns},{gops:.6g}"


def cmd_bench(args) -> int:
    shapes = load_shapes(args.shapes)
    bp = blocking_from_args(args)
    variant = KernelVariant.parse(args.variant)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    rng = np.random.default_rng(args.seed)
    print(BENCH_HEADER)
    for M, N, K in shapes:
        A, B = _random_problem(rng, M, N, K)
        pw, stages = _prepare_weights(B, bp, variant, args.threshold)
        pipeline = OutputPipeline(stages + [WriteRawI32()])
        out = np.empty((M, N), np.int32)
        ns = _time_ns(lambda: run_threads(A, pw, out, pipeline, variant, args.threads), args.repeats)
        print(_bench_row(M, N, K, variant.value, args.threads, ns), flush=True)
        if args.compare_naive:
            ns = _time_ns(lambda: oracle.naive_gemm_i32(A, B), args.repeats)
            print(_bench_row(M, N, K, "naive", 1, ns), flush=True)
    return EXIT_OK


def cmd_demo(args) -> int:
    M, N, K = args.m, args.n, args.k
    if min(M, N, K) < 1:
        raise UsageError("dimensions must be >= 1")
    if not 0.0 <= args.outlier_density <= 1.0:
        raise UsageError("--outlier-density must be in [0, 1]")
    bp = blocking_from_args(args, BlockingParams(kcb=16))
    rng = np.random.default_rng(args.seed)

    A_real = rng.uniform(0.0, 4.0, size=(M, K))
    B_real = rng.normal(0.0, 0.02, size=(K, N))
    hit = rng.random((K, N)) < args.outlier_density
    B_real[hit] = rng.choice([-1.0, 1.0], size=int(hit.sum()))
    qa = choose_quant_params(A_real.min(), A_real.max(), signed=False)
    qb = choose_quant_params(B_real.min(), B_real.max(), signed=True)
    Aq, Bq = quantize(A_real, qa), quantize(B_real, qb)
    # output range from the dequantized product the engine actually represents
    qc_range = (Aq.astype(np.float64) - qa.zero_point) @ (Bq.astype(np.float64) - qb.zero_point)
    qc_range *= qa.scale * qb.scale
    qc = choose_quant_params(qc_range.min(), qc_range.max(), signed=False)

    kcb_eff = min(bp.kcb, round_up(K, 2))
    T = args.threshold if args.threshold is not None else max_threshold(kcb_eff)
    split = split_outliers(Bq, T)
    pw = prepack_split(split, bp)
    rp = RequantParams.from_quant_params(qa, qb, qc, K)
    pipeline = OutputPipeline([SpMDMAdd(split.sparse), Requantize(rp, pw.col_offsets)])
    out = run_threads(Aq, pw, np.empty((M, N), np.uint8), pipeline, KernelVariant.ACC_I16, args.threads)

    raw16 = run_threads(Aq, pw, np.empty((M, N), np.int32),
                        OutputPipeline([SpMDMAdd(split.sparse), WriteRawI32()]), KernelVariant.ACC_I16, args.threads)
    exact = int(np.abs(raw16.astype(np.int64) - oracle.naive_gemm_i32(Aq, Bq)).max())
    expect = oracle.real_domain_reference(A_real, B_real, qa, qb, qc)
    q_dev = int(np.abs(out.astype(np.int32) - expect.astype(np.int32)).max())

    nnz = split.sparse.nnz
    ok = exact == 0 and q_dev <= 1
    print("int8 GEMM with 16-bit accumulation and outlier split")
    print(f"shape: M={M} N={N} K={K}  blocking: mcb={bp.mcb} ncb={bp.ncb} kcb={bp.kcb} mr={bp.mr} nr={bp.nr}")
    print(f"quant A: scale={qa.scale:.6g} zp={qa.zero_point}  B: scale={qb.scale:.6g} zp={qb.zero_point}  "
          f"C: scale={qc.scale:.6g} zp={qc.zero_point}")
    print(f"outlier threshold T={T} (255*(T-1)*kcb = {255 * (T - 1) * kcb_eff} <= 32767)")
    print(f"sparse outliers: nnz={nnz} density={nnz / (K * N):.4%}")
    print(f"pipeline: {' -> '.join(type(s).__name__ for s in pipeline.stages)}")
    print(f"raw accumulators vs exact int32 oracle: max_dev={exact}")
    print(f"requantized output vs real-domain oracle: max_dev={q_dev} quantum")
    print("result: " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--variant", choices=["i32", "i16"], default="i32")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--threshold", type=int, default=None,
                        help="outlier threshold for i16 (default: largest provably safe)")
    common.add_argument("--backend", choices=["auto", "compiled", "python"], default="auto")
    for name in ("mcb", "ncb", "kcb", "mr", "nr"):
        common.add_argument(f"--{name}", type=int, default=None)

    p = argparse.ArgumentParser(prog="qgemm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="engine vs oracle on given shapes")
    v.add_argument("--shapes", default=None)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", parents=[common], help="timing sweep, CSV to stdout")
    b.add_argument("--shapes", default=None)
    b.add_argument("--repeats", type=int, default=11)
    b.add_argument("--compare-naive", action="store_true")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("demo", parents=[common], help="16-bit accumulation + outlier split pipeline")
    d.add_argument("--m", "-M", type=int, default=64)
    d.add_argument("--n", "-N", type=int, default=96)
    d.add_argument("--k", "-K", type=int, default=300)
    d.add_argument("--outlier-density", type=float, default=0.01)
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        with _backend.use(args.backend):
            return args.func(args)
    except (UsageError, SaturationBoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
