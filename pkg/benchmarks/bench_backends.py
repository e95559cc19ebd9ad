"""Compare the compiled core against the numpy fallback (and the naive oracle).

    python benchmarks/bench_backends.py [--repeats 7] [--threads 1]

Prints CSV: M,N,K,variant,backend,ns_median,gops,speedup_vs_python
(the naive row is compared with the python i32 time).
"""

import argparse
import statistics
import sys
import threading
import time

import numpy as np

from qgemm import _backend
from qgemm.kernel import execute_gemm
from qgemm.oracle import naive_gemm_i32
from qgemm.pack import BlockingParams, prepack_weights

SHAPES = [(1, 1024, 1024), (64, 800, 320), (128, 128, 128), (256, 256, 256), (512, 512, 512), (33, 4096, 512)]


def time_ns(fn, repeats):
    fn()
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return statistics.median(samples)


def run(A, pw, variant, threads):
    out = np.zeros((A.shape[0], pw.n_total), np.int32)
    if threads == 1:
        execute_gemm(A, pw, out, None, variant)
        return out
    ts = [threading.Thread(target=execute_gemm, args=(A, pw, out, None, variant, t, threads)) for t in range(threads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--naive", action="store_true", help="also time the naive oracle")
    args = ap.parse_args(argv)

    backends = _backend.available()
    if "compiled" not in backends:
        print("note: compiled core not built, timing the fallback only", file=sys.stderr)
    rng = np.random.default_rng(0)
    print("M,N,K,variant,backend,ns_median,gops,speedup_vs_python")
    for M, N, K in SHAPES:
        A = rng.integers(0, 256, (M, K), dtype=np.uint8)
        B = rng.integers(-4, 5, (K, N), dtype=np.int8)  # small enough for 16-bit accumulation at kcb=32
        pw = prepack_weights(B, BlockingParams(kcb=32))
        ops = 2.0 * M * N * K
        base = None
        for variant in ("i32", "i16"):
            times = {}
            for b in sorted(backends, reverse=True):  # python first
                with _backend.use(b):
                    times[b] = time_ns(lambda: run(A, pw, variant, args.threads), args.repeats)
            base = base or times["python"]
            for b, ns in times.items():
                print(f"{M},{N},{K},{variant},{b},{ns:.0f},{ops / ns:.4g},{times['python'] / ns:.2f}")
        if args.naive:
            ns = time_ns(lambda: naive_gemm_i32(A, B), max(1, args.repeats // 2))
            print(f"{M},{N},{K},naive,numpy,{ns:.0f},{ops / ns:.4g},{base / ns:.2f}")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
