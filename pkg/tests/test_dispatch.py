import itertools
import threading

import numpy as np
import pytest

from qgemm.dispatch import (
    KernelCache,
    classify,
    generic_descriptor,
    get_or_build_kernel,
    select_blocking,
)
from qgemm.kernel import KernelVariant, gemm
from qgemm.oracle import naive_gemm_i32
from qgemm.pack import BlockingParams, prepack_weights

from _util import rand_a, rand_b

DEFAULT = BlockingParams()


class TestSelectBlocking:
    def test_m_equals_one(self):
        bp = select_blocking(1, 100, 100, DEFAULT)
        assert bp.mr == 1 and bp.mcb == 1

    def test_large_unchanged(self):
        assert select_blocking(10**6, 10**6, 10**6, DEFAULT) == DEFAULT

    def test_small_shape(self):
        bp = select_blocking(5, 3, 7, DEFAULT)
        assert (bp.mcb, bp.ncb, bp.kcb, bp.mr, bp.nr) == (5, 3, 8, 5, 3)

    def test_partial_clamp(self):
        bp = select_blocking(20, 40, 300, DEFAULT)
        assert (bp.mcb, bp.ncb, bp.kcb, bp.mr, bp.nr) == (28, 32, 256, 14, 32)

    def test_invariants_preserved(self):
        for M, N, K in itertools.product(range(1, 40, 3), repeat=3):
            select_blocking(M, N, K, DEFAULT)  # BlockingParams validates itself

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            select_blocking(0, 1, 1, DEFAULT)


class TestClassify:
    def test_classes(self):
        sc = classify(1, 100, 512, KernelVariant.ACC_I32, DEFAULT)
        assert (sc.m_class, sc.n_class, sc.k_class, sc.variant) == ("1", "general", "mult", "i32")
        assert classify(5, 32, 3, "i16", DEFAULT).m_class == "5"
        assert classify(28, 31, 3, "i16", DEFAULT).m_class == "mult"
        assert classify(28, 31, 3, "i16", DEFAULT).n_class == "31"

    def test_pure(self):
        assert classify(7, 9, 11, "i32", DEFAULT) == classify(7, 9, 11, "i32", DEFAULT)


class TestKernelCache:
    def test_memoized(self):
        cache = KernelCache()
        sc = classify(1, 8, 8, "i32", DEFAULT)
        d1 = get_or_build_kernel(cache, sc)
        d2 = get_or_build_kernel(cache, sc)
        assert d1 is d2
        assert cache.builds == 1 and cache.hits == 1

    def test_distinct_classes(self):
        cache = KernelCache()
        a = get_or_build_kernel(cache, classify(1, 8, 8, "i32", DEFAULT))
        b = get_or_build_kernel(cache, classify(64, 64, 64, "i32", DEFAULT))
        c = get_or_build_kernel(cache, classify(64, 64, 64, "i16", DEFAULT))
        assert cache.builds == 3 and len({id(a), id(b), id(c)}) == 3
        assert a.kind == "row" and a.mr_eff == 1
        assert b.kind == "tile" and b.mr_eff == 14

    def test_racing_lookups(self):
        cache = KernelCache()
        sc = classify(3, 3, 3, "i32", DEFAULT)
        barrier = threading.Barrier(8)
        got = []

        def look():
            barrier.wait()
            got.append(get_or_build_kernel(cache, sc))

        ts = [threading.Thread(target=look) for _ in range(8)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert cache.builds == 1 and cache.hits == 7
        assert all(d is got[0] for d in got)

    def test_engine_uses_cache(self, backend, rng):
        cache = KernelCache()
        B = rand_b(rng, 10, 10)
        pw = prepack_weights(B)
        for M in (1, 1, 3, 3, 14, 28):
            gemm(rand_a(rng, M, 10), pw, cache=cache)
        assert cache.builds == 3  # "1", "3", "mult"


class TestSpecializedEqualsGeneric:
    @pytest.mark.parametrize("variant", ["i32", "i16"])
    def test_every_class(self, backend, variant, rng):
        bp = BlockingParams(mcb=12, ncb=16, kcb=8, mr=4, nr=8)
        seen = set()
        for M, N, K in itertools.product([1, 2, 3, 4, 8, 9], [1, 5, 8, 16, 17], [1, 7, 8, 24]):
            lo, hi = (-16, 16) if variant == "i16" else (-128, 127)
            A, B = rand_a(rng, M, K), rand_b(rng, K, N, lo=lo, hi=hi)
            pw = prepack_weights(B, bp)
            seen.add(classify(M, N, K, variant, bp))
            spec = gemm(A, pw, variant=variant, cache=KernelCache())
            gen = gemm(A, pw, variant=variant, kernel=generic_descriptor(variant, bp))
            assert np.array_equal(spec, gen), (M, N, K)
            assert np.array_equal(spec, naive_gemm_i32(A, B))
        assert len(seen) > 30

    def test_descriptor_variant_mismatch(self, rng):
        pw = prepack_weights(rand_b(rng, 4, 4))
        with pytest.raises(ValueError):
            gemm(rand_a(rng, 2, 4), pw, variant="i32", kernel=generic_descriptor("i16", pw.blocking))
