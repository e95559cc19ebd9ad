"""Shape-specialized kernel selection with a memoized kernel cache.

Instead of emitting machine code per shape, a small family of kernels is
compiled ahead of time and a shape class maps onto one of them:

* ``M == 1``: the single-row kernel
* ``M < mr``: the tile kernel with the register tile shrunk to ``M`` rows
* otherwise: the full ``mr x nr`` tile kernel

The column tile never changes (weights are prepacked with ``nr``), but small
``N`` narrows the computed width.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

from qgemm import _backend
from qgemm.pack import BlockingParams, round_up


def _dim_class(x: int, tile: int) -> str:
    if x == 1:
        return "1"
    if x < tile:
        # small extents get a kernel sized exactly to them
        return str(x)
    return "mult" if x % tile == 0 else "general"


@dataclass(frozen=True)
class ShapeClass:
    m_class: str
    n_class: str
    k_class: str
    variant: str
    mr: int
    nr: int


@dataclass(frozen=True)
class KernelDescriptor:
    shape_class: ShapeClass
    mr_eff: int
    nr_eff: int
    kind: str  # "row" or "tile"
    backend: str
    macro: Callable

    @property
    def kind_code(self) -> int:
        return 1 if self.kind == "row" else 0


def classify(M: int, N: int, K: int, variant, bp: BlockingParams) -> ShapeClass:
    v = getattr(variant, "value", variant)
    return ShapeClass(_dim_class(M, bp.mr), _dim_class(N, bp.nr), _dim_class(K, bp.kcb), v, bp.mr, bp.nr)


def select_blocking(M: int, N: int, K: int, defaults: BlockingParams) -> BlockingParams:
    """Shrink cache blocks and the row tile to fit small problems."""
    if min(M, N, K) < 1:
        raise ValueError(f"dimensions must be >= 1, got M={M} N={N} K={K}")
    mr = min(defaults.mr, M)
    nr = min(defaults.nr, N)
    return BlockingParams(
        mcb=min(defaults.mcb, round_up(M, mr)),
        ncb=min(defaults.ncb, round_up(N, nr)),
        kcb=min(defaults.kcb, round_up(K, 2)),
        mr=mr,
        nr=nr,
    )


def _build(sc: ShapeClass, backend: str) -> KernelDescriptor:
    impl = _backend.get(backend)
    mr_eff = int(sc.m_class) if sc.m_class.isdigit() else sc.mr
    nr_eff = int(sc.n_class) if sc.n_class.isdigit() else sc.nr
    return KernelDescriptor(
        shape_class=sc,
        mr_eff=mr_eff,
        nr_eff=nr_eff,
        kind="row" if mr_eff == 1 else "tile",
        backend=impl.NAME,
        macro=getattr(impl, f"macro_{sc.variant}"),
    )


def generic_descriptor(variant, bp: BlockingParams, backend: str | None = None) -> KernelDescriptor:
    """The unspecialized full-tile kernel, valid for every shape."""
    v = getattr(variant, "value", variant)
    sc = ShapeClass("general", "general", "general", v, bp.mr, bp.nr)
    return _build(sc, backend or _backend.name())


class KernelCache:
    """Thread-safe memo table from shape class to kernel descriptor."""

    def __init__(self, backend: str | None = None):
        self.backend = backend
        self._table: dict[ShapeClass, KernelDescriptor] = {}
        self._lock = threading.Lock()
        self.builds = 0
        self.hits = 0

    def __len__(self):
        return len(self._table)

    def __contains__(self, sc):
        return sc in self._table

    def get_or_build(self, sc: ShapeClass) -> KernelDescriptor:
        desc = self._table.get(sc)
        if desc is not None:
            with self._lock:
                self.hits += 1
            return desc
        with self._lock:
            desc = self._table.get(sc)
            if desc is None:
                desc = _build(sc, self.backend or _backend.name())
                self._table[sc] = desc
                self.builds += 1
            else:
                self.hits += 1
        return desc

    def clear(self):
        with self._lock:
            self._table.clear()
            self.builds = self.hits = 0


def get_or_build_kernel(cache: KernelCache, shape_class: ShapeClass) -> KernelDescriptor:
    return cache.get_or_build(shape_class)


_default_caches: dict[str, KernelCache] = {}
_default_lock = threading.Lock()


def default_cache() -> KernelCache:
    name = _backend.name()
    with _default_lock:
        if name not in _default_caches:
            _default_caches[name] = KernelCache(name)
        return _default_caches[name]
