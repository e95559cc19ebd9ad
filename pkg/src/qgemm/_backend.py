"""Kernel backend selection.

The compiled Cython core is used when it imports; otherwise the numpy
fallback.  ``QGEMM_BACKEND=python`` forces the fallback at import time and
:func:`use` switches temporarily (tests, benchmarks).
"""

from __future__ import annotations

import contextlib
import os
import threading

from qgemm import _fallback

try:
    from qgemm import _core as _compiled
except ImportError:  # no compiler at install time
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_lock = threading.Lock()


def _default() -> str:
    if _compiled is None or os.environ.get("QGEMM_BACKEND", "").lower() in ("python", "fallback"):
        return "python"
    return "compiled"


_active = _default()


def available() -> list[str]:
    return sorted(_BACKENDS)


def name() -> str:
    return _active


def get(backend: str | None = None):
    key = _active if backend in (None, "auto") else backend
    try:
        return _BACKENDS[key]
    except KeyError:
        raise ValueError(f"backend {key!r} not available (have {available()})") from None


def set_backend(backend: str) -> None:
    global _active
    if backend == "auto":
        backend = _default()
    get(backend)
    with _lock:
        _active = backend


@contextlib.contextmanager
def use(backend: str):
    prev = _active
    set_backend(backend)
    try:
        yield get(_active)
    finally:
        set_backend(prev)
