import zlib

import numpy as np
import pytest

import qgemm
from qgemm import _backend

BACKENDS = _backend.available()

_acceptance_lines: list[str] = []


@pytest.fixture(params=BACKENDS)
def backend(request):
    with _backend.use(request.param):
        yield request.param


@pytest.fixture
def rng(request):
    # per-test deterministic stream
    seed = zlib.crc32(request.node.nodeid.encode())
    return np.random.default_rng(seed)


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def _report(name: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _acceptance_lines.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section(f"acceptance criteria (backend: {qgemm.backend_name()})")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
