import importlib

import numpy as np
import pytest

from stfmerge import _kernels_py


def _backends():
    out = [pytest.param(_kernels_py, id="python")]
    try:
        compiled = importlib.import_module("stfmerge._kernels")
    except ImportError:
        out.append(pytest.param(None, id="cython", marks=pytest.mark.skip(reason="extension not built")))
    else:
        out.append(pytest.param(compiled, id="cython"))
    return out


@pytest.fixture(params=_backends())
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_fro(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(b)
    return np.linalg.norm(a - b) / (denom if denom > 0 else 1.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
