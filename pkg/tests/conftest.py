import warnings
from fractions import Fraction

import numpy as np
import pytest

from localtb.czop import assemble, hilbert_kernel, zero_kernel
from localtb.grid import GridParams


def quiet_params(**kw) -> GridParams:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return GridParams(**kw)


@pytest.fixture(scope="session")
def hilbert_ops():
    cache = {}

    def get(L):
        if L not in cache:
            cache[L] = assemble(hilbert_kernel(), L)
        return cache[L]

    return get


@pytest.fixture(scope="session")
def zero_ops():
    cache = {}

    def get(L, n=1):
        if (L, n) not in cache:
            cache[(L, n)] = assemble(zero_kernel(n), L)
        return cache[(L, n)]

    return get


@pytest.fixture
def half_eps():
    return Fraction(1, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
