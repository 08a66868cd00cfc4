"""Shared fixtures and independent reference implementations."""

import math

import numpy as np
import pytest

from tailorsum.data import EncodedExample, STOP_ID
from tailorsum.model import Dims, ModelParams


def scalar_sigmoid_ref(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_lstm_step(W, b, x, h, c):
    """Gate equations written one unit at a time with plain floats."""
    H = len(h)
    xh = list(x) + list(h)
    z = []
    for r in range(4 * H):
        acc = b[r]
        for k, v in enumerate(xh):
            acc += W[r][k] * v
        z.append(acc)
    h_new, c_new = [], []
    for j in range(H):
        i = scalar_sigmoid_ref(z[j])
        f = scalar_sigmoid_ref(z[H + j])
        g = math.tanh(z[2 * H + j])
        o = scalar_sigmoid_ref(z[3 * H + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


@pytest.fixture
def tiny_dims():
    return Dims(vocab=20, emb=8, hidden=8, attn=8)


@pytest.fixture
def tiny_params(tiny_dims):
    return ModelParams.init(tiny_dims, np.random.default_rng(42), scale=1.0)


@pytest.fixture
def tiny_example():
    # two source OOVs (ids 20, 21); target copies one of them
    return EncodedExample(np.array([5, 6, 20, 7, 21]), np.array([6, 20, 9, STOP_ID]), ("zork", "quux"), 22)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` logs one verdict line and asserts it."""
    def report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        request.config.stash.setdefault(_CRITERIA, []).append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
