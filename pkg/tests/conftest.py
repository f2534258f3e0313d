import math

import numpy as np
import pytest

from cubemix.data import synth_dataset
from cubemix.layers import CubeMLPConfig

SMALL_SHAPE = (8, 3, 4)


def gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def unit_oracle(x, axis, w1, b1, w2, b2, gain, bias, act=gelu, adapter=None, eps=1e-5):
    """Per-fiber straight-line evaluation of LN(Aff2(act(Aff1(f))) + R(f))."""
    x = np.asarray(x, dtype=np.float64)
    out_shape = list(x.shape)
    out_shape[axis] = w2.shape[1]
    out = np.zeros(out_shape)
    others = [a for a in range(3) if a != axis]
    for i in range(x.shape[others[0]]):
        for j in range(x.shape[others[1]]):
            idx = [slice(None)] * 3
            idx[others[0]], idx[others[1]] = i, j
            f = x[tuple(idx)]
            hidden = np.array([act(v) for v in w1.T @ f + b1])
            s = w2.T @ hidden + b2
            s = s + (f if adapter is None else adapter[0].T @ f + adapter[1])
            mean = sum(s) / len(s)
            var = sum((v - mean) ** 2 for v in s) / len(s)
            out[tuple(idx)] = [(v - mean) / math.sqrt(var + eps) * g + c for v, g, c in zip(s, gain, bias)]
    return out


def fd_grad(f, arr, h=1e-6):
    """Central finite differences of scalar f() w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.fixture
def small_cfg():
    return CubeMLPConfig(SMALL_SHAPE, (8, 8), (3, 3), (4, 4))


@pytest.fixture
def small_data():
    return synth_dataset(0, 40, SMALL_SHAPE)


_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test itself still asserts."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
