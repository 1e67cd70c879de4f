import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from drciv import kernels
from drciv._accel import backend


def _backend_under(flag):
    env = dict(os.environ, DRCIV_DISABLE_NUMBA=flag)
    code = "from drciv._accel import backend; from drciv import kernels; print(backend(), kernels.fnb.__name__)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()


def test_env_flag_selects_backend():
    assert _backend_under("1") == ["numpy", "_fnb_numpy"]
    assert _backend_under("0") == ["numba", "_fnb_numba"]


def test_public_names_follow_backend():
    if backend() == "numba":
        assert kernels.fnb is kernels._fnb_numba and kernels.trim_grad is kernels._trim_grad_numba
    else:
        assert kernels.fnb is kernels._fnb_numpy and kernels.trim_grad is kernels._trim_grad_numpy


def _check_loss(r, v):
    return float(np.sum(r * (v - (r < 0))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(8, 60), p=st.integers(1, 4), v=st.floats(0.05, 0.95))
def test_fnb_backends_reach_same_loss(seed, n, p, v):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = X @ rng.normal(size=p) + rng.standard_t(3, size=n)
    y = np.ascontiguousarray(y / np.abs(y).max())
    a, _, _, ok_a = kernels._fnb_numba(X, y, v, 1e-8, 200)
    b, _, _, ok_b = kernels._fnb_numpy(X, y, v, 1e-8, 200)
    assert ok_a and ok_b
    la, lb = _check_loss(y - X @ np.asarray(a), v), _check_loss(y - X @ np.asarray(b), v)
    assert abs(la - lb) <= 1e-6 * (1 + abs(la))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 80), dx=st.integers(0, 3), mode=st.sampled_from([0, 1, 2]),
       rho=st.floats(0.0, 0.3), iota=st.floats(1e-3, 0.5))
def test_trim_grad_backends_agree(seed, n, dx, mode, rho, iota):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dx))
    D = np.ascontiguousarray(np.column_stack([np.zeros((n, dx + 1)), np.ones(n), X]))
    dq = rng.normal(0.0, 0.3, size=n)
    resid = rng.normal(size=n)
    a = kernels._trim_grad_numba(dq, resid, D, rho, iota, mode)
    b = kernels._trim_grad_numpy(dq, resid, D, rho, iota, mode)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
