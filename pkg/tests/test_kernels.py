import os
import subprocess
import sys

import numpy as np
import pytest

from sfwcompress import _kernels_py, kernels
from sfwcompress.numerics import EPS

BACKENDS = kernels.available_backends()


def test_fallback_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


def test_env_var_forces_python_backend():
    env = dict(os.environ, SFWCOMPRESS_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import sfwcompress; print(sfwcompress.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def _jacobi(mod, B):
    at = np.ascontiguousarray(B.T).copy()
    vt = np.eye(B.shape[1])
    used = mod.jacobi_sweeps(at, vt, max(B.shape[1], 2) * EPS, 60, 0.0)
    return used, at, vt


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")
@pytest.mark.parametrize("shape", [(3, 3), (10, 4), (30, 30), (40, 12)])
def test_jacobi_backends_agree(shape):
    B = np.random.default_rng(shape[0] * 100 + shape[1]).standard_normal(shape)
    u1, a1, v1 = _jacobi(BACKENDS["python"], B)
    u2, a2, v2 = _jacobi(BACKENDS["cython"], B)
    assert u1 == u2 and u1 > 0
    # same rotation sequence; only the dot-product summation order differs
    assert np.max(np.abs(a1 - a2)) <= 1e-10 * np.linalg.norm(B)
    assert np.max(np.abs(v1 - v2)) <= 1e-10


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_jacobi_orthogonalizes(name):
    B = np.random.default_rng(4).standard_normal((12, 7))
    used, at, vt = _jacobi(BACKENDS[name], B)
    assert used > 0
    G = at @ at.T
    off = G - np.diag(np.diag(G))
    assert np.max(np.abs(off)) <= 1e-12 * np.max(np.diag(G))
    assert np.allclose(vt @ vt.T, np.eye(7), atol=1e-12)
    # rows of at are B v_i
    assert np.allclose(at, (B @ vt.T).T, atol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_jacobi_reports_exhaustion(name):
    B = np.random.default_rng(5).standard_normal((8, 8))
    at = np.ascontiguousarray(B.T).copy()
    assert BACKENDS[name].jacobi_sweeps(at, np.eye(8), 1e-300, 1, 0.0) == -1


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_ksupport_kernel_limits(name):
    f = BACKENDS[name].ksupport_norm_sorted
    z = np.array([3.0, 2.0, 1.0, 0.5])
    assert f(z, 1) == pytest.approx(z.sum())
    assert f(z, 4) == pytest.approx(np.linalg.norm(z))
    assert f(np.zeros(0), 1) == 0.0
    assert f(np.array([1.0, 1.0]), 1) == pytest.approx(2.0)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")
def test_ksupport_backends_agree():
    gen = np.random.default_rng(9)
    for _ in range(500):
        d = int(gen.integers(1, 40))
        z = np.sort(np.abs(gen.standard_normal(d) * gen.choice([1e-3, 1.0, 1e3])))[::-1].copy()
        if gen.random() < 0.3:
            z = np.round(z, 1)[::-1]
            z = np.sort(z)[::-1].copy()
        k = int(gen.integers(1, d + 1))
        a = BACKENDS["python"].ksupport_norm_sorted(z, k)
        b = BACKENDS["cython"].ksupport_norm_sorted(z, k)
        assert a == pytest.approx(b, rel=1e-13, abs=1e-300)


def test_python_module_is_pure():
    assert _kernels_py.NAME == "python"
