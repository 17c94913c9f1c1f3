import os
import subprocess
import sys

import numpy as np
import pytest

from patchpop import _kernels
from patchpop.model import build_model, load_config, mirror_quadratic
from patchpop.pde import Stepper, init_state

from conftest import CONFIGS, PAPER_BUMPS

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable")


def stepper_and_state(K=2, N=101, eps=0.05):
    m = mirror_quadratic(1.0, epsilon=eps)
    if K == 3:
        m = build_model(load_config(CONFIGS / "chain3.yaml")).with_epsilon(eps)
        bumps = list(PAPER_BUMPS) + [PAPER_BUMPS[0]]
    else:
        bumps = PAPER_BUMPS
    st = init_state(m, bumps, N)
    return Stepper(m, st.grid, 1e-3), st.n.copy()


@needs_numba
@pytest.mark.parametrize("K", [2, 3])
def test_jit_and_numpy_paths_agree(K):
    s, n0 = stepper_and_state(K)
    a, b = n0.copy(), n0.copy()
    s.op.advance(a, s.base, s.sens, s.psi_w, s.mig, 500, use_jit=True)
    s.op.advance(b, s.base, s.sens, s.psi_w, s.mig, 500, use_jit=False)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-250)


@pytest.mark.parametrize("K", [2, 3])
def test_python_reference_kernel_agrees(K):
    s, n0 = stepper_and_state(K, N=41)
    a, b = n0.copy(), n0.copy()
    op = s.op
    _kernels._imex_advance_py(a, s.base, s.sens, s.psi_w, s.mig, op.inv_den, op.mk, op.cprime,
                              op.dt, 20, np.empty_like(a))
    op.advance(b, s.base, s.sens, s.psi_w, s.mig, 20, use_jit=False)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-250)


def test_thomas_solve_matches_dense():
    op = _kernels.ImexOperator(31, 0.1, 1e-2, 0.5)
    rhs = np.random.default_rng(1).normal(size=31)
    D = np.diag(op.diag) + np.diag(op.sup, 1) + np.diag(op.sub, -1)
    np.testing.assert_allclose(op.solve(rhs), np.linalg.solve(D, rhs), rtol=1e-12)


@pytest.mark.parametrize("use_jit", [True, False])
def test_batched_power_paths(use_jit):
    if use_jit and not _kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(3)
    mats = rng.uniform(0, 2, (40, 4, 4))
    lam, chi, iters, resid = _kernels.batched_power(mats, use_jit=use_jit)
    ref = np.linalg.eigvals(mats).real.max(axis=1)
    np.testing.assert_allclose(lam, ref, atol=1e-10)
    np.testing.assert_allclose(chi.sum(axis=1), 1.0)
    assert np.all(resid < 1e-10)


def test_flush_keeps_nan_visible():
    s, n0 = stepper_and_state(2, N=41)
    n0[0, 20] = np.nan
    s.advance(n0, 1)
    assert np.isnan(n0).any()


def test_disable_flag_selects_numpy():
    env = dict(os.environ, PATCHPOP_DISABLE_JIT="1")
    out = subprocess.run([sys.executable, "-c", "from patchpop import _kernels; print(_kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@pytest.mark.parametrize("use_jit", [True, False])
def test_batched_power_small_spectral_gap(use_jit):
    if use_jit and not _kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    # equal diagonals, weak coupling: the shifted power method alone needs ~1e5 sweeps
    mats = np.array([[[15.0, 0.00390625, 0.0], [0.001, 15.0, 1e-4], [0.0, 1e-4, 15.0]],
                     [[-3.0, 1e-6, 0.0], [1e-6, -3.0, 1e-6], [0.0, 1e-6, -3.0]]])
    lam, chi, iters, resid = _kernels.batched_power(mats, use_jit=use_jit)
    ref = np.linalg.eigvals(mats).real.max(axis=1)
    np.testing.assert_allclose(lam, ref, atol=1e-10)
    assert np.all(iters < 10_000) and np.all(resid < 1e-10) and np.all(chi > 0)
