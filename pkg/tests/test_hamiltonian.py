import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchpop import _kernels
from patchpop.errors import PositivityError
from patchpop.hamiltonian import (cluster_points, effective_hamiltonian, fitness_matrix,
                                  golden_max, hamiltonian_values, landscape, perron_pair,
                                  quartic_G, trace_F, write_landscape_csv)
from patchpop.model import GrowthSpec, PatchModel, mirror_quadratic

SQ3 = np.sqrt(3.0)
M71, M72 = mirror_quadratic(2.5), mirror_quadratic(1.0)


def single_patch(b=0.0, c=0.0):
    g = GrowthSpec("quadratic", a=-1.0, b=b, c=c, d=1.0)
    return PatchModel(L=2, epsilon=1e-3, growth=(g,), psi=(1.0,), nu=np.zeros((1, 1)))


def metzler(rng, K, scale=5.0):
    A = rng.uniform(0, scale, (K, K))
    A[np.diag_indices(K)] = rng.uniform(-2 * scale, scale, K)
    return A


def test_fitness_matrix_examples():
    A = fitness_matrix(M72, SQ3 / 2, (2.25, 2.25)).A
    np.testing.assert_allclose(A, [[-(2 + SQ3), 1], [1, -(2 - SQ3)]], atol=1e-12)
    np.testing.assert_allclose(A, [[-3.732051, 1], [1, -0.267949]], atol=1e-6)
    np.testing.assert_allclose(fitness_matrix(M71, 0.0, (2, 2)).A, [[-2.5, 2.5], [2.5, -2.5]])
    m1 = single_patch(c=3.0)
    A1 = fitness_matrix(m1, 0.7, (1.0,)).A
    assert A1.shape == (1, 1) and A1[0, 0] == pytest.approx(3 - 0.49 - 1)


def test_perron_examples():
    pp = perron_pair(np.array([[-1.0, 1.0], [1.0, -1.0]]))
    assert pp.lam == pytest.approx(0, abs=1e-15)
    np.testing.assert_allclose(pp.chi, [0.5, 0.5])
    pp = perron_pair(fitness_matrix(M72, SQ3 / 2, (2.25, 2.25)))
    assert abs(pp.lam) <= 1e-12
    np.testing.assert_allclose(pp.chi, [1 / (3 + SQ3), (2 + SQ3) / (3 + SQ3)], atol=1e-12)
    np.testing.assert_allclose(pp.chi, [0.211325, 0.788675], atol=1e-6)
    pp = perron_pair(np.array([[-5.0, 1.0], [1.0, -5.0]]))
    assert pp.lam == pytest.approx(-4.0)
    np.testing.assert_allclose(pp.chi, [0.5, 0.5])
    assert pp.residual <= 1e-12


def test_perron_rejects_decoupled_patches():
    with pytest.raises(PositivityError):
        perron_pair(np.array([[-1.0, 0.0], [0.0, -2.0]]))
    with pytest.raises(ValueError):
        perron_pair(np.array([[-1.0, -0.5], [1.0, -2.0]]))


def test_hamiltonian_examples():
    assert abs(effective_hamiltonian(M72, SQ3 / 2, (2.25, 2.25))) <= 1e-10
    assert abs(effective_hamiltonian(M71, 0.0, (2, 2))) <= 1e-12
    # A = [[-1.25, 1], [1, -1.25]] at x = 0: eigenvalues -0.25 and -2.25
    A = fitness_matrix(M72, 0.0, (2.25, 2.25)).A
    np.testing.assert_allclose(A, [[-1.25, 1], [1, -1.25]])
    H0 = effective_hamiltonian(M72, 0.0, (2.25, 2.25))
    assert H0 == pytest.approx(-0.25, abs=1e-12)
    assert H0 == pytest.approx(np.linalg.eigvals(A).real.max(), abs=1e-12)


def test_quartic_G_examples():
    assert abs(quartic_G(M72, SQ3 / 2, (2.25, 2.25))) <= 1e-12
    assert quartic_G(M71, 0.0, (2, 2)) == pytest.approx(0, abs=1e-12)
    assert quartic_G(M72, 0.0, (2.25, 2.25)) == pytest.approx((-1.25) ** 2 - 1)
    with pytest.raises(ValueError):
        quartic_G(single_patch(), 0.0, (1.0,))


def test_landscape_examples():
    land = landscape(M72, (2.25, 2.25), 801)
    assert abs(land.max_H) <= 1e-8
    np.testing.assert_allclose(land.argmax, [-SQ3 / 2, SQ3 / 2], atol=1e-6)
    land = landscape(M71, (2, 2), 801)
    assert land.argmax.size == 1 and abs(land.argmax[0]) <= 1e-6 and abs(land.max_H) <= 1e-10
    land = landscape(single_patch(), (0.0,), 101)
    assert land.argmax.size == 1 and abs(land.argmax[0]) <= 1e-6 and abs(land.max_H) <= 1e-12
    assert land.F is None and land.G is None


def test_degenerate_landscape_flagged():
    g = GrowthSpec("quadratic", a=-1e-300, b=0.0, c=1.0, d=1.0)
    m = PatchModel(L=1, epsilon=1e-3, growth=(g,), psi=(1.0,), nu=np.zeros((1, 1)))
    assert landscape(m, (1.0,), 201).degenerate


def test_landscape_csv(tmp_path):
    land = landscape(M72, (2.25, 2.25), 11)
    write_landscape_csv(land, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "x,H,F,G" and len(lines) == 12


@settings(max_examples=1000, deadline=None)
@given(st.tuples(st.floats(-20, 20), st.floats(1e-3, 10), st.floats(1e-3, 10), st.floats(-20, 20)))
def test_closed_form_matches_power_iteration(entries):
    a11, a12, a21, a22 = entries
    A = np.array([[a11, a12], [a21, a22]])
    closed = perron_pair(A)
    lam, chi, iters, _ = _kernels.batched_power(A[None])
    assert iters[0] < 100_000
    assert abs(closed.lam - lam[0]) <= 1e-10 * (1 + abs(closed.lam))
    norm = 1 + np.abs(A).sum(axis=1).max()
    assert closed.residual <= 1e-10 * norm
    assert closed.lam >= max(a11, a22)


@pytest.mark.parametrize("K", [3, 4, 6])
def test_power_iteration_against_dense_eigenvalues(K):
    rng = np.random.default_rng(K)
    for _ in range(50):
        A = metzler(rng, K)
        pp = perron_pair(A)
        ref = np.linalg.eigvals(A).real.max()
        assert pp.lam == pytest.approx(ref, abs=1e-9 * (1 + abs(ref)))
        assert pp.lam >= A.diagonal().max()
        assert pp.residual <= 1e-10 * (1 + np.abs(A).sum(axis=1).max())
        assert np.all(pp.chi > 0) and pp.chi.sum() == pytest.approx(1)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-2, 2), I1=st.floats(0, 5), I2=st.floats(0, 5), k=st.integers(0, 1),
       nu=st.floats(0.1, 3))
def test_H_decreasing_in_each_pressure(x, I1, I2, k, nu):
    m = mirror_quadratic(nu)
    I = np.array([I1, I2])
    J = I.copy()
    J[k] += 1e-3
    assert effective_hamiltonian(m, x, J) < effective_hamiltonian(m, x, I)


@pytest.mark.parametrize("nu,I", [(1.0, 2.25), (1.0, 1.0), (2.5, 2.0), (0.3, 3.5)])
def test_sign_equivalence_with_F_and_G(nu, I):
    m = mirror_quadratic(nu)
    xs = np.linspace(-2, 2, 801)
    H = hamiltonian_values(m, xs, (I, I))
    F, G = trace_F(m, xs, (I, I)), quartic_G(m, xs, (I, I))
    tol = 1e-12
    nonpos = H <= tol
    assert np.array_equal(nonpos, (F <= tol) & (G >= -tol)) or np.all(
        np.abs(H[nonpos != ((F <= tol) & (G >= -tol))]) < 1e-9)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-2, 2), I=st.floats(0, 5), nu=st.floats(0.1, 3))
def test_mirror_symmetry(x, I, nu):
    m = mirror_quadratic(nu)
    assert effective_hamiltonian(m, x, (I, I)) == pytest.approx(
        effective_hamiltonian(m, -x, (I, I)), abs=1e-12)


def test_golden_max_and_clustering():
    x, fx = golden_max(lambda t: -(t - 0.3) ** 2, -1, 1)
    assert abs(x - 0.3) < 1e-8 and fx <= 0
    xs, hs = cluster_points(np.array([0.1, 0.10005, 0.5]), np.array([0.0, -1e-7, -5e-7]), 0.0)
    # weights H - top + htol: 1e-6 and 9e-7, so the centroid leans to the higher point
    assert xs.size == 2 and 0.1 < xs[0] < 0.100025
    assert xs[0] == pytest.approx((0.1 * 1e-6 + 0.10005 * 9e-7) / 1.9e-6, abs=1e-12)
    np.testing.assert_array_equal(hs, [0.0, -5e-7])
