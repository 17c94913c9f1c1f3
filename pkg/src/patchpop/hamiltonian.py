"""Effective Hamiltonian: Perron root of the patch fitness matrix.

At trait ``x`` and pressures ``I`` the fitness matrix is

    A[i, i] = R_i(x, I_i) - nu[i, i],    A[i, j] = nu[i, j]  (i != j),

a Metzler matrix.  Its largest real eigenvalue ``H(x, I)`` is the invasion
fitness of trait ``x``; the associated positive eigenvector splits a Dirac
mass at ``x`` between the patches.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import NumericalError, PositivityError
from .model import PatchModel

POWER_TOL = 1e-13
POWER_MAX_ITER = 100_000
ARGMAX_XTOL = 1e-8
ARGMAX_HTOL = 1e-6
MERGE_DX = 1e-4
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class FitnessMatrix:
    A: np.ndarray
    x: float
    I: np.ndarray


@dataclass(frozen=True)
class PerronPair:
    lam: float
    chi: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True)
class FitnessLandscape:
    """``H`` sampled on a uniform grid, with refined local maxima.

    ``maxima`` holds every refined local maximum as (x, H) rows, sorted by x;
    ``argmax`` only the merged clusters within ``ARGMAX_HTOL`` of the top.
    ``F`` and ``G`` (trace and determinant) are present only for K = 2.
    """

    I: np.ndarray
    x: np.ndarray
    H: np.ndarray
    F: np.ndarray | None
    G: np.ndarray | None
    maxima: np.ndarray
    argmax: np.ndarray
    argmax_H: np.ndarray

    @property
    def max_H(self) -> float:
        return float(self.argmax_H.max()) if self.argmax_H.size else float(self.H.max())

    @property
    def degenerate(self) -> bool:
        # a continuum of maxima shows up as many separate clusters
        return self.argmax.size > 8


def _as_pressure(model: PatchModel, I) -> np.ndarray:
    I = np.atleast_1d(np.asarray(I, dtype=float))
    if I.shape != (model.K,):
        raise ValueError(f"pressure vector must have {model.K} components, got {I.shape}")
    return I


def fitness_matrices(model: PatchModel, xs, I) -> np.ndarray:
    """Stack of fitness matrices, shape ``(len(xs), K, K)``."""
    I = _as_pressure(model, I)
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    K = model.K
    mats = np.broadcast_to(model.nu, (xs.size, K, K)).copy()
    for i in range(K):
        mats[:, i, i] = model.growth[i](xs, I[i]) - model.nu[i, i]
    return mats


def fitness_matrix(model: PatchModel, x: float, I) -> FitnessMatrix:
    I = _as_pressure(model, I)
    return FitnessMatrix(fitness_matrices(model, [x], I)[0], float(x), I)


def _lam2(a11, a12, a21, a22):
    """Largest eigenvalue of a 2x2 Metzler matrix without cancellation."""
    F = a11 + a22
    G = a11 * a22 - a12 * a21
    root = np.sqrt((a11 - a22) ** 2 + 4.0 * a12 * a21)
    with np.errstate(divide="ignore", invalid="ignore"):
        neg = np.where(F - root != 0.0, 2.0 * G / (F - root), 0.5 * (F + root))
    return np.where(F >= 0.0, 0.5 * (F + root), neg)


def perron_pair(A) -> PerronPair:
    """Largest eigenvalue and unit-sum positive eigenvector of a Metzler matrix.

    K = 1 and K = 2 use closed forms; larger matrices use power iteration on
    ``A + s I`` with ``s = 1 + max |A_ii|``.
    """
    A = np.asarray(A.A if isinstance(A, FitnessMatrix) else A, dtype=float)
    K = A.shape[0]
    if A.shape != (K, K):
        raise ValueError("matrix must be square")
    off = A[~np.eye(K, dtype=bool)]
    if np.any(off < 0):
        raise ValueError("off-diagonal entries must be nonnegative")
    if K == 1:
        return PerronPair(float(A[0, 0]), np.ones(1), 0, 0.0)
    if K == 2:
        a11, a12, a21, a22 = A[0, 0], A[0, 1], A[1, 0], A[1, 1]
        lam = float(_lam2(a11, a12, a21, a22))
        v1 = np.array([a12, lam - a11])
        v2 = np.array([lam - a22, a21])
        v = v1 if v1.sum() >= v2.sum() else v2
        total = v.sum()
        if not total > 0:
            raise PositivityError("no positive eigenvector (decoupled patches)")
        chi = np.maximum(v / total, 0.0)
        iterations = 0
    else:
        lam_a, chi_a, it_a, res_a = _kernels.batched_power(A[None], POWER_TOL, POWER_MAX_ITER)
        lam, chi, iterations = float(lam_a[0]), chi_a[0].copy(), int(it_a[0])
        if iterations >= POWER_MAX_ITER:
            raise NumericalError("power iteration did not converge", float(res_a[0]))
    residual = float(np.max(np.abs(A @ chi - lam * chi)))
    if np.any(chi <= 0):
        raise PositivityError(f"Perron vector has a zero component: {chi}", residual)
    return PerronPair(lam, chi, iterations, residual)


def hamiltonian_values(model: PatchModel, xs, I) -> np.ndarray:
    """``H(x, I)`` at every x in ``xs`` (vectorized)."""
    mats = fitness_matrices(model, xs, I)
    K = model.K
    if K == 1:
        return mats[:, 0, 0].copy()
    if K == 2:
        return _lam2(mats[:, 0, 0], mats[:, 0, 1], mats[:, 1, 0], mats[:, 1, 1])
    lam, _, iters, res = _kernels.batched_power(mats, POWER_TOL, POWER_MAX_ITER)
    if np.any(iters >= POWER_MAX_ITER):
        raise NumericalError("power iteration did not converge", float(res.max()))
    return lam


def effective_hamiltonian(model: PatchModel, x: float, I) -> float:
    return float(hamiltonian_values(model, [x], I)[0])


def trace_F(model: PatchModel, x, I):
    if model.K != 2:
        raise ValueError("F is defined for two patches only")
    I = _as_pressure(model, I)
    return (model.growth[0](x, I[0]) - model.nu[0, 0]) + (model.growth[1](x, I[1]) - model.nu[1, 1])


def quartic_G(model: PatchModel, x, I):
    """Determinant of the 2x2 fitness matrix; ``H <= 0`` iff ``F <= 0`` and ``G >= 0``."""
    if model.K != 2:
        raise ValueError(f"G is defined for two patches only (K={model.K})")
    I = _as_pressure(model, I)
    a11 = model.growth[0](x, I[0]) - model.nu[0, 0]
    a22 = model.growth[1](x, I[1]) - model.nu[1, 1]
    return a11 * a22 - model.nu[0, 1] * model.nu[1, 0]


def golden_max(f, lo: float, hi: float, xtol: float = ARGMAX_XTOL) -> tuple[float, float]:
    """Maximize a unimodal scalar function on [lo, hi]; returns (x, f(x))."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    fx, x = max([(fc, c), (fd, d), (f(lo), lo), (f(hi), hi)])
    # golden section stalls where f is flat to roundoff; a three-point
    # parabola on a wider stencil pins the vertex further
    step = max(1e3 * xtol, 1e-6)
    if lo + step <= x <= hi - step:
        fm, fp = f(x - step), f(x + step)
        curv = fp - 2.0 * fx + fm
        if curv < 0:
            xv = x - 0.5 * step * (fp - fm) / curv
            if abs(xv - x) < step:
                fv = f(xv)
                # a tie to roundoff still favours the vertex
                if fv >= fx - 1e-14 * (1.0 + abs(fx)):
                    x, fx = xv, fv
    return x, fx


def grid_local_maxima(values: np.ndarray) -> np.ndarray:
    """Indices k with ``values[k]`` >= both neighbours (one-sided at the ends)."""
    v = values
    left = np.r_[True, v[1:] >= v[:-1]]
    right = np.r_[v[:-1] >= v[1:], True]
    return np.flatnonzero(left & right)


def cluster_points(xs: np.ndarray, hs: np.ndarray, top: float, dx: float = MERGE_DX,
                   htol: float = ARGMAX_HTOL) -> tuple[np.ndarray, np.ndarray]:
    """Merge points closer than ``dx``.

    Each cluster collapses to a centroid weighted by ``H - top + htol``
    (positive for every candidate, largest for the highest), and keeps the
    cluster's largest H value.
    """
    if xs.size == 0:
        return xs, hs
    order = np.argsort(xs)
    xs, hs = xs[order], hs[order]
    out_x, out_h = [], []
    start = 0
    for k in range(1, xs.size + 1):
        if k == xs.size or xs[k] - xs[k - 1] > dx:
            w = np.maximum(hs[start:k] - top + htol, 1e-300)
            out_x.append(float(np.sum(w * xs[start:k]) / np.sum(w)))
            out_h.append(float(hs[start:k].max()))
            start = k
    return np.array(out_x), np.array(out_h)


def refine_maxima(model: PatchModel, I, xs: np.ndarray, H: np.ndarray,
                  idx: np.ndarray) -> np.ndarray:
    """Golden-section refinement of grid maxima within their bracketing cells."""
    I = _as_pressure(model, I)
    L = model.L

    def h_of(x):
        return effective_hamiltonian(model, x, I)

    rows = []
    for k in idx:
        lo = xs[max(k - 1, 0)]
        hi = xs[min(k + 1, xs.size - 1)]
        x, val = golden_max(h_of, lo, hi)
        if val < H[k]:
            x, val = float(xs[k]), float(H[k])
        rows.append((min(max(x, -L), L), val))
    return np.array(rows, dtype=float).reshape(-1, 2)


def landscape(model: PatchModel, I, grid_points: int = 801) -> FitnessLandscape:
    if grid_points < 3:
        raise ValueError("need at least 3 grid points")
    I = _as_pressure(model, I)
    xs = np.linspace(-model.L, model.L, grid_points)
    H = hamiltonian_values(model, xs, I)
    F = G = None
    if model.K == 2:
        F = trace_F(model, xs, I)
        G = quartic_G(model, xs, I)
    idx = grid_local_maxima(H)
    # plateaus would give one candidate per node; refinement is pointless there
    if idx.size > 64:
        maxima = np.column_stack([xs[idx], H[idx]])
    else:
        maxima = refine_maxima(model, I, xs, H, idx)
    maxima = maxima[np.argsort(maxima[:, 0])]
    top = float(maxima[:, 1].max())
    near = maxima[maxima[:, 1] >= top - ARGMAX_HTOL]
    ax, ah = cluster_points(near[:, 0], near[:, 1], top)
    return FitnessLandscape(I=I, x=xs, H=H, F=F, G=G, maxima=maxima, argmax=ax, argmax_H=ah)


def write_landscape_csv(land: FitnessLandscape, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if land.F is not None:
            w.writerow(["x", "H", "F", "G"])
            for row in zip(land.x, land.H, land.F, land.G):
                w.writerow([repr(float(v)) for v in row])
        else:
            w.writerow(["x", "H"])
            for row in zip(land.x, land.H):
                w.writerow([repr(float(v)) for v in row])
