"""Small-mutation limit computed directly from the effective Hamiltonian.

The limit object is a set of pressures ``I``, support traits ``x_j`` where
``H(., I)`` reaches its maximum value 0, and Dirac weights ``rho[i, j]`` with
``rho[:, j]`` proportional to the Perron vector of the fitness matrix at
``x_j`` and ``sum_j psi_i(x_j) rho[i, j] = I_i``.
"""
from __future__ import annotations

import csv
import itertools
import logging
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls, root

from .errors import BracketError, AssumptionError, InfeasibleError, NumericalError
from .hamiltonian import (ARGMAX_HTOL, MERGE_DX, FitnessLandscape, cluster_points,
                          effective_hamiltonian, fitness_matrix, golden_max,
                          grid_local_maxima, hamiltonian_values, landscape, perron_pair,
                          quartic_G, trace_F)
from .model import PatchModel

log = logging.getLogger(__name__)

SOLVE_TOL = 1e-8
BISECT_TOL = 1e-10
FD_STEP = 1e-6
MAX_ITER = 200
MAX_CANDIDATES = 40
STATIONARY_SEEDS = 9


@dataclass
class AsymptoticSolution:
    I: np.ndarray
    points: np.ndarray
    scales: np.ndarray
    weights: np.ndarray
    residuals: dict
    converged: bool = True
    degenerate: bool = False
    iterations: int = 0
    residual_vector: np.ndarray | None = None
    method: str = ""

    @property
    def n_atoms(self) -> int:
        return int(self.points.size)


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    value: float
    tolerance: float
    passed: bool


@dataclass
class ConstraintReport:
    checks: list[ConstraintCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> ConstraintCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def add(self, name: str, value: float, tolerance: float, passed: bool | None = None):
        ok = bool(value <= tolerance) if passed is None else bool(passed)
        self.checks.append(ConstraintCheck(name, float(value), float(tolerance), ok))

    def summary(self) -> str:
        return "\n".join(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.value:.3e} (tol {c.tolerance:.1e})"
                         for c in self.checks)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def support_points(land: FitnessLandscape, atol: float = ARGMAX_HTOL) -> np.ndarray:
    """Refined maxima within ``atol`` of the landscape's top value, merged."""
    if land.maxima.size == 0:
        raise ValueError("empty landscape")
    top = float(land.maxima[:, 1].max())
    near = land.maxima[land.maxima[:, 1] >= top - atol]
    xs, _ = cluster_points(near[:, 0], near[:, 1], top, MERGE_DX, atol)
    return xs


def _weight_matrix(model: PatchModel, I, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(M, chi, lam): columns ``psi_i(x_j) chi_i(x_j)``, Perron vectors, roots."""
    K = model.K
    chi = np.empty((K, len(points)))
    lam = np.empty(len(points))
    for j, x in enumerate(points):
        pp = perron_pair(fitness_matrix(model, x, I))
        chi[:, j] = pp.chi
        lam[j] = pp.lam
    psi = np.array([[model.psi_at(i, x) for x in points] for i in range(K)], dtype=float)
    return psi * chi, chi, lam


def dirac_weights(model: PatchModel, I, points, htol: float = 1e-6):
    """Scales ``s`` (NNLS fit of the normalization) and weights ``rho = s * chi``."""
    I = np.asarray(I, dtype=float)
    points = np.atleast_1d(np.asarray(points, dtype=float))
    M, chi, lam = _weight_matrix(model, I, points)
    bad = np.abs(lam) > htol
    if np.any(bad):
        raise ValueError(f"H(x_j, I) = {lam[bad]} is not zero at support points {points[bad]}")
    s, _ = nnls(M, I)
    if not np.any(s > 0) and np.any(I > 0):
        raise InfeasibleError("normalization infeasible: all Dirac scales vanish",
                              float(np.max(np.abs(I))))
    return s, s * chi


def _two_form_mismatch(model: PatchModel, I, points, weights) -> float:
    """Max deviation between the two expressions of rho_2 via rho_1 (K = 2)."""
    worst = 0.0
    nu = model.nu
    for j, x in enumerate(points):
        r1 = model.growth[0](x, I[0])
        r2 = model.growth[1](x, I[1])
        rho1, rho2 = weights[0, j], weights[1, j]
        form1 = rho1 * (nu[0, 0] - r1) / nu[0, 1]
        form2 = rho1 * nu[1, 0] / (nu[1, 1] - r2)
        worst = max(worst, abs(form1 - rho2), abs(form2 - rho2))
    return float(worst)


def _kernel_residual(model: PatchModel, I, points, weights) -> float:
    worst = 0.0
    for j, x in enumerate(points):
        rho = weights[:, j]
        scale = max(float(np.max(np.abs(rho))), 1e-300)
        A = fitness_matrix(model, x, I).A
        worst = max(worst, float(np.max(np.abs(A @ rho))) / scale)
    return worst


def _residuals(model: PatchModel, I, points, weights, land: FitnessLandscape) -> dict:
    norm = np.array([sum(model.psi_at(i, x) * weights[i, j] for j, x in enumerate(points))
                     for i in range(model.K)])
    out = {
        "maxH": abs(land.max_H),
        "norm": float(np.max(np.abs(norm - I))),
        "kernel": _kernel_residual(model, I, points, weights),
    }
    if model.K == 2:
        out["rho_consistency"] = _two_form_mismatch(model, I, points, weights)
    else:
        out["rho_consistency"] = out["kernel"]
    return out


def _package(model: PatchModel, I, land: FitnessLandscape, method: str, iterations: int = 0,
             converged: bool | None = None) -> AsymptoticSolution:
    points = support_points(land)
    scales, weights = dirac_weights(model, I, points)
    M, _, _ = _weight_matrix(model, I, points)
    mismatch = M @ scales - I
    rvec = np.r_[land.max_H, mismatch[1:]]
    res = _residuals(model, I, points, weights, land)
    if converged is None:
        converged = bool(np.max(np.abs(rvec)) < SOLVE_TOL)
    return AsymptoticSolution(I=np.asarray(I, dtype=float), points=points, scales=scales,
                              weights=weights, residuals=res, converged=converged,
                              degenerate=land.degenerate, iterations=iterations,
                              residual_vector=rvec, method=method)


# ---------------------------------------------------------------------------
# symmetric two-patch case
# ---------------------------------------------------------------------------

def check_symmetric(model: PatchModel, samples: int = 201, tol: float = 1e-8) -> None:
    """Raise unless R_1(x, I) = R_2(-x, I), equal weights mirrored and equal rates."""
    if model.K != 2:
        raise AssumptionError("symmetric solver needs exactly two patches")
    xs = np.linspace(-model.L, model.L, samples)
    for I in (0.0, 1.0):
        gap = np.max(np.abs(model.growth[0](xs, I) - model.growth[1](-xs, I)))
        if gap > tol:
            raise AssumptionError(f"model is not mirror symmetric: max |R1(x)-R2(-x)| = {gap:.3g}")
    if np.max(np.abs(model.psi_at(0, xs) - model.psi_at(1, -xs))) > tol:
        raise AssumptionError("weights psi_1(x) and psi_2(-x) differ")
    nu = model.nu
    if abs(nu[0, 1] - nu[1, 0]) > tol or abs(nu[0, 0] - nu[1, 1]) > tol:
        raise AssumptionError("migration rates are not symmetric")


def solve_symmetric(model: PatchModel, I_bracket=(0.5, 5.0), grid_points: int = 801,
                    tol: float = BISECT_TOL) -> AsymptoticSolution:
    """Equal pressures ``I_1 = I_2 = I`` with ``max_x H(x, I, I) = 0`` by bisection."""
    check_symmetric(model)
    lo, hi = map(float, I_bracket)

    def top(I):
        return landscape(model, (I, I), grid_points).max_H

    m_lo, m_hi = top(lo), top(hi)
    if not (m_lo > 0 > m_hi):
        raise BracketError(f"max H does not change sign on [{lo}, {hi}]: {m_lo:.3g}, {m_hi:.3g}")
    it = 0
    mid = 0.5 * (lo + hi)
    m_mid = top(mid)
    while abs(m_mid) >= tol and hi - lo > 4e-16 * hi:
        if m_mid > 0:
            lo = mid
        else:
            hi = mid
        mid = 0.5 * (lo + hi)
        m_mid = top(mid)
        it += 1
    I = np.array([mid, mid])
    land = landscape(model, I, grid_points)
    return _package(model, I, land, "symmetric", it)


# ---------------------------------------------------------------------------
# general K-patch case
# ---------------------------------------------------------------------------

def _track_maximum(model: PatchModel, I, xs: np.ndarray, x_prev: float) -> tuple[float, float]:
    """Refined local maximum of H(., I) nearest to ``x_prev``."""
    H = hamiltonian_values(model, xs, I)
    idx = grid_local_maxima(H)
    k = int(idx[np.argmin(np.abs(xs[idx] - x_prev))])
    lo, hi = xs[max(k - 1, 0)], xs[min(k + 1, xs.size - 1)]
    x, val = golden_max(lambda t: effective_hamiltonian(model, t, I), lo, hi)
    if val < H[k]:
        x, val = float(xs[k]), float(H[k])
    return x, val


class _SupportSystem:
    """Square system in (I, s) for a fixed set of tracked support branches."""

    def __init__(self, model: PatchModel, xs: np.ndarray, starts):
        self.model, self.xs = model, xs
        self.positions = np.array(starts, dtype=float)
        self.jumps = 0

    def __call__(self, z: np.ndarray, commit: bool = False) -> np.ndarray:
        model, K = self.model, self.model.K
        I, s = z[:K], z[K:]
        if np.any(I <= 0):
            return np.full(z.size, np.inf)
        pos = np.empty_like(self.positions)
        hv = np.empty_like(self.positions)
        for j, x0 in enumerate(self.positions):
            pos[j], hv[j] = _track_maximum(model, I, self.xs, x0)
        M, _, _ = _weight_matrix(model, I, pos)
        if commit:
            if np.any(np.abs(pos - self.positions) > 0.25 * model.L):
                self.jumps += 1
            self.positions = pos
        return np.r_[hv, M @ s - I]


def _fd_jacobian(f, z, fz, step=FD_STEP):
    J = np.empty((fz.size, z.size))
    for k in range(z.size):
        zp = z.copy()
        zp[k] += step
        J[:, k] = (f(zp) - fz) / step
    return J


def _newton_support(system: _SupportSystem, z0: np.ndarray, max_iter: int, tol: float):
    """Quasi-Newton (FD Jacobian + Broyden updates, backtracking)."""
    z = z0.copy()
    fz = system(z, commit=True)
    J = _fd_jacobian(system, z, fz)
    fresh = True
    it = 0
    while it < max_iter:
        it += 1
        fnorm = np.max(np.abs(fz))
        if fnorm < tol:
            return z, fz, it, True
        try:
            dz = np.linalg.lstsq(J, -fz, rcond=None)[0]
        except np.linalg.LinAlgError:
            dz = np.zeros_like(z)
        alpha = 1.0
        accepted = False
        while alpha > 1e-4:
            trial = z + alpha * dz
            ft = system(trial)
            if np.all(np.isfinite(ft)) and np.max(np.abs(ft)) < (1 - 1e-4 * alpha) * fnorm:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if fresh:
                return z, fz, it, False
            J = _fd_jacobian(system, z, fz)
            fresh = True
            continue
        ft = system(trial, commit=True)
        step_z = trial - z
        if alpha == 1.0:
            J = J + np.outer(ft - fz - J @ step_z, step_z) / (step_z @ step_z)
            fresh = False
        else:
            J = _fd_jacobian(system, trial, ft)
            fresh = True
        z, fz = trial, ft
    return z, fz, it, bool(np.max(np.abs(fz)) < tol)


def _scale_to_zero_level(model: PatchModel, I0: np.ndarray, grid_points: int) -> np.ndarray:
    """Multiply ``I0`` by the factor that puts ``max_x H`` at zero."""
    def top(t):
        return landscape(model, t * I0, grid_points).max_H

    lo, hi = 1.0, 1.0
    while top(lo) <= 0 and lo > 1e-8:
        lo *= 0.5
    while top(hi) >= 0 and hi < 1e8:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = top(mid)
        if abs(m) < BISECT_TOL:
            break
        if m > 0:
            lo = mid
        else:
            hi = mid
    return mid * I0


def _stationary_seeds(model: PatchModel, I_start: np.ndarray, seeds: int = STATIONARY_SEEDS):
    """Supports found with the atom positions as free unknowns.

    Solves ``H = 0`` and ``dH/dx = 0`` at every atom plus the normalization,
    starting from evenly spread positions.  Used when tracking grid maxima
    fails because far from the answer the landscape has too few peaks.
    """
    K, L, h = model.K, model.L, 1e-5
    grid = np.linspace(-0.9 * L, 0.9 * L, seeds)
    for size in range(1, K + 1):
        for combo in itertools.combinations(grid, size):
            def f(v):
                I, x, sc = v[:K], v[K:K + size], v[K + size:]
                if np.any(I <= 0) or np.any(np.abs(x) > L):
                    return np.full(v.size, 1e6)
                out = []
                for xj in x:
                    out.append(effective_hamiltonian(model, xj, I))
                    out.append((effective_hamiltonian(model, xj + h, I)
                                - effective_hamiltonian(model, xj - h, I)) / (2 * h))
                M, _, _ = _weight_matrix(model, I, x)
                return np.r_[out, M @ sc - I]
            M, _, _ = _weight_matrix(model, I_start, np.array(combo))
            s0, _ = nnls(M, I_start)
            sol = root(f, np.r_[I_start, combo, s0], method="hybr")
            if sol.success and np.max(np.abs(sol.fun)) < 1e-8:
                yield sol.x[:K], sol.x[K:K + size]


def solve_general(model: PatchModel, I0, grid_points: int = 801, tol: float = SOLVE_TOL,
                  max_iter: int = MAX_ITER, max_candidates: int = MAX_CANDIDATES) -> AsymptoticSolution:
    """Pressures, support and weights for any K.

    Each candidate support set gives a smooth square system in (I, s):
    ``H = 0`` on every tracked branch plus the normalization.  Candidates
    start as subsets of the local maxima of ``H`` (smallest first).  A
    converged candidate that is not admissible spawns new ones: a branch
    that rose above zero is added to the support, an atom with a negative
    scale is dropped.  When the queue runs dry, supports solved with free
    positions seed it again.  The first admissible candidate is returned;
    convergence is judged on ``(max_x H, (M s - I)[1:])`` with NNLS scales.
    """
    I0 = np.asarray(I0, dtype=float)
    if I0.shape != (model.K,) or np.any(I0 <= 0):
        raise ValueError("I0 must have K positive components")
    K = model.K
    xs = np.linspace(-model.L, model.L, grid_points)
    I_start = _scale_to_zero_level(model, I0, grid_points)
    land = landscape(model, I_start, grid_points)
    if land.degenerate:
        return _package(model, I_start, land, "general", 0, converged=False)

    queue = deque()
    branches = land.maxima[np.argsort(-land.maxima[:, 1]), 0]
    for size in range(1, min(K, branches.size) + 1):
        for combo in itertools.combinations(range(branches.size), size):
            queue.append((I_start, branches[list(combo)]))
    seen = set()
    best = None
    total_it = jumps = attempts = 0
    stationary = _stationary_seeds(model, I_start)
    while attempts < max_candidates:
        if not queue:
            nxt = next(stationary, None)
            if nxt is None:
                break
            queue.append(nxt)
        I_s, starts = queue.popleft()
        key = (tuple(np.round(np.sort(starts), 4)), tuple(np.round(I_s, 4)))
        if key in seen:
            continue
        seen.add(key)
        attempts += 1
        system = _SupportSystem(model, xs, starts)
        try:
            M, _, _ = _weight_matrix(model, I_s, starts)
            s0, _ = nnls(M, I_s)
            z, fz, it, ok = _newton_support(system, np.r_[I_s, s0], max_iter, tol * 1e-2)
        except (NumericalError, ValueError) as exc:
            log.debug("support %s failed: %s", starts, exc)
            continue
        total_it += it
        jumps += system.jumps
        I, scales, pos = z[:K], z[K:], system.positions
        if not ok or np.any(I <= 0):
            continue
        if pos.size > 1 and np.min(np.diff(np.sort(pos))) < MERGE_DX:
            continue
        negative = scales < -1e-12
        if np.any(negative):
            if np.any(~negative):
                queue.append((I, pos[~negative]))
            continue
        land = landscape(model, I, grid_points)
        rising = land.maxima[land.maxima[:, 1] > tol]
        if rising.size:
            # another branch overtook the tracked support: try it with and without the old atoms
            extra = rising[np.argmax(rising[:, 1]), 0]
            if pos.size < K:
                queue.append((I, np.r_[pos, extra]))
            queue.append((I, np.array([extra])))
            continue
        try:
            sol = _package(model, I, land, "general", total_it)
        except (ValueError, InfeasibleError):
            continue
        sol.degenerate = sol.degenerate or jumps > 50
        if best is None or np.max(np.abs(sol.residual_vector)) < np.max(np.abs(best.residual_vector)):
            best = sol
        if sol.converged:
            return sol
    if best is None:
        land = landscape(model, I_start, grid_points)
        best = _package(model, I_start, land, "general", total_it, converged=False)
    best.converged = False
    best.degenerate = best.degenerate or jumps > 50
    return best


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _refined_min_G(model: PatchModel, I, xs, points) -> float:
    G = quartic_G(model, xs, I)
    vals = [float(G.min())]
    neg_G = -G
    for k in grid_local_maxima(neg_G):
        lo, hi = xs[max(k - 1, 0)], xs[min(k + 1, xs.size - 1)]
        _, v = golden_max(lambda t: -float(quartic_G(model, t, I)), lo, hi)
        vals.append(-v)
    vals.extend(float(quartic_G(model, x, I)) for x in points)
    return min(vals)


def verify_solution(model: PatchModel, sol: AsymptoticSolution, tol: float = 1e-8,
                    grid_points: int = 801) -> ConstraintReport:
    """Pointwise form of the limit constraints; reports, never raises."""
    rep = ConstraintReport()
    I = sol.I
    pts = sol.points
    xs = np.linspace(-model.L, model.L, grid_points)
    h_pts = np.array([effective_hamiltonian(model, x, I) for x in pts])
    rep.add("H_zero_on_support", float(np.max(np.abs(h_pts))) if pts.size else np.inf, tol)
    H = hamiltonian_values(model, xs, I)
    rep.add("H_nonpositive", float(np.max(H)), tol)
    if model.K == 2:
        rep.add("min_G_zero", abs(_refined_min_G(model, I, xs, pts)), tol)
        F_pts = np.array([trace_F(model, x, I) for x in pts])
        rep.add("F_nonpositive_on_support", float(np.max(F_pts)) if pts.size else 0.0, 0.0)
        rep.add("rho_two_forms", _two_form_mismatch(model, I, pts, sol.weights), tol)
    norm = np.array([sum(model.psi_at(i, x) * sol.weights[i, j] for j, x in enumerate(pts))
                     for i in range(model.K)])
    rep.add("normalization", float(np.max(np.abs(norm - I))), tol)
    rep.add("atom_identities", _kernel_residual(model, I, pts, sol.weights), tol)
    rep.add("weights_nonnegative", float(-np.min(sol.weights)) if pts.size else 0.0, 0.0)
    return rep


# ---------------------------------------------------------------------------
# migration sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    nu: float
    n_atoms: int
    I: float
    x_left: float
    x_right: float
    error: str = ""


def scale_migration(model: PatchModel, value: float) -> PatchModel:
    """Rescale all rates so the largest inflow rate equals ``value``."""
    off = model.nu[~np.eye(model.K, dtype=bool)]
    ref = float(off.max()) if off.size and off.max() > 0 else 1.0
    return model.with_migration(model.nu * (value / ref))


def _sweep_one(args) -> SweepRow:
    model, value, bracket = args
    try:
        sol = solve_symmetric(scale_migration(model, value), bracket)
        return SweepRow(float(value), sol.n_atoms, float(sol.I[0]), float(sol.points.min()),
                        float(sol.points.max()))
    except Exception as exc:  # recorded per row; the sweep continues
        return SweepRow(float(value), 0, np.nan, np.nan, np.nan, f"{type(exc).__name__}: {exc}")


def sweep_workers(requested: int | None = None) -> int:
    env = os.environ.get("PATCHPOP_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, requested or 1)


def migration_sweep(model: PatchModel, values, workers: int | None = None,
                    bracket=(0.5, 5.0)) -> list[SweepRow]:
    jobs = [(model, float(v), bracket) for v in values]
    n = sweep_workers(workers)
    if n == 1:
        return [_sweep_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_sweep_one, jobs))


def locate_transition(model: PatchModel, lo: float, hi: float, xtol: float = 1e-3,
                      bracket=(0.5, 5.0)) -> tuple[float, float]:
    """Bisection on the atom count between migration scales ``lo`` and ``hi``."""
    def count(v):
        return solve_symmetric(scale_migration(model, v), bracket).n_atoms

    c_lo, c_hi = count(lo), count(hi)
    if c_lo == c_hi:
        raise BracketError(f"atom count {c_lo} on both ends of [{lo}, {hi}]")
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if count(mid) == c_lo:
            lo = mid
        else:
            hi = mid
    return lo, hi


def write_solution_csv(sol: AsymptoticSolution, path: str | Path) -> None:
    K = sol.weights.shape[0]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_j", "s_j"] + [f"rho_{i + 1}" for i in range(K)])
        for j, x in enumerate(sol.points):
            w.writerow([repr(float(x)), repr(float(sol.scales[j]))]
                       + [repr(float(v)) for v in sol.weights[:, j]])
        w.writerow([f"I_{i + 1}" for i in range(K)] + ["maxH_residual", "norm_residual"])
        w.writerow([repr(float(v)) for v in sol.I]
                   + [repr(float(sol.residuals["maxH"])), repr(float(sol.residuals["norm"]))])


def write_sweep_csv(rows, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nu", "n_atoms", "I", "x_left", "x_right"])
        for r in rows:
            w.writerow([repr(r.nu), r.n_atoms, repr(r.I), repr(r.x_left), repr(r.x_right)])
