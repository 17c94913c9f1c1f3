"""Concentration diagnostics for simulated densities.

Hopf-Cole phases ``u = eps * ln n``, empirical Dirac atoms (peaks and the
mass of their basins), and comparison against the asymptotic solution.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asymptotic import AsymptoticSolution
from .pde import DensityState

FLOOR_FACTOR = 1e-300


@dataclass(frozen=True)
class HopfColeProfile:
    u: np.ndarray
    epsilon: float
    floor: float
    x: np.ndarray
    valid: np.ndarray

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])


@dataclass
class PatchAtoms:
    positions: np.ndarray
    masses: np.ndarray
    basins: list
    total: float
    flat: bool = False


@dataclass
class EmpiricalAtoms:
    patches: list
    x: np.ndarray

    @property
    def K(self) -> int:
        return len(self.patches)


@dataclass(frozen=True)
class Tolerances:
    pos: float = 0.02
    mass: float = 0.05
    pressure: float = 0.05


@dataclass
class ComparisonReport:
    position_errors: list = field(default_factory=list)
    mass_errors: list = field(default_factory=list)
    pressure_errors: np.ndarray | None = None
    count_mismatch: list = field(default_factory=list)
    coupling_gap: float | None = None
    semiconvexity: float | None = None
    tol: Tolerances = Tolerances()

    @property
    def max_position_error(self) -> float:
        return max((abs(e) for p in self.position_errors for e in p), default=0.0)

    @property
    def max_mass_error(self) -> float:
        return max((abs(e) for p in self.mass_errors for e in p), default=0.0)

    @property
    def max_pressure_error(self) -> float:
        return float(np.max(np.abs(self.pressure_errors))) if self.pressure_errors is not None else 0.0

    @property
    def flags(self) -> dict:
        return {
            "atom_count": not any(self.count_mismatch),
            "position": self.max_position_error <= self.tol.pos,
            "mass": self.max_mass_error <= self.tol.mass,
            "pressure": self.max_pressure_error <= self.tol.pressure,
        }

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def summary(self) -> str:
        lines = []
        for name, ok in self.flags.items():
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}")
        lines.append(f"  max position error {self.max_position_error:.4g} (tol {self.tol.pos})")
        lines.append(f"  max mass error     {self.max_mass_error:.4g} (tol {self.tol.mass})")
        lines.append(f"  max pressure error {self.max_pressure_error:.4g} (tol {self.tol.pressure})")
        for i, bad in enumerate(self.count_mismatch):
            if bad:
                lines.append(f"  patch {i + 1}: atom count differs ({bad})")
        if self.coupling_gap is not None:
            lines.append(f"  coupling gap sup|u1-u2| = {self.coupling_gap:.4g}")
        if self.semiconvexity is not None:
            lines.append(f"  semiconvexity deficit   = {self.semiconvexity:.4g}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "patch", "atom", "value", "tolerance", "pass"])
            for i, errs in enumerate(self.position_errors):
                for j, e in enumerate(errs):
                    w.writerow(["position", i + 1, j + 1, repr(float(e)), self.tol.pos,
                                abs(e) <= self.tol.pos])
            for i, errs in enumerate(self.mass_errors):
                for j, e in enumerate(errs):
                    w.writerow(["mass", i + 1, j + 1, repr(float(e)), self.tol.mass,
                                abs(e) <= self.tol.mass])
            if self.pressure_errors is not None:
                for i, e in enumerate(self.pressure_errors):
                    w.writerow(["pressure", i + 1, "", repr(float(e)), self.tol.pressure,
                                abs(e) <= self.tol.pressure])
            for i, bad in enumerate(self.count_mismatch):
                w.writerow(["atom_count", i + 1, "", bad, 0, not bad])


def hopf_cole(state: DensityState, epsilon: float) -> HopfColeProfile:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    n = state.n
    floor = FLOOR_FACTOR * max(1.0, float(n.max()))
    u = epsilon * np.log(np.maximum(n, floor))
    return HopfColeProfile(u=u, epsilon=float(epsilon), floor=floor, x=state.grid.x,
                           valid=n >= floor)


def _peak_position(x: np.ndarray, n: np.ndarray, k: int) -> float:
    """Vertex of the parabola through ln n at k-1, k, k+1 (exact for Gaussians)."""
    if k == 0 or k == n.size - 1 or n[k - 1] <= 0 or n[k + 1] <= 0:
        return float(x[k])
    lm, l0, lp = np.log(n[k - 1]), np.log(n[k]), np.log(n[k + 1])
    curv = lm - 2 * l0 + lp
    if curv >= 0:
        return float(x[k])
    shift = 0.5 * (lm - lp) / curv
    return float(x[k] + np.clip(shift, -0.5, 0.5) * (x[1] - x[0]))


def _trapz(x, y):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def _patch_atoms(x: np.ndarray, n: np.ndarray, rel_threshold: float) -> PatchAtoms:
    total = _trapz(x, n)
    top = float(n.max())
    if top <= 0 or np.all(n == n[0]):
        return PatchAtoms(np.empty(0), np.empty(0), [], total, flat=True)
    left = np.r_[True, n[1:] > n[:-1]]
    right = np.r_[n[:-1] >= n[1:], True]
    peaks = np.flatnonzero(left & right & (n >= rel_threshold * top))
    if peaks.size == 0:
        return PatchAtoms(np.empty(0), np.empty(0), [], total, flat=True)
    # basin edges: lowest node between consecutive significant peaks
    edges = [0]
    for a, b in zip(peaks[:-1], peaks[1:]):
        edges.append(int(a + np.argmin(n[a:b + 1])))
    edges.append(n.size - 1)
    positions, masses, basins = [], [], []
    for j, k in enumerate(peaks):
        lo, hi = edges[j], edges[j + 1]
        positions.append(_peak_position(x, n, int(k)))
        masses.append(_trapz(x[lo:hi + 1], n[lo:hi + 1]))
        basins.append((float(x[lo]), float(x[hi])))
    return PatchAtoms(np.array(positions), np.array(masses), basins, total)


def extract_diracs(state: DensityState, rel_threshold: float = 0.01) -> EmpiricalAtoms:
    """Peaks above ``rel_threshold * max n`` and the trapezoid mass of their basins.

    A basin runs from the lowest point between a peak and its significant
    neighbour (or the domain end) to the next such point, so sub-threshold
    wiggles in the tails do not split the mass.
    """
    if not 0 < rel_threshold < 1:
        raise ValueError("rel_threshold must lie in (0, 1)")
    x = state.grid.x
    return EmpiricalAtoms([_patch_atoms(x, state.n[i], rel_threshold) for i in range(state.K)], x)


def support_mask(x: np.ndarray, positions, radius: float) -> np.ndarray:
    """Nodes within ``radius`` of any position (grid ties count as inside)."""
    mask = np.zeros(x.shape, dtype=bool)
    slack = 1e-9 * max(radius, 1.0)
    for p in positions:
        mask |= np.abs(x - p) <= radius + slack
    return mask


def patch_coupling_gap(profile: HopfColeProfile, mask: np.ndarray | None = None):
    """sup |u_i - u_j| over nodes where both densities are above the floor.

    A scalar for two patches, otherwise the symmetric matrix of pairwise gaps.
    """
    u, valid = profile.u, profile.valid
    K = u.shape[0]
    sel = np.ones(u.shape[1], dtype=bool) if mask is None else mask
    gaps = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            both = valid[i] & valid[j] & sel
            g = float(np.max(np.abs(u[i, both] - u[j, both]))) if both.any() else 0.0
            gaps[i, j] = gaps[j, i] = g
    return float(gaps[0, 1]) if K == 2 else (0.0 if K == 1 else gaps)


def semiconvexity_deficit(profile: HopfColeProfile, mask: np.ndarray | None = None) -> float:
    """Smallest centred second difference of u over fully valid stencils."""
    h = profile.h
    if not h > 0:
        raise ValueError("grid spacing must be positive")
    u, valid = profile.u, profile.valid
    d2 = (u[:, :-2] - 2 * u[:, 1:-1] + u[:, 2:]) / (h * h)
    ok = valid[:, :-2] & valid[:, 1:-1] & valid[:, 2:]
    if mask is not None:
        ok &= mask[1:-1][None, :]
    return float(d2[ok].min()) if ok.any() else float("inf")


def compare_limits(atoms: EmpiricalAtoms, sol: AsymptoticSolution, tol: Tolerances = Tolerances(),
                   pressures=None, profile: HopfColeProfile | None = None) -> ComparisonReport:
    """Greedy nearest matching of empirical atoms to the asymptotic support.

    ``pressures`` are the simulated ones; without them the patch totals are
    used (exact when the weights psi are identically one).
    """
    rep = ComparisonReport(tol=tol)
    if atoms.K != sol.weights.shape[0]:
        raise ValueError("atoms and solution have different patch counts")
    for i, pa in enumerate(atoms.patches):
        pairs = sorted((abs(p - q), a, b) for a, p in enumerate(pa.positions)
                       for b, q in enumerate(sol.points))
        used_a, used_b = set(), set()
        pos_err, mass_err = [], []
        for dist, a, b in pairs:
            if a in used_a or b in used_b:
                continue
            used_a.add(a)
            used_b.add(b)
            pos_err.append(float(pa.positions[a] - sol.points[b]))
            mass_err.append(float(pa.masses[a] - sol.weights[i, b]))
        rep.position_errors.append(pos_err)
        rep.mass_errors.append(mass_err)
        n_emp, n_sol = pa.positions.size, sol.points.size
        rep.count_mismatch.append("" if n_emp == n_sol else f"{n_emp} empirical vs {n_sol} predicted")
    emp_I = (np.asarray(pressures, dtype=float) if pressures is not None
             else np.array([p.total for p in atoms.patches]))
    rep.pressure_errors = emp_I - sol.I
    if profile is not None:
        mask = support_mask(profile.x, sol.points, 0.1)
        if profile.u.shape[0] >= 2:
            gap = patch_coupling_gap(profile, mask)
            rep.coupling_gap = float(np.max(gap))
        rep.semiconvexity = semiconvexity_deficit(profile)
    return rep
