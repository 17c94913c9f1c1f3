"""Time stepping of the K-patch selection-mutation-migration system.

Time is rescaled as ``tau = t / epsilon`` so that every patch density obeys

    d_tau n_i = eps^2 n_i'' + n_i R_i(x, I_i) + sum_{j != i} nu_ij n_j - nu_ii n_i

on [-L, L] with zero-flux ends and ``I_i = int psi_i n_i``.  Equilibria are
those of the stationary problem.  The reaction and migration terms are
explicit (pressures lagged to the start of the step), diffusion is implicit.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import ImexOperator
from .errors import BlowUpError, StabilityError
from .model import PatchModel

log = logging.getLogger(__name__)

STEADY_WINDOW = 100
STABILITY_BUDGET = 0.5


@dataclass(frozen=True)
class GridSpec:
    L: float
    N: int

    def __post_init__(self):
        if self.N < 3:
            raise ValueError("grid needs at least 3 nodes")
        if not self.L > 0:
            raise ValueError("L must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.N - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.N)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights."""
        w = np.full(self.N, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


@dataclass
class DensityState:
    n: np.ndarray
    tau: float
    grid: GridSpec

    def copy(self) -> "DensityState":
        return DensityState(self.n.copy(), self.tau, self.grid)

    @property
    def K(self) -> int:
        return self.n.shape[0]

    def masses(self) -> np.ndarray:
        return self.n @ self.grid.weights


@dataclass(frozen=True)
class InitialBump:
    center: float
    mass: float
    width: float


@dataclass(frozen=True)
class RunOptions:
    dt: float = 1e-3
    tau_end: float = 5000.0
    steady_tol: float = 1e-8
    sample_stride: int = 1000


@dataclass
class SimulationResult:
    state: DensityState
    tau: np.ndarray
    pressures: np.ndarray
    steady: bool
    wall_time: float
    steps: int
    clamped: int
    profiles: dict = field(default_factory=dict)

    @property
    def clamp_fraction(self) -> float:
        updates = self.steps * self.state.n.size
        return self.clamped / updates if updates else 0.0


def init_state(model: PatchModel, bumps, grid_points: int = 801) -> DensityState:
    """Truncated Gaussian bumps, renormalized to the requested trapezoid mass."""
    if grid_points < 3:
        raise ValueError("zero grid: need at least 3 nodes")
    bumps = list(bumps)
    if len(bumps) != model.K:
        raise ValueError(f"need {model.K} initial bumps, got {len(bumps)}")
    grid = GridSpec(model.L, grid_points)
    x, w = grid.x, grid.weights
    n = np.empty((model.K, grid.N))
    for i, b in enumerate(bumps):
        if not b.mass > 0:
            raise ValueError(f"patch {i}: initial mass must be positive")
        if not b.width > 0:
            raise ValueError(f"patch {i}: initial width must be positive")
        if not abs(b.center) < model.L:
            raise ValueError(f"patch {i}: center must lie inside (-L, L)")
        prof = np.exp(-0.5 * ((x - b.center) / b.width) ** 2)
        n[i] = b.mass * prof / (w @ prof)
    return DensityState(n, 0.0, grid)


def pressures(model: PatchModel, state: DensityState) -> np.ndarray:
    x, w = state.grid.x, state.grid.weights
    return np.array([w @ (model.psi_at(i, x) * state.n[i]) for i in range(model.K)])


def _pressure_ceiling(model: PatchModel) -> float:
    """Rough upper bound on stationary pressures: no patch grows above it."""
    xs = np.linspace(-model.L, model.L, 401)
    best = 0.0
    for i, g in enumerate(model.growth):
        inflow = model.nu[i].sum() - model.nu[i, i]
        top = float(np.max(g.base(xs))) + inflow
        if g.d > 0:
            best = max(best, top / g.d)
    return max(best, 1.0)


def stability_limit(model: PatchModel) -> float:
    """Largest admissible dt for the explicit reaction/migration part."""
    xs = np.linspace(-model.L, model.L, 401)
    I_top = _pressure_ceiling(model)
    sup_R = max(float(np.max(np.abs(g(xs, I)))) for g in model.growth for I in (0.0, I_top))
    rate = sup_R + float(np.max(np.diag(model.nu)))
    return STABILITY_BUDGET / rate if rate > 0 else np.inf


class Stepper:
    """Precomputed operator for repeated steps on one (model, grid, dt)."""

    def __init__(self, model: PatchModel, grid: GridSpec, dt: float):
        dt_max = stability_limit(model)
        if not dt > 0 or dt > dt_max:
            raise StabilityError(f"dt={dt} outside (0, {dt_max:.6g}]", dt_max)
        self.model, self.grid, self.dt = model, grid, dt
        x = grid.x
        self.base = np.ascontiguousarray([g.base(x) for g in model.growth], dtype=float)
        self.sens = np.array([g.d for g in model.growth], dtype=float)
        self.psi_w = np.ascontiguousarray(
            [model.psi_at(i, x) * grid.weights for i in range(model.K)], dtype=float)
        self.mig = np.ascontiguousarray(model.migration_operator())
        self.op = ImexOperator(grid.N, grid.h, dt, model.epsilon ** 2)

    def advance(self, n: np.ndarray, nsteps: int) -> int:
        """In-place; returns the clamp count."""
        return self.op.advance(n, self.base, self.sens, self.psi_w, self.mig, nsteps)


def step(model: PatchModel, state: DensityState, dt: float) -> DensityState:
    """One IMEX step; returns a new state."""
    out = state.copy()
    Stepper(model, state.grid, dt).advance(out.n, 1)
    out.tau = state.tau + dt
    return out


def run_to_steady(model: PatchModel, state: DensityState, opts: RunOptions = RunOptions(),
                  checkpoints=()) -> SimulationResult:
    """Step until ``tau_end`` or until the relative L1 rate of change over a
    window of ``STEADY_WINDOW`` steps drops below ``steady_tol``.

    ``checkpoints`` lists tau values at which profiles are stored in
    ``result.profiles`` (snapped to the next window boundary).
    """
    stepper = Stepper(model, state.grid, opts.dt)
    n = np.ascontiguousarray(state.n, dtype=float).copy()
    w = state.grid.weights
    window = STEADY_WINDOW
    stride_windows = max(1, -(-int(opts.sample_stride) // window))
    total_steps = int(round((opts.tau_end - state.tau) / opts.dt))
    ceiling = 1e3 * _pressure_ceiling(model)
    pending = sorted(float(c) for c in checkpoints)
    profiles = {}

    taus = [state.tau]
    series = [pressures(model, DensityState(n, state.tau, state.grid))]
    while pending and pending[0] <= state.tau:
        profiles[pending.pop(0)] = n.copy()

    t0 = time.perf_counter()
    done = 0
    clamped = 0
    steady = False
    k_window = 0
    tau = state.tau
    while done < total_steps:
        todo = min(window, total_steps - done)
        prev = n.copy()
        clamped += stepper.advance(n, todo)
        done += todo
        k_window += 1
        tau = state.tau + done * opts.dt
        I = pressures(model, DensityState(n, tau, state.grid))
        if not np.all(np.isfinite(I)) or np.any(I > ceiling):
            raise BlowUpError(f"pressures {I} exceeded {ceiling:.3g} at tau={tau:.6g}",
                              float(np.max(I)))
        while pending and pending[0] <= tau + 1e-12:
            profiles[pending.pop(0)] = n.copy()
        if k_window % stride_windows == 0 or done >= total_steps:
            taus.append(tau)
            series.append(I)
        if todo == window:
            span = todo * opts.dt
            change = np.abs(n - prev) @ w
            scale = np.maximum(1.0, n @ w)
            if np.max(change / (span * scale)) < opts.steady_tol:
                steady = True
                if taus[-1] != tau:
                    taus.append(tau)
                    series.append(I)
                break
    wall = time.perf_counter() - t0
    log.info("run finished at tau=%.6g after %d steps (steady=%s, %.1fs)", tau, done, steady, wall)
    final = DensityState(n, tau, state.grid)
    return SimulationResult(state=final, tau=np.array(taus), pressures=np.array(series),
                            steady=steady, wall_time=wall, steps=done, clamped=clamped,
                            profiles=profiles)


def equilibrium_residual(model: PatchModel, state: DensityState) -> float:
    """Trapezoid L1 norm of the discrete stationary residual."""
    n = state.n
    h = state.grid.h
    I = pressures(model, state)
    lap = np.empty_like(n)
    lap[:, 1:-1] = n[:, 2:] - 2 * n[:, 1:-1] + n[:, :-2]
    lap[:, 0] = 2 * (n[:, 1] - n[:, 0])
    lap[:, -1] = 2 * (n[:, -2] - n[:, -1])
    lap /= h * h
    x = state.grid.x
    react = np.array([n[i] * model.growth[i](x, I[i]) for i in range(model.K)])
    res = model.epsilon ** 2 * lap + react + model.migration_operator() @ n
    return float(np.max(np.abs(res) @ state.grid.weights))


def write_timeseries_csv(result: SimulationResult, path: str | Path) -> None:
    K = result.pressures.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau"] + [f"I_{i + 1}" for i in range(K)])
        for tau, row in zip(result.tau, result.pressures):
            w.writerow([repr(float(tau))] + [repr(float(v)) for v in row])


def write_profile_csv(grid: GridSpec, n: np.ndarray, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x"] + [f"n_{i + 1}" for i in range(n.shape[0])])
        for k, x in enumerate(grid.x):
            w.writerow([repr(float(x))] + [repr(float(v)) for v in n[:, k]])
