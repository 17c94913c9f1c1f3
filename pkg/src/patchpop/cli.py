"""Command-line front end.

    patchpop [--config PATH] [--out DIR] {simulate,asymptotic,verify,sweep} [options]

Exit codes: 0 ok, 1 tolerance failure, 2 config error, 3 numerical abort,
4 solver non-convergence.  Every command writes ``manifest.json`` into the
output directory; passing that manifest back as ``--config`` reruns the
same computation.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .asymptotic import (AsymptoticSolution, check_symmetric, locate_transition, migration_sweep,
                         solve_general, solve_symmetric, verify_solution, write_solution_csv,
                         write_sweep_csv)
from .concentration import Tolerances, compare_limits, extract_diracs, hopf_cole
from .errors import AssumptionError, BracketError, ConfigError, NumericalError, StabilityError
from .hamiltonian import landscape, write_landscape_csv
from .model import INIT_KEYS, SIM_KEYS, PatchModel, build_model, load_config
from .pde import (InitialBump, RunOptions, SimulationResult, init_state, pressures, run_to_steady,
                  write_profile_csv, write_timeseries_csv)

log = logging.getLogger("patchpop")

EXIT_OK, EXIT_TOL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NOCONV = 0, 1, 2, 3, 4
MANIFEST_VERSION = 1


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config: dict
    flags: dict
    outputs: list = field(default_factory=list)
    status: str = "ok"
    exit_code: int = EXIT_OK
    wall_time: float = 0.0
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        import numba
        import scipy
        return {
            "manifest_version": MANIFEST_VERSION,
            "command": self.command,
            "flags": self.flags,
            "config": self.config,
            "outputs": sorted(self.outputs),
            "status": self.status,
            "exit_code": self.exit_code,
            "wall_time": round(self.wall_time, 3),
            "details": self.details,
            "versions": {
                "patchpop": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "numba": numba.__version__,
                "backend": _kernels.backend(),
            },
        }

    def write(self, out: Path) -> Path:
        """Atomic: write a sibling temp file, then rename over the target."""
        path = out / "manifest.json"
        fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(self.to_json(), fh, indent=2, sort_keys=True, default=_json_default)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# config helpers
# ---------------------------------------------------------------------------

def read_config(path: str | Path) -> dict:
    """YAML config, or the ``config`` snapshot of an earlier manifest."""
    doc = load_config(path)
    if "manifest_version" in doc:
        snap = doc.get("config")
        if not isinstance(snap, dict):
            raise ConfigError(str(path), "manifest has no config snapshot")
        return snap
    return doc


def sim_options(config: dict) -> tuple[RunOptions, int]:
    sec = config.get("sim") or {}
    if not isinstance(sec, dict):
        raise ConfigError("sim", "section must be a mapping")
    for key in sec:
        if key not in SIM_KEYS:
            warnings.warn(f"unknown config key sim.{key} ignored", stacklevel=2)
    d = RunOptions()
    try:
        opts = RunOptions(dt=float(sec.get("dt", d.dt)), tau_end=float(sec.get("tau_end", d.tau_end)),
                          steady_tol=float(sec.get("steady_tol", d.steady_tol)),
                          sample_stride=int(sec.get("sample_stride", d.sample_stride)))
        N = int(sec.get("grid_points", 801))
    except (TypeError, ValueError) as exc:
        raise ConfigError("sim", str(exc)) from None
    if opts.tau_end <= 0 or opts.sample_stride < 1:
        raise ConfigError("sim", "tau_end and sample_stride must be positive")
    return opts, N


def initial_bumps(config: dict, K: int) -> list[InitialBump]:
    """``init.<i>`` sections; missing ones default to mass 1, width 0.05 at 0."""
    bumps = []
    for i in range(1, K + 1):
        sec = config.get(f"init.{i}") or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"init.{i}", "section must be a mapping")
        for key in sec:
            if key not in INIT_KEYS:
                warnings.warn(f"unknown config key init.{i}.{key} ignored", stacklevel=2)
        try:
            bumps.append(InitialBump(float(sec.get("center", 0.0)), float(sec.get("mass", 1.0)),
                                     float(sec.get("width", 0.05))))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"init.{i}", str(exc)) from None
    return bumps


def _floats(text: str, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise _Exit(EXIT_CONFIG, f"{what}: expected comma-separated numbers, got {text!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise _Exit(EXIT_CONFIG, f"{what}: values must be finite")
    return vals


# ---------------------------------------------------------------------------
# workflows
# ---------------------------------------------------------------------------

def simulate(model: PatchModel, config: dict, out: Path, checkpoints=()) -> tuple[SimulationResult, list]:
    opts, N = sim_options(config)
    state = init_state(model, initial_bumps(config, model.K), N)
    result = run_to_steady(model, state, opts, checkpoints)
    files = ["timeseries.csv", "profile_final.csv"]
    write_timeseries_csv(result, out / files[0])
    write_profile_csv(state.grid, result.state.n, out / files[1])
    for tau, n in sorted(result.profiles.items()):
        name = f"profile_tau{tau:g}.csv"
        write_profile_csv(state.grid, n, out / name)
        files.append(name)
    return result, files


def solve(model: PatchModel, mode: str, I0=None, bracket=(0.5, 5.0)) -> AsymptoticSolution:
    if mode == "auto":
        try:
            check_symmetric(model)
            mode = "symmetric"
        except AssumptionError:
            mode = "general"
    if mode == "symmetric":
        return solve_symmetric(model, bracket)
    return solve_general(model, np.ones(model.K) if I0 is None else I0)


def _solution_outputs(model: PatchModel, sol: AsymptoticSolution, out: Path) -> tuple[list, bool]:
    write_solution_csv(sol, out / "solution.csv")
    write_landscape_csv(landscape(model, sol.I), out / "landscape.csv")
    rep = verify_solution(model, sol)
    (out / "constraints.txt").write_text(rep.summary() + "\n")
    return ["solution.csv", "landscape.csv", "constraints.txt"], rep.passed


def cmd_simulate(args, model, config, out, manifest: RunManifest) -> int:
    checkpoints = _floats(args.checkpoints, "--checkpoints") if args.checkpoints else []
    result, files = simulate(model, config, out, checkpoints)
    manifest.outputs += files
    I = result.pressures[-1]
    manifest.details.update(final_tau=result.tau[-1], final_I=I.tolist(), steady=result.steady,
                            steps=result.steps, clamp_fraction=result.clamp_fraction)
    print(f"tau={result.tau[-1]:.6g}  I=" + ", ".join(f"{v:.6f}" for v in I)
          + f"  steady={result.steady}")
    return EXIT_OK


def cmd_asymptotic(args, model, config, out, manifest: RunManifest) -> int:
    I0 = np.array(_floats(args.I0, "--I0")) if args.I0 else None
    if I0 is not None and I0.size != model.K:
        raise _Exit(EXIT_CONFIG, f"--I0 needs {model.K} values")
    bracket = tuple(_floats(args.bracket, "--bracket"))
    if len(bracket) != 2:
        raise _Exit(EXIT_CONFIG, "--bracket needs two values")
    sol = solve(model, args.mode, I0, bracket)
    files, ok = _solution_outputs(model, sol, out)
    manifest.outputs += files
    manifest.details.update(I=sol.I.tolist(), points=sol.points.tolist(), converged=sol.converged,
                            method=sol.method, constraints_passed=ok)
    print(f"I={np.array2string(sol.I, precision=8)}  points={np.array2string(sol.points, precision=8)}"
          f"  converged={sol.converged}")
    if not sol.converged:
        print("solver did not converge; best iterate written", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK if ok else EXIT_TOL


def cmd_verify(args, model, config, out, manifest: RunManifest) -> int:
    tol = Tolerances(args.tol_pos, args.tol_mass, args.tol_pressure)
    sol = solve(model, args.mode)
    files, _ = _solution_outputs(model, sol, out)
    manifest.outputs += files
    if not sol.converged:
        raise _Exit(EXIT_NOCONV, "asymptotic solver did not converge")
    result, files = simulate(model, config, out)
    manifest.outputs += files
    final = result.state
    atoms = extract_diracs(final, args.threshold)
    report = compare_limits(atoms, sol, tol, pressures(model, final), hopf_cole(final, model.epsilon))
    report.write_csv(out / "comparison.csv")
    (out / "comparison.txt").write_text(report.summary() + "\n")
    manifest.outputs += ["comparison.csv", "comparison.txt"]
    manifest.details.update(flags=report.flags, steady=result.steady, final_tau=result.tau[-1],
                            final_I=result.pressures[-1].tolist(), steps=result.steps,
                            clamp_fraction=result.clamp_fraction,
                            solution_I=sol.I.tolist(), solution_points=sol.points.tolist())
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_TOL


def cmd_sweep(args, model, config, out, manifest: RunManifest) -> int:
    values = _floats(args.values, "--values")
    if not values or min(values) <= 0:
        raise _Exit(EXIT_CONFIG, "--values must be positive")
    bracket = tuple(_floats(args.bracket, "--bracket"))
    check_symmetric(model)
    rows = migration_sweep(model, values, args.workers, bracket)
    write_sweep_csv(rows, out / "sweep.csv")
    manifest.outputs.append("sweep.csv")
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"nu={r.nu}: {r.error}", file=sys.stderr)
    manifest.details["failed_values"] = [r.nu for r in failed]
    if args.refine:
        counts = [r.n_atoms for r in rows if not r.error]
        good = [r.nu for r in rows if not r.error]
        edges = [(good[k], good[k + 1]) for k in range(len(good) - 1) if counts[k] != counts[k + 1]]
        found = [locate_transition(model, lo, hi, args.refine, bracket) for lo, hi in edges]
        with (out / "transitions.csv").open("w", newline="") as fh:
            fh.write("lo,hi\n")
            for lo, hi in found:
                fh.write(f"{lo!r},{hi!r}\n")
        manifest.outputs.append("transitions.csv")
        manifest.details["transitions"] = [list(p) for p in found]
        for lo, hi in found:
            print(f"atom count changes in ({lo:.6f}, {hi:.6f})")
    for r in rows:
        print(f"nu={r.nu:g}  atoms={r.n_atoms}  I={r.I:.8f}  x=({r.x_left:.6f}, {r.x_right:.6f})")
    return EXIT_TOL if failed else EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "asymptotic": cmd_asymptotic,
            "verify": cmd_verify, "sweep": cmd_sweep}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, top: bool):
    # subcommand copies default to SUPPRESS so they do not clobber the global value
    default = None if top else argparse.SUPPRESS
    p.add_argument("--config", metavar="PATH", default=default, help="YAML config or manifest.json")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory (default: .)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchpop",
                                 description="Trait concentration in multi-patch populations.")
    _common(ap, True)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="time-step the PDE to steady state")
    _common(p, False)
    p.add_argument("--checkpoints", metavar="T1,T2", help="tau values at which to dump profiles")

    p = sub.add_parser("asymptotic", help="solve the small-mutation limit")
    _common(p, False)
    p.add_argument("--mode", choices=("symmetric", "general", "auto"), default="auto")
    p.add_argument("--I0", metavar="I1,I2,..", help="starting pressures (general mode)")
    p.add_argument("--bracket", default="0.5,5", metavar="LO,HI", help="pressure bracket (symmetric)")

    p = sub.add_parser("verify", help="simulate, solve and compare")
    _common(p, False)
    p.add_argument("--mode", choices=("symmetric", "general", "auto"), default="auto")
    p.add_argument("--tol-pos", type=float, default=0.02)
    p.add_argument("--tol-mass", type=float, default=0.05)
    p.add_argument("--tol-pressure", type=float, default=0.05)
    p.add_argument("--threshold", type=float, default=0.01, help="relative peak threshold")

    p = sub.add_parser("sweep", help="atom count against migration rate (symmetric models)")
    _common(p, False)
    p.add_argument("--values", required=True, metavar="V1,V2,..", help="migration rates")
    p.add_argument("--workers", type=int, default=1, help="overridden by PATCHPOP_WORKERS")
    p.add_argument("--bracket", default="0.5,5", metavar="LO,HI")
    p.add_argument("--refine", type=float, default=0.0, metavar="XTOL",
                   help="bisect each atom-count change down to XTOL")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or ".")
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "out", "verbose")}
    manifest = None
    t0 = time.perf_counter()
    try:
        config = read_config(args.config)
        model = build_model(config)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, config, flags)
        code = COMMANDS[args.command](args, model, config, out, manifest)
        message = ""
    except _Exit as exc:
        code, message = exc.code, str(exc)
    except (ConfigError, AssumptionError, BracketError, StabilityError) as exc:
        code, message = EXIT_CONFIG, f"{type(exc).__name__}: {exc}"
    except NumericalError as exc:
        code, message = EXIT_NUMERIC, f"{type(exc).__name__}: {exc}"
    except ValueError as exc:
        code, message = EXIT_CONFIG, f"invalid input: {exc}"
    if message:
        print(f"error: {message}", file=sys.stderr)
    if manifest is not None:
        manifest.exit_code = code
        manifest.status = {EXIT_OK: "ok", EXIT_TOL: "tolerance_failed", EXIT_CONFIG: "config_error",
                           EXIT_NUMERIC: "numerical_abort", EXIT_NOCONV: "not_converged"}[code]
        if message:
            manifest.details["error"] = message
        manifest.wall_time = time.perf_counter() - t0
        manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
