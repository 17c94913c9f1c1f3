"""Problem instances: growth laws, migration network and trait domain.

The trait space is the interval [-L, L].  Patch ``i`` has a net growth rate
``R_i(x, I) = r_i(x) - d_i * I`` where ``I`` is the resource pressure felt in
that patch.  Migration is a K x K matrix ``nu``: ``nu[i, j]`` (i != j) is the
inflow rate into patch i from patch j and ``nu[i, i]`` the total outflow rate
from patch i.

Patch indices are 0-based in the Python API and 1-based in config files.
"""
from __future__ import annotations

import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import AssumptionError, ConfigError

GROWTH_KINDS = ("quadratic", "custom-tabulated")


@dataclass(frozen=True)
class Tabulated:
    """Piecewise-linear function sampled at increasing abscissae."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise ValueError("table needs two 1-D arrays of equal length >= 2")
        if np.any(np.diff(x) <= 0):
            raise ValueError("table abscissae must be strictly increasing")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __call__(self, x):
        return np.interp(x, self.x, self.y)

    def __eq__(self, other):
        return (isinstance(other, Tabulated) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y))

    def __hash__(self):
        return hash((self.x.tobytes(), self.y.tobytes()))


@dataclass(frozen=True)
class GrowthSpec:
    """Net growth law of one patch.

    ``quadratic``: ``R(x, I) = a x^2 + b x + c - d I`` with ``a < 0 < d``.
    ``custom-tabulated``: ``R(x, I) = table(x) - d I``; ``d >= 0`` so that
    deliberately non-monotone instances can still be built and reported on.
    """

    kind: str = "quadratic"
    a: float = -1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 1.0
    table: Tabulated | None = None

    def __post_init__(self):
        if self.kind not in GROWTH_KINDS:
            raise AssumptionError(f"unknown growth kind {self.kind!r}")
        if not np.isfinite([self.a, self.b, self.c, self.d]).all():
            raise AssumptionError("growth coefficients must be finite")
        if self.kind == "quadratic":
            if not self.a < 0:
                raise AssumptionError(f"quadratic growth needs a < 0, got a={self.a}")
            if not self.d > 0:
                raise AssumptionError(f"quadratic growth needs d > 0, got d={self.d}")
        else:
            if self.table is None:
                raise AssumptionError("custom-tabulated growth needs a table")
            if self.d < 0:
                raise AssumptionError(f"pressure sensitivity must be >= 0, got d={self.d}")

    def base(self, x):
        """Growth rate at zero pressure, ``R(x, 0)``."""
        if self.kind == "quadratic":
            return (self.a * x + self.b) * x + self.c
        return self.table(x)

    def __call__(self, x, I):
        return self.base(x) - self.d * I


Weight = float | Tabulated


@dataclass(frozen=True)
class PatchModel:
    L: float
    epsilon: float
    growth: tuple[GrowthSpec, ...]
    psi: tuple[Weight, ...]
    nu: np.ndarray
    conservative: bool = field(default=True, compare=False)

    def __post_init__(self):
        nu = np.array(self.nu, dtype=float)
        K = len(self.growth)
        if K < 1:
            raise AssumptionError("need at least one patch")
        if nu.shape != (K, K):
            raise AssumptionError(f"migration matrix must be {K}x{K}, got {nu.shape}")
        if len(self.psi) != K:
            raise AssumptionError(f"need {K} weight functions, got {len(self.psi)}")
        if not (self.L > 0 and self.epsilon > 0):
            raise AssumptionError("L and epsilon must be positive")
        off = nu[~np.eye(K, dtype=bool)]
        if np.any(off < 0) or np.any(np.diag(nu) < 0) or not np.isfinite(nu).all():
            raise AssumptionError("migration rates must be finite and nonnegative")
        nu.setflags(write=False)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "growth", tuple(self.growth))
        object.__setattr__(self, "psi", tuple(p if isinstance(p, Tabulated) else float(p)
                                              for p in self.psi))

    @property
    def K(self) -> int:
        return len(self.growth)

    def psi_at(self, i: int, x):
        p = self.psi[i]
        if isinstance(p, Tabulated):
            return p(x)
        return np.full_like(np.asarray(x, dtype=float), p) if np.ndim(x) else p

    def migration_operator(self) -> np.ndarray:
        """Matrix ``Q`` with ``Q[i, j] = nu[i, j]`` off the diagonal, ``-nu[i, i]`` on it."""
        Q = self.nu.copy()
        np.fill_diagonal(Q, -np.diag(self.nu))
        return Q

    def strongly_connected(self) -> bool:
        K = self.K
        if K == 1:
            return True
        adj = (self.nu > 0) & ~np.eye(K, dtype=bool)
        reach = np.eye(K, dtype=bool) | adj
        for _ in range(K):
            reach = reach | ((reach.astype(int) @ reach.astype(int)) > 0)
        return bool(reach.all())

    def with_migration(self, nu) -> "PatchModel":
        return replace(self, nu=np.asarray(nu, dtype=float))

    def with_epsilon(self, epsilon: float) -> "PatchModel":
        return replace(self, epsilon=float(epsilon))


def conservation_diagonal(nu_off: np.ndarray) -> np.ndarray:
    """Outflow rates equal to what the other patches receive (column sums)."""
    off = np.array(nu_off, dtype=float)
    np.fill_diagonal(off, 0.0)
    return off.sum(axis=0)


def growth(model: PatchModel, i: int, x, I):
    """Evaluate ``R_i(x, I)``."""
    if not 0 <= i < model.K:
        raise IndexError(f"patch index {i} out of range for K={model.K}")
    return model.growth[i](x, I)


# ---------------------------------------------------------------------------
# config ingestion
# ---------------------------------------------------------------------------

_TOP_KEYS = {"model", "migration", "sim"}
_MODEL_KEYS = {"K", "L", "epsilon"}
_PATCH_KEYS = {"growth", "growth.kind", "kind", "a", "b", "c", "d", "psi", "table"}
_MIGRATION_KEYS = {"matrix", "conservation"}
SIM_KEYS = {"grid_points", "dt", "tau_end", "steady_tol", "sample_stride"}
INIT_KEYS = {"center", "mass", "width"}


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(str(path), "top level must be a mapping of sections")
    return doc


def _number(section: Mapping, key: str, where: str, default=None) -> float:
    if key not in section:
        if default is None:
            raise ConfigError(f"{where}.{key}", "missing")
        return float(default)
    try:
        value = float(section[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}", f"not a number: {section[key]!r}") from None
    if not np.isfinite(value):
        raise ConfigError(f"{where}.{key}", "must be finite")
    return value


def _warn_unknown(section: Mapping, known: set, where: str):
    for key in section:
        if key not in known:
            warnings.warn(f"unknown config key {where}.{key} ignored", stacklevel=3)


def _section(config: Mapping, name: str, required: bool = True) -> Mapping:
    sec = config.get(name)
    if sec is None:
        if required:
            raise ConfigError(name, "missing section")
        return {}
    if not isinstance(sec, Mapping):
        raise ConfigError(name, "section must be a mapping")
    return sec


def _table(raw: Any, where: str) -> Tabulated:
    try:
        arr = np.asarray(raw, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("expected rows of [x, value]")
        return Tabulated(arr[:, 0], arr[:, 1])
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, f"bad table: {exc}") from None


def _parse_patch(sec: Mapping, where: str) -> tuple[GrowthSpec, Weight]:
    _warn_unknown(sec, _PATCH_KEYS, where)
    g = sec.get("growth")
    if isinstance(g, Mapping):
        kind = g.get("kind", "quadratic")
    else:
        kind = sec.get("growth.kind", sec.get("kind", g if isinstance(g, str) else "quadratic"))
    if kind not in GROWTH_KINDS:
        raise ConfigError(f"{where}.growth.kind", f"expected one of {GROWTH_KINDS}, got {kind!r}")
    d = _number(sec, "d", where)
    if kind == "quadratic":
        spec = GrowthSpec("quadratic", _number(sec, "a", where), _number(sec, "b", where, 0.0),
                          _number(sec, "c", where, 0.0), d)
    else:
        if "table" not in sec:
            raise ConfigError(f"{where}.table", "missing")
        spec = GrowthSpec("custom-tabulated", d=d, table=_table(sec["table"], f"{where}.table"))
    psi_raw = sec.get("psi", 1.0)
    if isinstance(psi_raw, (list, tuple)):
        psi: Weight = _table(psi_raw, f"{where}.psi")
    else:
        psi = _number(sec, "psi", where, 1.0)
    return spec, psi


def _parse_migration(sec: Mapping, K: int) -> tuple[np.ndarray, bool]:
    _warn_unknown(sec, _MIGRATION_KEYS, "migration")
    conservation = bool(sec.get("conservation", True))
    if "matrix" not in sec:
        if K == 1:
            return np.zeros((1, 1)), conservation
        raise ConfigError("migration.matrix", "missing")
    raw = sec["matrix"]
    try:
        rows = [list(r) for r in raw] if raw and isinstance(raw[0], (list, tuple)) else None
        if rows is None:
            flat = list(raw)
            if len(flat) != K * K:
                raise ValueError(f"expected {K * K} entries")
            rows = [flat[r * K:(r + 1) * K] for r in range(K)]
        if len(rows) != K or any(len(r) != K for r in rows):
            raise ValueError(f"expected a {K}x{K} matrix")
        vals = np.array([[np.nan if v is None else float(v) for v in r] for r in rows])
    except (TypeError, ValueError) as exc:
        raise ConfigError("migration.matrix", str(exc)) from None
    off = ~np.eye(K, dtype=bool)
    if np.isnan(vals[off]).any():
        raise ConfigError("migration.matrix", "off-diagonal entries are required")
    default = conservation_diagonal(np.nan_to_num(vals))
    diag = np.diag(vals).copy()
    missing = np.isnan(diag)
    if conservation:
        given = ~missing
        if np.any(np.abs(diag[given] - default[given]) > 1e-12 * (1 + default[given])):
            raise AssumptionError(
                "migration diagonal differs from the conservation default "
                "(column sums); set migration.conservation: false to override")
        diag[missing] = default[missing]
    else:
        diag[missing] = 0.0
    np.fill_diagonal(vals, diag)
    return vals, conservation


def build_model(config: Mapping) -> PatchModel:
    """Validated model from a parsed config mapping (see README for the layout)."""
    if not isinstance(config, Mapping):
        raise ConfigError("<root>", "config must be a mapping")
    for key in config:
        if key not in _TOP_KEYS and not str(key).startswith(("patch.", "init.")):
            warnings.warn(f"unknown config section {key!r} ignored", stacklevel=2)
    msec = _section(config, "model")
    _warn_unknown(msec, _MODEL_KEYS, "model")
    K_f = _number(msec, "K", "model")
    if K_f != int(K_f) or K_f < 1:
        raise ConfigError("model.K", f"must be a positive integer, got {msec['K']!r}")
    K = int(K_f)
    L = _number(msec, "L", "model")
    eps = _number(msec, "epsilon", "model")
    if L <= 0:
        raise ConfigError("model.L", "must be positive")
    if eps <= 0:
        raise ConfigError("model.epsilon", "must be positive")
    specs, psis = [], []
    for i in range(1, K + 1):
        spec, psi = _parse_patch(_section(config, f"patch.{i}"), f"patch.{i}")
        specs.append(spec)
        psis.append(psi)
    for key in config:
        if str(key).startswith("patch."):
            suffix = str(key)[len("patch."):]
            if not (suffix.isdigit() and 1 <= int(suffix) <= K):
                warnings.warn(f"config section {key!r} does not match K={K}; ignored", stacklevel=2)
    nu, conservative = _parse_migration(_section(config, "migration", required=K > 1), K)
    return PatchModel(L=L, epsilon=eps, growth=tuple(specs), psi=tuple(psis), nu=nu,
                      conservative=conservative)


def mirror_quadratic(nu: float, r0: float = 3.0, shift: float = 1.0, epsilon: float = 1e-3,
                     L: float = 2.0) -> PatchModel:
    """Two patches with ``R_{1,2} = r0 - (x +/- shift)^2 - I`` and equal migration ``nu``.

    ``nu=2.5`` and ``nu=1`` give the monomorphic and dimorphic reference runs.
    """
    g1 = GrowthSpec("quadratic", -1.0, -2.0 * shift, r0 - shift * shift, 1.0)
    g2 = GrowthSpec("quadratic", -1.0, 2.0 * shift, r0 - shift * shift, 1.0)
    return PatchModel(L=L, epsilon=epsilon, growth=(g1, g2), psi=(1.0, 1.0),
                      nu=np.array([[nu, nu], [nu, nu]]))


# ---------------------------------------------------------------------------
# standing assumptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    witness: dict

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = ", ".join(f"{k}={v}" for k, v in self.witness.items())
        return f"[{status}] {self.name}: {detail}"


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        return "\n".join(c.line() for c in self.checks)


def _second_differences(f, xs):
    h = xs[1] - xs[0]
    v = f(xs)
    return (v[:-2] - 2 * v[1:-1] + v[2:]) / (h * h)


def validate_assumptions(model: PatchModel, I_m: float, I_M: float,
                         sample_count: int = 201) -> ValidationReport:
    """Sampled check of the standing assumptions on growth and weights.

    Checks: positivity/negativity of growth at the pressure bounds (also at
    the bounds rescaled by outflow ratios), strict pressure monotonicity,
    a lower bound on the trait curvature, boundedness of growth, and the
    weight bounds.  Failures are reported with the worst sample, never raised.
    """
    if not I_m < I_M:
        raise ValueError("need I_m < I_M")
    if sample_count < 2:
        raise ValueError("need at least two samples")
    xs = np.linspace(-model.L, model.L, sample_count)
    K = model.K
    outflow = np.diag(model.nu)
    checks = []

    lo_val, lo_at = np.inf, None
    hi_val, hi_at = -np.inf, None
    for i in range(K):
        lows, highs = [I_m], [I_M]
        for j in range(K):
            if j != i and outflow[i] > 0 and outflow[j] > 0:
                lows.append(outflow[j] / outflow[i] * I_m)
                highs.append(outflow[j] / outflow[i] * I_M)
        for I in lows:
            r = growth(model, i, xs, I)
            k = int(np.argmin(r))
            if r[k] < lo_val:
                lo_val, lo_at = float(r[k]), (i, float(xs[k]), float(I))
        for I in highs:
            r = growth(model, i, xs, I)
            k = int(np.argmax(r))
            if r[k] > hi_val:
                hi_val, hi_at = float(r[k]), (i, float(xs[k]), float(I))
    checks.append(Check("growth_positive_at_I_m", lo_val > 0,
                        {"min_R": lo_val, "patch": lo_at[0], "x": lo_at[1], "I": lo_at[2]}))
    checks.append(Check("growth_negative_at_I_M", hi_val < 0,
                        {"max_R": hi_val, "patch": hi_at[0], "x": hi_at[1], "I": hi_at[2]}))

    # dR/dI = -d exactly for every supported growth kind
    ds = np.array([g.d for g in model.growth])
    ok = bool(np.all(ds > 0))
    C = float(max(ds.max(), 1.0 / ds.min())) if ok else float("inf")
    worst = int(np.argmin(ds))
    checks.append(Check("pressure_monotone", ok, {"C": C, "patch": worst, "dR_dI": -float(ds[worst])}))

    D = 0.0
    worst_curv = (0, 0.0)
    for i, g in enumerate(model.growth):
        if g.kind == "quadratic":
            curv = 2.0 * g.a
            x_at = 0.0
        else:
            dd = _second_differences(g.base, xs)
            k = int(np.argmin(dd))
            curv, x_at = float(dd[k]), float(xs[k + 1])
        if -curv > D:
            D = -curv
            worst_curv = (i, x_at)
    checks.append(Check("curvature_lower_bound", bool(np.isfinite(D)),
                        {"D": D, "patch": worst_curv[0], "x": worst_curv[1]}))

    bound = max(float(np.max(np.abs(growth(model, i, xs, I))))
                for i in range(K) for I in (0.0, I_m, I_M))
    checks.append(Check("growth_bounded", bool(np.isfinite(bound)), {"C": bound}))

    a_m = min(float(np.min(model.psi_at(i, xs))) for i in range(K))
    a_M = max(float(np.max(model.psi_at(i, xs))) for i in range(K))
    checks.append(Check("psi_bounds", bool(a_m > 0 and np.isfinite(a_M)), {"a_m": a_m, "a_M": a_M}))

    h = xs[1] - xs[0]
    slope = 0.0
    for i in range(K):
        if isinstance(model.psi[i], Tabulated):
            v = model.psi_at(i, xs)
            slope = max(slope, abs(v[1] - v[0]) / h, abs(v[-1] - v[-2]) / h)
    checks.append(Check("psi_neumann", slope <= 1e-6, {"max_endpoint_slope": slope}))
    return ValidationReport(tuple(checks))
