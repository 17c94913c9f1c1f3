"""Shared fixtures.  Long PDE runs are computed once per session."""
import csv
import json
from pathlib import Path

import numpy as np
import pytest

from patchpop import cli
from patchpop.model import mirror_quadratic
from patchpop.pde import DensityState, GridSpec, InitialBump, RunOptions, init_state, run_to_steady

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
PAPER_BUMPS = (InitialBump(-0.3, 1.0, 0.05), InitialBump(0.3, 1.0, 0.05))

# chain3 is checked against the general solver at the looser three-patch tolerances
VERIFY_ARGS = {
    "dimorphic": [],
    "monomorphic": [],
    "chain3": ["--tol-pos", "0.03", "--tol-mass", "0.08", "--tol-pressure", "0.08"],
}


class VerifiedRun:
    """Outputs of one ``patchpop verify`` invocation, read back from disk."""

    def __init__(self, name: str, out: Path, code: int):
        self.name, self.out, self.code = name, out, code
        self.manifest = json.loads((out / "manifest.json").read_text())
        rows = _read_rows(out / "profile_final.csv")
        x = np.array([r[0] for r in rows])
        n = np.array([r[1:] for r in rows]).T.copy()
        L = float(-x[0])
        self.state = DensityState(n, float(self.manifest["details"]["final_tau"]), GridSpec(L, x.size))
        ts = np.array(_read_rows(out / "timeseries.csv"))
        self.tau, self.pressures = ts[:, 0], ts[:, 1:]


def _read_rows(path):
    with open(path) as fh:
        rd = csv.reader(fh)
        next(rd)
        return [[float(v) for v in row] for row in rd]


@pytest.fixture(scope="session")
def verified(tmp_path_factory):
    cache = {}

    def get(name: str) -> VerifiedRun:
        if name not in cache:
            out = tmp_path_factory.mktemp(f"verify_{name}")
            code = cli.main(["--config", str(CONFIGS / f"{name}.yaml"), "--out", str(out),
                             "verify", *VERIFY_ARGS[name]])
            cache[name] = VerifiedRun(name, out, code)
        return cache[name]

    return get


@pytest.fixture(scope="session")
def dimorphic_eps_runs():
    """Final states of the dimorphic model at coarser mutation sizes."""
    out = {}
    for eps in (0.004, 0.002):
        model = mirror_quadratic(1.0, epsilon=eps)
        res = run_to_steady(model, init_state(model, PAPER_BUMPS, 801), RunOptions())
        out[eps] = (model, res)
    return out


# acceptance bookkeeping: one line per criterion in the terminal summary
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": 0, "failed": []})
    if report.when == "call" and report.passed:
        entry["passed"] += 1
    elif report.failed or report.skipped:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        ok = not e["failed"] and e["passed"] > 0
        line = f"criterion {number} ({e['title']}): {'PASS' if ok else 'FAIL'}"
        if e["failed"]:
            line += "  failing: " + ", ".join(e["failed"])
        tr.write_line(line)
