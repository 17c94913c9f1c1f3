"""Compare the numba kernels with the numpy/LAPACK fallback.

    python3 benchmarks/bench_kernels.py [--steps 2000] [--repeat 3]

Times the IMEX advance on the dimorphic reference model (K = 2, N = 801)
and on the three-patch chain, plus batched power iteration on random 4x4
Metzler matrices.  Compilation is excluded by a warm-up call.
"""
import argparse
import time
from pathlib import Path

import numpy as np

from patchpop import _kernels
from patchpop.model import build_model, load_config, mirror_quadratic
from patchpop.pde import InitialBump, Stepper, init_state

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_imex(name, model, bumps, steps, repeat):
    st = init_state(model, bumps, 801)
    s = Stepper(model, st.grid, 1e-3)
    out = {}
    for use_jit in (True, False):
        if use_jit and not _kernels.HAVE_NUMBA:
            continue
        n = st.n.copy()
        s.op.advance(n, s.base, s.sens, s.psi_w, s.mig, 1, use_jit=use_jit)

        def run():
            s.op.advance(st.n.copy(), s.base, s.sens, s.psi_w, s.mig, steps, use_jit=use_jit)

        out["numba" if use_jit else "numpy"] = best_of(run, repeat)
    report(f"imex {name} ({steps} steps)", out, steps)


def bench_power(count, repeat):
    rng = np.random.default_rng(0)
    mats = rng.uniform(0, 2, (count, 4, 4))
    mats[:, np.arange(4), np.arange(4)] -= 3.0
    out = {}
    for use_jit in (True, False):
        if use_jit and not _kernels.HAVE_NUMBA:
            continue
        _kernels.batched_power(mats[:2], use_jit=use_jit)
        out["numba" if use_jit else "numpy"] = best_of(lambda: _kernels.batched_power(mats, use_jit=use_jit), repeat)
    report(f"power iteration ({count} 4x4 matrices)", out, count)


def report(label, out, units):
    line = f"{label:<40}"
    for k, v in out.items():
        line += f"  {k}: {v * 1e3:9.2f} ms ({v / units * 1e6:7.2f} us/unit)"
    if len(out) == 2:
        line += f"  speedup x{out['numpy'] / out['numba']:.1f}"
    print(line)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    print(f"backend available: {_kernels.backend()}")
    two = (InitialBump(-0.3, 1.0, 0.05), InitialBump(0.3, 1.0, 0.05))
    bench_imex("K=2", mirror_quadratic(1.0), two, args.steps, args.repeat)
    chain = build_model(load_config(CONFIGS / "chain3.yaml"))
    bench_imex("K=3", chain, two + (InitialBump(0.0, 1.0, 0.05),), args.steps, args.repeat)
    bench_power(2000, args.repeat)


if __name__ == "__main__":
    main()
