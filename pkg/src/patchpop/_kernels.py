"""Hot loops, compiled with numba when available.

Set ``PATCHPOP_DISABLE_JIT=1`` to force the pure numpy/scipy path (useful
for debugging and for the benchmark that compares the two).
"""
from __future__ import annotations

import os

import numpy as np
from scipy.linalg import lapack

_DISABLED = os.environ.get("PATCHPOP_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


# values below this are set to zero: they are invisible at any reported
# tolerance and would otherwise decay into subnormals, which are ~20x slower
FLUSH = 1e-300


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Neumann diffusion operator
# ---------------------------------------------------------------------------

def neumann_system(n_nodes: int, rate: float):
    """Tridiagonal bands of ``I - rate * D2`` with mirror ghost nodes.

    ``rate`` is ``dt * diffusivity / h**2``.  Returns (sub, diag, sup).
    """
    sub = np.full(n_nodes - 1, -rate)
    sup = np.full(n_nodes - 1, -rate)
    diag = np.full(n_nodes, 1.0 + 2.0 * rate)
    sup[0] = -2.0 * rate
    sub[-1] = -2.0 * rate
    return sub, diag, sup


def thomas_factor(sub, diag, sup):
    """Precompute the forward-sweep coefficients of the Thomas algorithm.

    The operator is constant over a run, so only the right-hand side sweep is
    repeated per step.
    """
    n = diag.shape[0]
    cprime = np.zeros(n)
    inv_den = np.zeros(n)
    inv_den[0] = 1.0 / diag[0]
    cprime[0] = sup[0] * inv_den[0]
    for k in range(1, n):
        den = diag[k] - sub[k - 1] * cprime[k - 1]
        inv_den[k] = 1.0 / den
        if k < n - 1:
            cprime[k] = sup[k] * inv_den[k]
    return cprime, inv_den


def _thomas_solve_py(sub, cprime, inv_den, rhs, out):
    n = rhs.shape[0]
    out[0] = rhs[0] * inv_den[0]
    for k in range(1, n):
        out[k] = (rhs[k] - sub[k - 1] * out[k - 1]) * inv_den[k]
    for k in range(n - 2, -1, -1):
        out[k] -= cprime[k] * out[k + 1]
    return out


def _imex_advance_py(n, base, sens, psi_w, mig, dk, mk, cprime, dt, nsteps, work):
    """Advance ``n`` (K x N, in place) by ``nsteps`` IMEX steps.

    Per step: pressures from the current state, explicit Euler on reaction
    plus migration, then one implicit Neumann diffusion solve per patch.
    The Thomas recurrences are latency bound, so patches are swept in pairs
    with scalar carries; the next step's pressures are accumulated during
    back substitution.  ``psi_w`` already carries the trapezoid weights.
    Returns the number of negative values clamped to zero (values below
    ``FLUSH`` are zeroed too but not counted).
    """
    K, N = n.shape
    pressure = np.zeros(K)
    rate = np.empty(K)
    for i in range(K):
        acc = 0.0
        for k in range(N):
            acc += psi_w[i, k] * n[i, k]
        pressure[i] = acc
    clamped = 0
    for _ in range(nsteps):
        for i in range(K):
            rate[i] = sens[i] * pressure[i]
        for i in range(K):
            for k in range(N):
                work[i, k] = n[i, k] * (1.0 + dt * (base[i, k] - rate[i]))
            for j in range(K):
                coef = dt * mig[i, j]
                if coef != 0.0:
                    for k in range(N):
                        work[i, k] += coef * n[j, k]
        i = 0
        while i < K:
            if i + 1 < K:
                a = work[i, 0] * dk[0]
                b = work[i + 1, 0] * dk[0]
                work[i, 0] = a
                work[i + 1, 0] = b
                for k in range(1, N):
                    a = work[i, k] * dk[k] - mk[k] * a
                    b = work[i + 1, k] * dk[k] - mk[k] * b
                    work[i, k] = a
                    work[i + 1, k] = b
                a = 0.0
                b = 0.0
                pa = 0.0
                pb = 0.0
                for k in range(N - 1, -1, -1):
                    va = work[i, k] - cprime[k] * a
                    vb = work[i + 1, k] - cprime[k] * b
                    clamped += (va < 0.0) + (vb < 0.0)
                    a = 0.0 if va < FLUSH else va
                    b = 0.0 if vb < FLUSH else vb
                    n[i, k] = a
                    n[i + 1, k] = b
                    pa += psi_w[i, k] * a
                    pb += psi_w[i + 1, k] * b
                pressure[i] = pa
                pressure[i + 1] = pb
                i += 2
            else:
                a = work[i, 0] * dk[0]
                work[i, 0] = a
                for k in range(1, N):
                    a = work[i, k] * dk[k] - mk[k] * a
                    work[i, k] = a
                a = 0.0
                pa = 0.0
                for k in range(N - 1, -1, -1):
                    va = work[i, k] - cprime[k] * a
                    clamped += va < 0.0
                    a = 0.0 if va < FLUSH else va
                    n[i, k] = a
                    pa += psi_w[i, k] * a
                pressure[i] = pa
                i += 1
    return clamped


POWER_PHASE = 2000


def _cw_bounds(A, v):
    """Collatz-Wielandt bracket min/max (A v)_i / v_i of the Perron root."""
    K = v.shape[0]
    lo, hi = np.inf, -np.inf
    for i in range(K):
        acc = 0.0
        for j in range(K):
            acc += A[i, j] * v[j]
        r = acc / v[i]
        lo = min(lo, r)
        hi = max(hi, r)
    return lo, hi


def _solve_small(M, rhs, out):
    """Gaussian elimination with partial pivoting; M and rhs are overwritten."""
    K = rhs.shape[0]
    for c in range(K):
        p = c
        for r in range(c + 1, K):
            if abs(M[r, c]) > abs(M[p, c]):
                p = r
        if p != c:
            for j in range(K):
                M[c, j], M[p, j] = M[p, j], M[c, j]
            rhs[c], rhs[p] = rhs[p], rhs[c]
        for r in range(c + 1, K):
            f = M[r, c] / M[c, c]
            for j in range(c, K):
                M[r, j] -= f * M[c, j]
            rhs[r] -= f * rhs[c]
    for i in range(K - 1, -1, -1):
        acc = rhs[i]
        for j in range(i + 1, K):
            acc -= M[i, j] * out[j]
        out[i] = acc / M[i, i]


def _noda_refine(A, v, tol, max_iter):
    """Inverse iteration with the shift at the Collatz-Wielandt upper bound.

    Converges quadratically where the power method stalls on a small
    spectral gap.  ``v`` (positive, unit sum) is refined in place.
    """
    K = v.shape[0]
    M = np.empty((K, K))
    rhs = np.empty(K)
    y = np.empty(K)
    it = 0
    lo, hi = _cw_bounds(A, v)
    while it < max_iter and hi - lo > tol:
        it += 1
        sigma = hi + 1e-15 * (1.0 + abs(hi))
        for i in range(K):
            for j in range(K):
                M[i, j] = -A[i, j]
            M[i, i] += sigma
            rhs[i] = v[i]
        _solve_small(M, rhs, y)
        total = 0.0
        for i in range(K):
            total += abs(y[i])
        for i in range(K):
            v[i] = max(abs(y[i]) / total, 1e-300)
        nlo, nhi = _cw_bounds(A, v)
        if nhi - nlo >= hi - lo:
            lo, hi = nlo, nhi
            break
        lo, hi = nlo, nhi
    return 0.5 * (lo + hi), it


def _batched_power_py(mats, tol, max_iter, lam, chi, iters, resid):
    """Shifted power iteration on a stack of Metzler matrices (B x K x K).

    Matrices whose Collatz-Wielandt bracket is still open after the power
    phase (small spectral gap) are finished by Noda inverse iteration.
    """
    B, K, _ = mats.shape
    v = np.empty(K)
    w = np.empty(K)
    for b in range(B):
        A = mats[b]
        shift = 0.0
        for i in range(K):
            if abs(A[i, i]) > shift:
                shift = abs(A[i, i])
        shift += 1.0
        for i in range(K):
            v[i] = 1.0 / K
        mu_old = np.inf
        mu = 0.0
        it = 0
        while it < min(max_iter, POWER_PHASE):
            it += 1
            mu = 0.0
            for i in range(K):
                acc = shift * v[i]
                for j in range(K):
                    acc += A[i, j] * v[j]
                w[i] = acc
                mu += acc
            for i in range(K):
                v[i] = w[i] / mu
            if abs(mu - mu_old) < tol:
                break
            mu_old = mu
        lam[b] = mu - shift
        lo, hi = _cw_bounds(A, v)
        if hi - lo > 1e3 * tol:
            lam[b], extra = _noda_refine(A, v, tol, max_iter - it)
            it += extra
        r = 0.0
        for i in range(K):
            acc = -lam[b] * v[i]
            for j in range(K):
                acc += A[i, j] * v[j]
            if abs(acc) > r:
                r = abs(acc)
            chi[b, i] = v[i]
        iters[b] = it
        resid[b] = r


if HAVE_NUMBA:
    _thomas_solve = njit(cache=True, nogil=True)(_thomas_solve_py)
    _imex_advance_jit = njit(cache=True, nogil=True, fastmath={"contract", "reassoc"})(_imex_advance_py)
    _cw_bounds = njit(cache=True, nogil=True)(_cw_bounds)
    _solve_small = njit(cache=True, nogil=True)(_solve_small)
    _noda_refine = njit(cache=True, nogil=True)(_noda_refine)
    _batched_power_jit = njit(cache=True, nogil=True)(_batched_power_py)
else:  # pragma: no cover
    _thomas_solve = _thomas_solve_py


# ---------------------------------------------------------------------------
# numpy fallbacks: vectorized across patches / matrices
# ---------------------------------------------------------------------------

def _imex_advance_np(n, base, sens, psi_w, mig, sub, diag, sup, dt, nsteps):
    # LAPACK tridiagonal factorization, reused for every step
    dl, d, du, du2, ipiv, info = lapack.dgttrf(sub, diag, sup)
    if info != 0:  # pragma: no cover - operator is diagonally dominant
        raise np.linalg.LinAlgError("tridiagonal factorization failed")
    clamped = 0
    for _ in range(nsteps):
        pressure = np.einsum("ik,ik->i", psi_w, n)
        half = n + dt * (n * (base - sens[:, None] * pressure[:, None]) + mig @ n)
        sol, info = lapack.dgttrs(dl, d, du, du2, ipiv, half.T)
        neg = sol < 0.0
        clamped += int(neg.sum())
        sol[sol < FLUSH] = 0.0
        n[...] = sol.T
    return clamped


def _batched_power_np(mats, tol, max_iter):
    B, K, _ = mats.shape
    shift = 1.0 + np.abs(np.diagonal(mats, axis1=1, axis2=2)).max(axis=1)
    shifted = mats + shift[:, None, None] * np.eye(K)
    v = np.full((B, K), 1.0 / K)
    mu_old = np.full(B, np.inf)
    mu = np.zeros(B)
    iters = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    for _ in range(min(max_iter, POWER_PHASE)):
        if not active.any():
            break
        w = np.einsum("bij,bj->bi", shifted[active], v[active])
        m = w.sum(axis=1)
        v[active] = w / m[:, None]
        mu[active] = m
        iters[active] += 1
        done = np.abs(m - mu_old[active]) < tol
        mu_old[active] = m
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    lam = mu - shift
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.einsum("bij,bj->bi", mats, v) / v
    for b in np.flatnonzero(ratios.max(axis=1) - ratios.min(axis=1) > 1e3 * tol):
        vb = v[b].copy()
        lam[b], extra = _noda_refine(mats[b], vb, tol, max_iter - int(iters[b]))
        v[b] = vb
        iters[b] += extra
    resid = np.abs(np.einsum("bij,bj->bi", mats, v) - lam[:, None] * v).max(axis=1)
    return lam, v, iters, resid


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

class ImexOperator:
    """Constant pieces of the IMEX scheme for one (grid, dt, epsilon)."""

    def __init__(self, n_nodes: int, h: float, dt: float, diffusivity: float):
        self.rate = dt * diffusivity / (h * h)
        self.sub, self.diag, self.sup = neumann_system(n_nodes, self.rate)
        self.cprime, self.inv_den = thomas_factor(self.sub, self.diag, self.sup)
        # forward sweep as carry = rhs*inv_den - mk*carry
        self.mk = np.zeros(n_nodes)
        self.mk[1:] = self.sub * self.inv_den[1:]
        self.dt = dt
        self._work = None

    def advance(self, n, base, sens, psi_w, mig, nsteps: int, use_jit: bool | None = None) -> int:
        if use_jit is None:
            use_jit = HAVE_NUMBA
        if use_jit:
            if self._work is None or self._work.shape != n.shape:
                self._work = np.empty_like(n)
            return int(_imex_advance_jit(n, base, sens, psi_w, mig, self.inv_den, self.mk,
                                         self.cprime, self.dt, nsteps, self._work))
        return _imex_advance_np(n, base, sens, psi_w, mig, self.sub, self.diag, self.sup,
                                self.dt, nsteps)

    def solve(self, rhs):
        """Apply ``(I - dt*eps^2*D2)^-1`` to a single vector."""
        out = np.empty_like(rhs)
        return _thomas_solve(self.sub, self.cprime, self.inv_den, np.ascontiguousarray(rhs), out)


def batched_power(mats, tol: float = 1e-13, max_iter: int = 100_000, use_jit: bool | None = None):
    """Perron roots of a stack of Metzler matrices.

    Returns ``(lam, chi, iterations, residual)`` with ``chi`` summing to one.
    """
    mats = np.ascontiguousarray(mats, dtype=float)
    if use_jit is None:
        use_jit = HAVE_NUMBA
    if use_jit:
        B, K, _ = mats.shape
        lam = np.empty(B)
        chi = np.empty((B, K))
        iters = np.empty(B, dtype=np.int64)
        resid = np.empty(B)
        _batched_power_jit(mats, tol, max_iter, lam, chi, iters, resid)
        return lam, chi, iters, resid
    return _batched_power_np(mats, tol, max_iter)
