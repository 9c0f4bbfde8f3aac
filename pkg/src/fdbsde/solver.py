"""Stationary solves of the regime chain and the vanishing-discount passage.

Regime n solves   rho y = L y + H(y, kappa' grad y, phi)   on a truncated grid,
with L = g.grad + 1/2 tr(kappa kappa' Hess) and H = min_pi f. The chain is
solved from n = m down to 0 because H for regime n reads y^{n+1} at the
post-default factor value.

Pseudo-time marching: each step solves the linear system

    (1/dtau + rho + c) y_new - L y_new [- B y_new] = y/dtau + H(y) + c y [- B y]

with c = -dH/dy >= 0 and, when newton=True, B = dH/dz . kappa' grad. With
dtau -> inf this is Newton's method on the discrete equations.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .driver import hamiltonian, regime_coefficients
from .errors import AssumptionError, NumericalError
from .grid import Grid
from .scenario import compute_constants

DTAU_MAX = 1e12


@dataclass
class RegimeDiagnostics:
    n: int
    steps: int
    rejected: int
    residual: float
    residual_history: list
    wall_time: float
    offset: float = 0.0  # rho * shift used (solved for in anchored mode)


@dataclass
class BoundCheck:
    name: str
    n: int
    observed: float
    bound: float
    eps: float
    passed: bool | None  # None when skipped

    @property
    def margin(self):
        return self.bound + self.eps - self.observed


@dataclass(eq=False)
class BsdeSolution:
    spec: object
    grid: Grid
    rho: float
    w: list  # per regime, y^n = w^n + shift
    z: list
    pi: list  # optimal strategy on the grid nodes, (P, m)
    shift: float = 0.0
    diagnostics: list = field(default_factory=list)
    ledger: object = None
    bounds: list = field(default_factory=list)

    @property
    def y(self):
        return [w + self.shift for w in self.w]

    @property
    def bounds_passed(self):
        return all(b.passed for b in self.bounds if b.passed is not None)


def _z_operator(grid, kappa):
    """Sparse operators Z_i with z_i = sum_k kappa[k, i] d_k y."""
    ops = []
    for i in range(grid.d):
        op = sp.csr_matrix((grid.size, grid.size))
        for k in range(grid.d):
            if kappa[k, i] != 0:
                op = op + kappa[k, i] * grid.first_derivative(k)
        ops.append(op.tocsr())
    return ops


class _RegimeProblem:
    def __init__(self, spec, n, rho, grid, y_next_jump, offset):
        self.spec, self.n, self.rho, self.grid = spec, n, rho, grid
        self.coeffs = regime_coefficients(spec, n, grid.coords)
        drift = spec.drifts[n](grid.coords)
        self.L = grid.generator(drift, spec.kappa)
        self.Z = _z_operator(grid, spec.kappa)
        self.y_next_jump = y_next_jump  # in the same shifted frame as w
        self.offset = offset  # rho * shift
        self.pi = None

    def z_of(self, w):
        return np.stack([Zi @ w for Zi in self.Z], axis=-1)

    def ham(self, w, z, tol=1e-10):
        res = hamiltonian(self.spec, self.coeffs, w, z, self.y_next_jump, tol=tol, pi0=self.pi)
        self.pi = res.pi
        return res

    def residual(self, w, ham):
        return self.rho * w + self.offset - self.L @ w - ham.value


def _pointwise_root(prob, iters=80):
    """Root of rho w + offset = H(w, z=0) at each node (monotone in w)."""
    P = prob.grid.size
    z0 = np.zeros((P, prob.spec.d))
    w = np.zeros(P)
    if prob.n == prob.spec.m:
        return (prob.ham(w, z0).value - prob.offset) / prob.rho
    lo = np.full(P, -np.inf)
    hi = np.full(P, np.inf)
    w = prob.y_next_jump.copy()
    for _ in range(iters):
        h = prob.ham(w, z0)
        G = prob.rho * w + prob.offset - h.value
        dG = prob.rho - h.dHdy
        lo = np.where(G < 0, np.maximum(lo, w), lo)
        hi = np.where(G > 0, np.minimum(hi, w), hi)
        if np.max(np.abs(G)) < 1e-13 * (1 + np.max(np.abs(w))):
            break
        cand = w - G / dG
        inside = (cand > lo) & (cand < hi)
        mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi), cand)
        w = np.where(inside, cand, mid)
    prob.pi = None
    return w


def solve_regime(spec, n, rho, y_next_field=None, grid=None, y0=None, tol=1e-7, max_steps=2000,
                 newton=False, dtau0=1.0, shift=0.0, anchor=None, relative=False):
    """Stationary solve of regime n. Returns (w, z, pi, diagnostics) with y = w + shift.

    `y_next_field` is the already solved w^{n+1} in the same shifted frame.

    With `anchor` (a point, regime m only) the constant is solved for as well:
    w(anchor) = 0 and rho * shift = diag.offset are unknowns of a bordered
    system. This stays well conditioned as rho -> 0, where the plain system
    has a near-null constant mode.

    With relative=True the stopping test is res < tol * min(1, rho + min c),
    c the reaction coefficient -dH/dy, i.e. a bound on the error in w rather
    than on the residual (whose terms all shrink with rho in weakly coupled
    regimes).
    """
    grid = Grid.from_spec(spec) if grid is None else grid
    if n < spec.m:
        if y_next_field is None:
            raise ValueError("regime n < m needs the solved next-regime field")
        jumps = grid.coords + spec.jumps[n](grid.coords)
        y_next_jump = grid.interp(y_next_field, jumps)
    else:
        y_next_jump = None
    bordered = anchor is not None
    if bordered and n != spec.m:
        raise ValueError("the bordered (anchored) solve applies to regime m only")
    if not bordered and rho <= 0:
        raise ValueError("rho must be > 0 without an anchor")
    prob = _RegimeProblem(spec, n, rho, grid, y_next_jump, rho * shift)
    t0 = time.perf_counter()
    if y0 is not None:
        w = np.array(y0, dtype=float)
    elif rho > 0:
        w = _pointwise_root(prob)
    else:
        w = np.zeros(grid.size)
    if bordered:
        loc = grid.locate(np.asarray(anchor, dtype=float).reshape(1, -1))
        e_row = sp.csr_matrix((np.concatenate([c[1] for c in loc]),
                               (np.zeros(len(loc), dtype=int), np.concatenate([c[0] for c in loc]))),
                              shape=(1, grid.size))
        w_anchor = float(grid.apply(loc, w)[0])
        w = w - w_anchor
        prob.offset = prob.offset + rho * w_anchor
        ones = sp.csr_matrix(np.ones((grid.size, 1)))
    dtau = dtau0
    history = []
    rejected = 0
    best = (math.inf, w)
    z = prob.z_of(w)
    h = prob.ham(w, z)
    res = np.max(np.abs(prob.residual(w, h)))
    history.append(res)
    step = 0

    def target(h):
        if not relative:
            return tol
        return tol * min(1.0, rho + float(np.min(np.maximum(-h.dHdy, 0.0))))

    while res >= target(h):
        if step >= max_steps or dtau < 1e-14:
            why = f"after {max_steps} pseudo-steps" if step >= max_steps else "(pseudo-time step collapsed)"
            raise NumericalError(
                f"regime {n}: no stationary state {why} (residual {res:.3e})",
                history=history, best=best[1], achieved=res)
        step += 1
        c = np.maximum(-h.dHdy, 0.0)
        A = sp.diags(1.0 / dtau + rho + c) - prob.L
        rhs = w / dtau + h.value + c * w
        if newton:
            B = sp.csr_matrix((grid.size, grid.size))
            for i, Zi in enumerate(prob.Z):
                B = B + sp.diags(h.dHdz[:, i]) @ Zi
            A = A - B
            rhs = rhs - B @ w
        if bordered:
            K = sp.bmat([[A, ones], [e_row, None]], format="csc")
            sol_ = spsolve(K, np.append(rhs, 0.0))
            w_new, off_new = sol_[:-1], float(sol_[-1])
        else:
            w_new, off_new = spsolve(A.tocsc(), rhs - prob.offset), prob.offset
        z_new = prob.z_of(w_new)
        pi_keep, off_keep = prob.pi, prob.offset
        prob.offset = off_new
        try:
            h_new = prob.ham(w_new, z_new)
            res_new = np.max(np.abs(prob.residual(w_new, h_new)))
        except NumericalError:
            res_new = math.inf  # overshooting trial step
        if not np.isfinite(res_new) or (res_new > 2.0 * res and dtau > 1e-8):
            rejected += 1
            dtau *= 0.25
            prob.pi, prob.offset = pi_keep, off_keep
            continue
        ratio = res / max(res_new, 1e-300)
        # SER growth; at least doubling on progress so slow (small-rho) modes do not stall
        dtau = min(DTAU_MAX, dtau * (min(10.0, max(2.0, ratio)) if ratio > 1.0 else 0.5))
        w, z, h, res = w_new, z_new, h_new, res_new
        history.append(res)
        if res < best[0]:
            best = (res, w)
    diag = RegimeDiagnostics(n, step, rejected, float(res), history, time.perf_counter() - t0, prob.offset)
    return w, z, h.pi, diag


def solve_chain(spec, rho=None, grid=None, tol=1e-7, newton=False, w_init=None, shift=0.0,
                check_bounds=True, max_steps=2000, anchor=None):
    """Solve all regimes n = m..0 and certify the closed-form bounds.

    With `anchor`, regime m is solved in the anchored frame (see solve_regime)
    and the returned shift is the solved offset / rho.
    """
    rho = spec.rho if rho is None else rho
    grid = Grid.from_spec(spec) if grid is None else grid
    m = spec.m
    w = [None] * (m + 1)
    z = [None] * (m + 1)
    pi = [None] * (m + 1)
    diags = [None] * (m + 1)
    for n in range(m, -1, -1):
        y0 = None if w_init is None else w_init[n]
        w[n], z[n], pi[n], diags[n] = solve_regime(
            spec, n, rho, w[n + 1] if n < m else None, grid, y0=y0, tol=tol, newton=newton,
            shift=shift, max_steps=max_steps, anchor=anchor if n == m else None)
        if n == m and anchor is not None:
            new_shift = diags[m].offset / rho
            if w_init is not None:
                w_init = [None if v is None else v + shift - new_shift for v in w_init]
            shift = new_shift
    sol = BsdeSolution(spec, grid, rho, w, z, pi, shift, diags, compute_constants(spec))
    if check_bounds:
        sol.bounds = certify_bounds(sol)
    return sol


def _lipschitz_observed(grid, y, mask):
    pts = grid.coords[mask]
    vals = y[mask]
    if grid.d == 1:
        order = np.argsort(pts[:, 0])
        return float(np.max(np.abs(np.diff(vals[order])) / np.diff(pts[order, 0])))
    worst = 0.0
    for i0 in range(0, len(pts), 512):
        dp = np.linalg.norm(pts[i0:i0 + 512, None, :] - pts[None, :, :], axis=-1)
        dv = np.abs(vals[i0:i0 + 512, None] - vals[None, :])
        ok = dp > 0
        worst = max(worst, float(np.max(dv[ok] / dp[ok])))
    return worst


def certify_bounds(sol, eps=None, fraction=0.5):
    """Compare solved fields with the ledger bounds on the central sub-domain."""
    spec, grid, L = sol.spec, sol.grid, sol.ledger
    eps = 10.0 * float(np.max(grid.h)) if eps is None else eps
    mask = grid.interior_mask(fraction)
    ys = sol.y
    out = []
    for n in range(spec.m + 1):
        out.append(BoundCheck("y_sup", n, float(np.max(np.abs(ys[n][mask]))), L.K_Y / sol.rho, eps,
                              bool(np.max(np.abs(ys[n][mask])) <= L.K_Y / sol.rho + eps)))
        zmax = float(np.max(np.linalg.norm(sol.z[n][mask], axis=-1)))
        lip = _lipschitz_observed(grid, ys[n], mask)
        if L.cphi_cg:
            out.append(BoundCheck("z_sup", n, zmax, L.K_Z[n], eps, bool(zmax <= L.K_Z[n] + eps)))
            out.append(BoundCheck("y_lipschitz", n, lip, L.K_Z[n], eps, bool(lip <= L.K_Z[n] + eps)))
        else:
            out.append(BoundCheck("z_sup", n, zmax, math.inf, eps, None))
            out.append(BoundCheck("y_lipschitz", n, lip, math.inf, eps, None))
        pimax = float(np.max(np.linalg.norm(sol.pi[n][mask], axis=-1)))
        if L.pi_compact_remove:
            out.append(BoundCheck("pi_sup", n, pimax, L.C_Pi, 1e-6, bool(pimax <= L.C_Pi + 1e-6)))
        else:
            out.append(BoundCheck("pi_sup", n, pimax, L.C_Pi, 1e-6, None))
    for n in range(1, spec.m + 1):
        gap = jump_gap(sol, n)[mask]
        obs = float(np.max(gap))
        if L.cphi_cg and math.isfinite(L.K_DeltaY(n)):
            out.append(BoundCheck("jump_gap", n, obs, L.K_DeltaY(n), eps, bool(obs <= L.K_DeltaY(n) + eps)))
        else:
            out.append(BoundCheck("jump_gap", n, obs, math.inf, eps, None))
    return out


def jump_gap(sol, n):
    """y^n(phi + varphi^{n-1}(phi)) - y^{n-1}(phi) on the grid nodes."""
    spec, grid = sol.spec, sol.grid
    jumps = grid.coords + spec.jumps[n - 1](grid.coords)
    return grid.interp(sol.w[n], jumps) - sol.w[n - 1]


# ---------------------------------------------------------------------------
# vanishing discount

@dataclass(eq=False)
class ErgodicSolution:
    spec: object
    grid: Grid
    varrho: float
    ybar: list
    zbar: list
    pibar: list
    ladder: list
    varrho_trace: list
    drift_trace: list
    lower_bound_trace: list  # per rung, per n < m
    converged: bool
    certified_regimes: tuple
    last: BsdeSolution = None
    notes: list = field(default_factory=list)


def _node_value(grid, field_, point):
    return float(grid.interp(field_, np.asarray(point, dtype=float).reshape(1, -1))[0])


def ergodic_continuation(spec, rho0=None, shrink=0.5, tol_rho=1e-6, max_rungs=40, override=False,
                         grid=None, tol=1e-9, newton=True):
    """Geometric rho-ladder with warm starts; stops when varrho and the normalised fields settle.

    Regime m is solved anchored at its reference point, so rho * y^m(ref) is
    an unknown of the solve and the ladder can go to very small rho. When the
    risk-premium monotonicity check fails (override=True), only regime m is
    certified: fields are normalised by y^m(ref), the drift test uses regime m
    alone, and a breakdown of the lower regimes is recorded in `notes`.
    """
    ledger = compute_constants(spec)
    if not ledger.extra_ergodic_alpha and not override:
        raise AssumptionError("risk-premium monotonicity check failed; pass override=True to certify n=m only")
    if not 0 < shrink < 1:
        raise ValueError("shrink must lie in (0, 1)")
    rho = spec.rho if rho0 is None else rho0
    if not rho > 0:
        raise ValueError("rho0 must be > 0")
    grid = Grid.from_spec(spec) if grid is None else grid
    m = spec.m
    ref = spec.reference_points
    certified = tuple(range(m + 1)) if ledger.extra_ergodic_alpha else (m,)
    ladder, vtrace, dtrace, lbtrace, notes = [], [], [], [], []
    prev_bar = prev_var = None
    w_prev = [None] * (m + 1)
    live = list(range(m + 1))  # regimes still being solved
    shift = 0.0
    converged = False
    fields = None
    for rung in range(max_rungs):
        if rho < 1e-300:
            break
        w = [None] * (m + 1)
        z = [None] * (m + 1)
        pi = [None] * (m + 1)
        diags = [None] * (m + 1)
        w[m], z[m], pi[m], diags[m] = solve_regime(
            spec, m, rho, None, grid, y0=w_prev[m], tol=tol, newton=newton, shift=shift,
            max_steps=500, anchor=ref[m])
        var = diags[m].offset  # rho * y^m(ref), with w^m(ref) = 0
        new_shift = var / rho
        for n in range(m - 1, -1, -1):
            if n not in live:
                break
            y0 = None if w_prev[n] is None else w_prev[n] + shift - new_shift
            try:
                w[n], z[n], pi[n], diags[n] = solve_regime(
                    spec, n, rho, w[n + 1], grid, y0=y0, tol=tol, newton=newton, shift=new_shift,
                    max_steps=500, relative=True)
            except NumericalError as exc:
                if n in certified:
                    raise
                notes.append(f"rho={rho:.3e}: uncertified regimes <= {n} dropped ({exc})")
                live = [k for k in live if k > n]
                break
        shift = new_shift
        solved = [n for n in range(m + 1) if w[n] is not None]
        if len(certified) == m + 1:
            base = _node_value(grid, w[0], ref[0])
        else:
            base = 0.0
        bar = [None if w[n] is None else w[n] - base for n in range(m + 1)]
        lbtrace.append([math.exp(spec.gamma * (_node_value(grid, w[n + 1], ref[n + 1])
                                               - _node_value(grid, w[n], ref[n])))
                        if w[n] is not None else math.nan for n in range(m)])
        ladder.append(rho)
        vtrace.append(var)
        if prev_bar is None:
            drift = math.inf
        else:
            drift = max(float(np.max(np.abs(bar[n] - prev_bar[n]))) for n in certified)
        dtrace.append(drift)
        fields = (bar, z, pi, BsdeSolution(spec, grid, rho, w, z, pi, shift, diags, ledger))
        if prev_var is not None and abs(var - prev_var) < tol_rho and drift < tol_rho:
            converged = True
            break
        prev_bar, prev_var = bar, var
        w_prev = [w[n] if n in solved else None for n in range(m + 1)]
        rho = rho * shrink
    if not converged:
        raise NumericalError(
            f"rho-ladder exhausted after {len(ladder)} rungs without settling; varrho trace {vtrace}",
            history=vtrace, best=prev_bar)
    bar, z, pi, last = fields
    return ErgodicSolution(spec, grid, vtrace[-1], bar, z, pi, ladder, vtrace, dtrace, lbtrace,
                           converged, certified, last, notes)


@dataclass
class ResidualReport:
    fields: list
    sup: list
    mean: list

    @property
    def sup_all(self):
        return max(v for v in self.sup if not math.isnan(v))


def ergodic_residual(spec, erg, fraction=0.5, varrho=None):
    """|varrho - L ybar^n - H^n(ybar)| per regime, summarised on the central sub-domain."""
    grid = erg.grid
    varrho = erg.varrho if varrho is None else varrho
    mask = grid.interior_mask(fraction)
    fields, sups, means = [], [], []
    for n in range(spec.m + 1):
        if erg.ybar[n] is None or (n < spec.m and erg.ybar[n + 1] is None):
            fields.append(None)
            sups.append(math.nan)
            means.append(math.nan)
            continue
        jump = None
        if n < spec.m:
            jumps = grid.coords + spec.jumps[n](grid.coords)
            jump = grid.interp(erg.ybar[n + 1], jumps)
        prob = _RegimeProblem(spec, n, 0.0, grid, jump, 0.0)
        z = prob.z_of(erg.ybar[n])
        h = prob.ham(erg.ybar[n], z)
        r = np.abs(varrho - prob.L @ erg.ybar[n] - h.value)
        fields.append(r)
        sups.append(float(np.max(r[mask])))
        means.append(float(np.mean(r[mask])))
    return ResidualReport(fields, sups, means)


# ---------------------------------------------------------------------------
# grid refinement

@dataclass
class RefinementStudy:
    sizes: tuple
    probes: np.ndarray
    diffs: np.ndarray  # (len(sizes) - 1, m + 1): sup-norm of successive differences
    ratios: np.ndarray  # (len(sizes) - 2, m + 1): diffs[k] / diffs[k + 1]

    @property
    def orders(self):
        return np.log2(self.ratios)


def refinement_study(spec, sizes=(512, 1024, 2048), rho=None, fraction=0.5, probes=401, tol=1e-10,
                     newton=True):
    """Solve the chain on successively refined 1-d grids and compare at common probe points.

    Cell-centred grids are not nested, so each solution is evaluated on the central
    `fraction` of the domain through a cubic spline.
    """
    from scipy.interpolate import CubicSpline

    if spec.d != 1:
        raise ValueError("refinement_study supports d = 1 only")
    rho = spec.rho if rho is None else rho
    sols = [solve_chain(spec, rho, grid=Grid.from_spec(spec, N), tol=tol, newton=newton, check_bounds=False)
            for N in sizes]
    g = sols[0].grid
    half = fraction * (g.hi[0] - g.lo[0]) / 2
    pts = np.linspace(g.center[0] - half, g.center[0] + half, probes)
    vals = [[CubicSpline(s.grid.axes[0], y)(pts) for y in s.y] for s in sols]
    diffs = np.array([[np.max(np.abs(a[n] - b[n])) for n in range(spec.m + 1)]
                      for a, b in zip(vals, vals[1:])])
    return RefinementStudy(tuple(sizes), pts, diffs, diffs[:-1] / diffs[1:])


# ---------------------------------------------------------------------------
# export

def fields_table(sol_or_erg):
    """Header and rows: phi coordinates then y^n, z^n components per regime."""
    grid = sol_or_erg.grid
    d = grid.d
    ys = sol_or_erg.y if isinstance(sol_or_erg, BsdeSolution) else sol_or_erg.ybar
    zs = sol_or_erg.z if isinstance(sol_or_erg, BsdeSolution) else sol_or_erg.zbar
    header = [f"phi{k + 1}" for k in range(d)]
    cols = [grid.coords[:, k] for k in range(d)]
    for n, (y, z) in enumerate(zip(ys, zs)):
        header.append(f"y{n}")
        cols.append(y)
        for k in range(d):
            header.append(f"z{n}_{k + 1}")
            cols.append(z[:, k])
    return header, np.column_stack(cols)


def write_fields_csv(sol_or_erg, path):
    header, table = fields_table(sol_or_erg)
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    return path
