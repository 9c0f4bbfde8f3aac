"""Monte Carlo verification: wealth and V-process simulation, (super)martingale
tests, the density decomposition identity and the long-run growth rate.

Two simulators live here.

* simulate_regime: F-level paths of one regime n from a deterministic start,
  with the regime-n dynamics continued past the next default. This is what the
  indexed process V^{pi,n} needs; the next-default hazard enters through the
  integral term over hypothetical default times and marks.
* simulate_bundle: G-level paths with sampled default times and marks, exact
  sub-stepping at default times (Brownian bridge split) and pathwise jump
  records for factor, wealth and prices.

Randomness is per path (counter-based Philox streams), so every number is
independent of chunk size and thread count.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .defaults import defaults_from_uniforms, forward_scale, survival_density, tail_probability
from .driver import project
from .errors import DomainError, FdbsdeError, NumericalError
from .factor import path_generator
from .scenario import in_constraint

BLOCK = 256  # time steps drawn per generator call
EXCLUSION_LIMIT = 1e-3


class StatisticsError(FdbsdeError, ValueError):
    """A Monte Carlo statistic is degenerate (e.g. zero standard error)."""


# ---------------------------------------------------------------------------
# solved fields as lookup tables

@dataclass(eq=False)
class FieldTables:
    """Grid tables read by the simulators: y^n (absolute), pi^n, and the discounting."""

    spec: object
    grid: object
    y: list
    pi: list
    rho: float
    varrho: float | None = None  # ergodic tables discount at the constant rate varrho

    @classmethod
    def from_solution(cls, sol):
        from .solver import BsdeSolution, ErgodicSolution

        if isinstance(sol, FieldTables):
            return sol
        if isinstance(sol, BsdeSolution):
            return cls(sol.spec, sol.grid, sol.y, sol.pi, sol.rho)
        if isinstance(sol, ErgodicSolution):
            return cls(sol.spec, sol.grid, sol.ybar, sol.pibar, 0.0, sol.varrho)
        raise TypeError(f"cannot build field tables from {type(sol).__name__}")

    def discount_rate(self, Y):
        """Integrand of the running discount: rho Y, or varrho for ergodic tables."""
        if self.varrho is not None:
            return np.full_like(Y, self.varrho)
        return self.rho * Y


def _tables(spec, solution):
    t = FieldTables.from_solution(solution)
    if t.varrho is None and not math.isclose(t.rho, spec.rho, rel_tol=1e-12):
        raise DomainError(f"solution was computed at rho={t.rho}, scenario has rho={spec.rho}")
    return t


# ---------------------------------------------------------------------------
# strategies

@dataclass(frozen=True)
class Strategy:
    """Named strategy: optimal | zero | constant | scaled | flipped.

    scaled multiplies pi* by `value` and clips to the regime's constraint set;
    flipped changes the sign of pi* on asset index `value`.
    """

    kind: str = "optimal"
    value: object = None

    KINDS = ("optimal", "zero", "constant", "scaled", "flipped")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DomainError(f"unknown strategy kind {self.kind!r}")

    @classmethod
    def parse(cls, text):
        """'optimal', 'zero', 'constant:0.1,0.2', 'scaled:1.5', 'flipped:0'."""
        kind, _, arg = text.partition(":")
        if kind == "constant":
            return cls(kind, tuple(float(v) for v in arg.split(",")))
        if kind == "scaled":
            return cls(kind, float(arg))
        if kind == "flipped":
            return cls(kind, int(arg or 0))
        return cls(kind)

    @property
    def label(self):
        if self.value is None:
            return self.kind
        v = ",".join(map(str, self.value)) if isinstance(self.value, tuple) else str(self.value)
        return f"{self.kind}:{v}"

    @property
    def is_optimal(self):
        return self.kind == "optimal"

    def evaluate(self, spec, tables, n, loc, count):
        m = spec.m
        if self.kind == "zero":
            return np.zeros((count, m))
        if self.kind == "constant":
            c = np.asarray(self.value, dtype=float).reshape(m)
            return np.broadcast_to(c, (count, m)).copy()
        pi = tables.grid.apply(loc, tables.pi[n]).reshape(count, m)
        if self.kind == "scaled":
            return project(spec.constraints[n], self.value * pi)
        if self.kind == "flipped":
            pi = pi.copy()
            pi[:, int(self.value)] *= -1.0
        return pi


def _as_strategy(strategy):
    if isinstance(strategy, Strategy):
        return strategy
    return Strategy.parse(str(strategy))


# ---------------------------------------------------------------------------
# chunked execution

def _chunks(paths, chunk):
    return [(i, min(i + chunk, paths)) for i in range(0, paths, chunk)]


def _run_chunks(fn, paths, chunk, threads):
    spans = _chunks(paths, chunk)
    if threads and threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: fn(*s), spans))
    return [fn(*s) for s in spans]


class _NormalStream:
    """Standard normals for paths [a, b) over K steps, drawn BLOCK steps at a time."""

    def __init__(self, seed, a, b, K, d, extra=0):
        self.gens = [path_generator(seed, i) for i in range(a, b)]
        self.K, self.d = K, d
        self.extra = np.stack([g.random(extra) for g in self.gens]) if extra else None
        self.block = None
        self.start = 0

    def step(self, k):
        if self.block is None or k >= self.start + len(self.block[0]):
            size = min(BLOCK, self.K - k)
            self.block = np.stack([g.standard_normal((size, self.d)) for g in self.gens])
            self.start = k
        return self.block[:, k - self.start, :]

    def tail(self, count):
        """Extra normals after the K steps (used for Brownian-bridge splits)."""
        return np.stack([g.standard_normal((count, self.d)) for g in self.gens])


def _grid_steps(horizon, dt):
    if not horizon > 0:
        raise DomainError(f"horizon must be > 0, got {horizon}")
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    K = max(1, int(round(horizon / dt)))
    return K, horizon / K


def _record_index(record_times, K, h):
    idx = {}
    for j, t in enumerate(record_times):
        k = int(round(t / h))
        if k < 0 or k > K or abs(k * h - t) > 1e-9 * max(1.0, t):
            raise DomainError(f"record time {t} is not on the time grid (step {h})")
        idx[k] = j
    return idx


# ---------------------------------------------------------------------------
# F-level regime simulation

@dataclass(eq=False)
class RegimeBundle:
    """F-level paths of regime n started at (t0, phi0, x0).

    Arrays are (paths, R) at the record times (offsets from t0). J holds the
    integral term of V over hypothetical next defaults, summed over marks
    (negative, since each Uhat^{n+1} is).
    """

    n: int
    strategy: str
    t0: float
    times: np.ndarray
    phi: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    I: np.ndarray
    J: np.ndarray
    Y0: float
    x0: float
    excluded: np.ndarray
    seed: int
    dt: float
    gamma: float
    pi_max: float

    @property
    def paths(self):
        return len(self.X)

    @property
    def exclusion_fraction(self):
        return float(np.mean(self.excluded))


def _sum_exp(terms):
    """sum_l exp(terms[:, l]) with a max shift; rows of -inf give 0."""
    mx = np.max(terms, axis=1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    return np.exp(safe) * np.sum(np.exp(terms - safe[:, None]), axis=1)


def _jump_log_terms(spec, tables, n, phi, X, pi, I, Y0):
    """log of w_l exp(-gamma(X + pi'beta_l) + gamma(y^{n+1}(phi + varphi) - I - Y0)), shape (P, K)."""
    g = spec.gamma
    post = phi + spec.jumps[n](phi)
    y_next = tables.grid.interp(tables.y[n + 1], post)
    with np.errstate(divide="ignore"):
        log_w = np.log(spec.mark_weights[n])
    beta = np.stack([b(phi) for b in spec.beta[n]], axis=1)  # (P, K, m)
    jump = np.einsum("pkj,pj->pk", beta, pi)
    return log_w[None, :] + g * (-(X[:, None] + jump) + (y_next - I - Y0)[:, None])


def simulate_regime(spec, solution, n, strategy="optimal", horizon=1.0, dt=1e-3, paths=10_000, seed=0,
                    record_times=None, phi0=None, x0=0.0, t0=0.0, Y0=None, mark_transform=None,
                    chunk=8192, threads=1):
    """Simulate regime-n F-processes with the regime-n strategy from a fixed start.

    Y0 defaults to y^n(phi0), so that V starts at -exp(-gamma x0). With
    `mark_transform(t, l, values)` the per-mark integrand of J is mapped before
    the time integration (used by the decomposition identity).
    """
    tables = _tables(spec, solution)
    if not 0 <= n <= spec.m:
        raise DomainError(f"regime {n} outside 0..{spec.m}")
    strat = _as_strategy(strategy)
    K, h = _grid_steps(horizon, dt)
    record_times = [horizon] if record_times is None else list(record_times)
    if any(b <= a for a, b in zip(record_times[:-1], record_times[1:])):
        raise DomainError("record times must be increasing")
    rec = _record_index(record_times, K, h)
    grid = tables.grid
    g = spec.gamma
    phi0 = spec.reference_points[n] if phi0 is None else np.asarray(phi0, dtype=float).reshape(spec.d)
    if not grid.contains(phi0[None, :])[0]:
        raise DomainError("start point outside the grid domain")
    loc0 = grid.locate(phi0[None, :])
    y_start = float(grid.apply(loc0, tables.y[n])[0])
    Y0 = y_start if Y0 is None else float(Y0)
    R = len(record_times)
    sq = math.sqrt(h)

    def run(a, b):
        p = b - a
        noise = _NormalStream(seed, a, b, K, spec.d)
        phi = np.repeat(phi0[None, :], p, axis=0)
        X = np.full(p, float(x0))
        I = np.zeros(p)
        J = np.zeros(p)
        out = {k: np.empty((p, R)) for k in ("X", "Y", "I", "J")}
        out_phi = np.empty((p, R, spec.d))
        excluded = np.zeros(p, dtype=bool)
        pi_max = 0.0

        con = spec.constraints[n]

        def fields(phi):
            loc = grid.locate(phi)
            pi = strat.evaluate(spec, tables, n, loc, p)
            if not in_constraint(con, pi, slack=1e-9).all():
                raise DomainError(f"strategy {strat.label} leaves the constraint set of regime {n}")
            return grid.apply(loc, tables.y[n]), pi

        def integrand(phi, X, pi, I, t):
            if n == spec.m:
                return None
            terms = _jump_log_terms(spec, tables, n, phi, X, pi, I, Y0)
            if mark_transform is None:
                return -_sum_exp(terms)
            return sum(mark_transform(t, l, -np.exp(terms[:, l])) for l in range(terms.shape[1]))

        Y, pi = fields(phi)
        G = integrand(phi, X, pi, I, t0)

        def store(j):
            out["X"][:, j], out["Y"][:, j], out["I"][:, j], out["J"][:, j] = X, Y, I, J
            out_phi[:, j] = phi

        if 0 in rec:
            store(rec[0])
        for k in range(K):
            dW = noise.step(k) * sq
            sig = spec.sigma[n](phi)
            alp = spec.alpha[n](phi)
            X = X + np.einsum("pi,pij,pj->p", pi, sig, alp * h + dW)
            phi = phi + spec.drifts[n](phi) * h + dW @ spec.kappa.T
            excluded |= ~grid.contains(phi)
            pi_max = max(pi_max, float(np.max(np.linalg.norm(pi, axis=-1))))
            Y_new, pi = fields(phi)
            I = I + 0.5 * h * (tables.discount_rate(Y) + tables.discount_rate(Y_new))
            Y = Y_new
            if G is not None:
                G_new = integrand(phi, X, pi, I, t0 + (k + 1) * h)
                J = J + 0.5 * h * (G + G_new)
                G = G_new
            if k + 1 in rec:
                store(rec[k + 1])
        return out, out_phi, excluded, pi_max

    parts = _run_chunks(run, paths, chunk, threads)
    cat = {k: np.concatenate([q[0][k] for q in parts]) for k in ("X", "Y", "I", "J")}
    bundle = RegimeBundle(
        n=n, strategy=strat.label, t0=float(t0), times=np.asarray(record_times, dtype=float),
        phi=np.concatenate([q[1] for q in parts]), X=cat["X"], Y=cat["Y"], I=cat["I"], J=cat["J"],
        Y0=Y0, x0=float(x0), excluded=np.concatenate([q[2] for q in parts]), seed=seed, dt=h, gamma=g,
        pi_max=max(q[3] for q in parts))
    if bundle.exclusion_fraction >= EXCLUSION_LIMIT:
        raise DomainError(f"{bundle.exclusion_fraction:.2%} of paths left the grid domain (limit 0.1%)")
    return bundle


def v_process(spec, solution, bundle, n=None, t=None):
    """V^{pi,n} at record time t (offset from the start) for every path of a RegimeBundle.

    V = -exp(-gamma X + gamma (Y - I - Y0)) + J, where J is the integral over
    hypothetical default times of the jumped next-regime functional.
    """
    n = bundle.n if n is None else n
    if n != bundle.n:
        raise DomainError(f"bundle simulates regime {bundle.n}, not {n}")
    t = float(bundle.times[-1]) if t is None else float(t)
    j = np.flatnonzero(np.isclose(bundle.times, t, rtol=0, atol=1e-12))
    if j.size == 0:
        raise DomainError(f"checkpoint {t} was not recorded; record times are {bundle.times.tolist()}")
    j = int(j[0])
    g = bundle.gamma
    head = -np.exp(-g * bundle.X[:, j] + g * (bundle.Y[:, j] - bundle.I[:, j] - bundle.Y0))
    return head + bundle.J[:, j]


# ---------------------------------------------------------------------------
# reports

def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


class _Report:
    def to_dict(self):
        return _plain(asdict(self))

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path


@dataclass
class MartingaleReport(_Report):
    n: int
    strategy: str
    kind: str  # martingale | supermartingale
    checkpoints: list
    means: list
    ses: list
    reference: float
    gaps: list
    verdicts: list
    paths: int
    deterministic: bool = False
    exclusion_fraction: float = 0.0

    @property
    def passed(self):
        return all(self.verdicts)

    def recompute_verdicts(self):
        out = []
        for mean, se in zip(self.means, self.ses):
            gap = mean - self.reference
            tol = 3.0 * se if not self.deterministic else 1e-10 * max(1.0, abs(self.reference))
            out.append(abs(gap) <= tol if self.kind == "martingale" else gap <= tol)
        return out

    def rows(self):
        return [{"checkpoint": t, "mean": mu, "se": se, "reference": self.reference, "gap": gp, "pass": v}
                for t, mu, se, gp, v in zip(self.checkpoints, self.means, self.ses, self.gaps, self.verdicts)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["checkpoint", "mean", "se", "reference", "gap", "pass"])
            w.writeheader()
            for r in self.rows():
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})
        return path


def martingale_test(spec, solution, strategy="optimal", n=0, checkpoints=(0.5, 1.0, 2.0), paths=10_000,
                    seed=0, dt=1e-3, kind=None, deterministic="error", phi0=None, chunk=8192, threads=1):
    """(Super)martingale test of V^{pi,n} from a deterministic start.

    kind defaults to 'martingale' for the optimal strategy and
    'supermartingale' otherwise. A zero standard error raises StatisticsError
    unless deterministic='exact', in which case the comparison is exact up to
    roundoff and the report is flagged deterministic.
    """
    cps = [float(c) for c in checkpoints]
    if not cps or any(b <= a for a, b in zip(cps[:-1], cps[1:])) or cps[0] <= 0:
        raise DomainError("checkpoints must be positive and increasing")
    strat = _as_strategy(strategy)
    kind = kind or ("martingale" if strat.is_optimal else "supermartingale")
    if kind not in ("martingale", "supermartingale"):
        raise DomainError(f"unknown test kind {kind!r}")
    bundle = simulate_regime(spec, solution, n, strat, horizon=cps[-1], dt=dt, paths=paths, seed=seed,
                             record_times=[0.0] + cps, phi0=phi0, chunk=chunk, threads=threads)
    keep = ~bundle.excluded
    ref = float(np.mean(v_process(spec, solution, bundle, n, 0.0)[keep]))
    means, ses = [], []
    for t in cps:
        v = v_process(spec, solution, bundle, n, t)[keep]
        means.append(float(np.mean(v)))
        ses.append(float(np.std(v, ddof=1) / math.sqrt(v.size)))
    # paths that agree up to roundoff count as identical
    flat = [se <= 1e-12 * max(1.0, abs(mu)) for mu, se in zip(means, ses)]
    det = any(flat)
    if det:
        if deterministic != "exact":
            raise StatisticsError("degenerate standard error: all paths give the same value")
        if not all(flat):
            raise StatisticsError("standard error vanishes at some checkpoints only")
    rep = MartingaleReport(n, strat.label, kind, cps, means, ses, ref, [mu - ref for mu in means], [],
                           int(keep.sum()), det, bundle.exclusion_fraction)
    rep.verdicts = rep.recompute_verdicts()
    return rep


# ---------------------------------------------------------------------------
# decomposition identity

@dataclass
class DecompositionReport(_Report):
    n: int
    strategy: str
    direction: str  # equality | inequality
    t: float
    s: float
    theta: list
    marks: list
    lhs: float
    rhs: float
    se: float
    rel_gap: float
    rel_se: float
    passed: bool
    paths: int


def decomposition_identity_test(spec, solution, n, s=1.0, paths=10_000, seed=0, dt=1e-3, theta=None,
                                marks=None, strategy="optimal", phi0=None, chunk=8192, threads=1):
    """Check  M^n_t eta^n_t  =  E[M^n_s eta^n_s + int int M^{n+1} eta^{n+1} dtheta lambda(dl)].

    M^n = U^n(X^n) is recovered from the simulated Uhat^n through the survival
    densities (forward_scale) and multiplied back, so the check exercises the
    density module along with the simulator. t is the regime start theta_n.
    For a non-optimal strategy the inequality direction LHS >= RHS - 3 SE is tested.
    """
    dd = spec.default_density
    theta = [0.25 * (k + 1) for k in range(n)] if theta is None else [float(v) for v in theta]
    marks = [0] * n if marks is None else [int(v) for v in marks]
    if len(theta) != n or len(marks) != n:
        raise DomainError(f"regime {n} needs {n} default times and marks")
    t0 = theta[-1] if n else 0.0
    strat = _as_strategy(strategy)
    if not s > 0:
        raise DomainError("need s > t (positive horizon after the regime start)")

    eta_cache = {}

    def eta_next(t, l):
        key = (round(t, 12), l)
        if key not in eta_cache:
            eta_cache[key] = survival_density(dd, n + 1, t, theta + [t], marks + [l])
        return eta_cache[key]

    def transform(t, l, uhat):
        if spec.mark_weights[n][l] == 0:
            return uhat  # zero-weight mark: the term is identically 0
        e = eta_next(t, l)
        if e == 0.0:
            return uhat  # M^{n+1} is undefined there; the product is Uhat by construction
        M = forward_scale(dd, n + 1, t, theta + [t], marks + [l], 1.0) * uhat  # U^{n+1} = Uhat / eta
        return M * e

    bundle = simulate_regime(spec, solution, n, strat, horizon=s, dt=dt, paths=paths, seed=seed,
                             record_times=[0.0, s], phi0=phi0, t0=t0,
                             mark_transform=transform if n < spec.m else None, chunk=chunk, threads=threads)
    keep = ~bundle.excluded
    g = spec.gamma

    def uhat(j):
        return -np.exp(-g * bundle.X[keep, j] + g * (bundle.Y[keep, j] - bundle.I[keep, j] - bundle.Y0))

    eta_t = survival_density(dd, n, t0, theta, marks)
    eta_s = survival_density(dd, n, t0 + s, theta, marks)
    M_t = forward_scale(dd, n, t0, theta, marks, float(uhat(0)[0]))  # deterministic start
    lhs = float(M_t * eta_t)
    M_s = forward_scale(dd, n, t0 + s, theta, marks, uhat(1))
    terms = M_s * eta_s + bundle.J[keep, 1]
    rhs = float(np.mean(terms))
    se = float(np.std(terms, ddof=1) / math.sqrt(terms.size))
    if se == 0.0:
        raise StatisticsError("degenerate standard error in the decomposition identity")
    rel_gap = (rhs - lhs) / abs(lhs)
    rel_se = se / abs(lhs)
    direction = "equality" if strat.is_optimal else "inequality"
    passed = abs(rel_gap) <= 3 * rel_se if direction == "equality" else rel_gap <= 3 * rel_se
    return DecompositionReport(n, strat.label, direction, t0, t0 + s, theta, marks, lhs, rhs, se, rel_gap,
                               rel_se, bool(passed), int(keep.sum()))


# ---------------------------------------------------------------------------
# G-level bundle

@dataclass(eq=False)
class PathBundle:
    """G-level paths: sampled defaults, factor, wealth and prices at the record times.

    Jump records are (paths, m[, dim]) arrays; entries for defaults after the
    horizon are NaN.
    """

    strategy: str
    seed: int
    dt: float
    horizon: float
    times: np.ndarray
    default_times: np.ndarray
    marks: np.ndarray
    regime: np.ndarray  # (P, R)
    phi: np.ndarray  # (P, R, d)
    X: np.ndarray  # (P, R)
    S: np.ndarray  # (P, R, m)
    Y: np.ndarray | None
    I: np.ndarray | None
    jump_phi_pre: np.ndarray
    jump_phi_post: np.ndarray
    jump_X_pre: np.ndarray
    jump_X_post: np.ndarray
    jump_S_pre: np.ndarray
    jump_S_post: np.ndarray
    jump_pi: np.ndarray
    jump_beta: np.ndarray
    excluded: np.ndarray

    @property
    def paths(self):
        return len(self.X)

    @property
    def exclusion_fraction(self):
        return float(np.mean(self.excluded))

    def wealth_jump_error(self):
        """max |X_post - X_pre - pi'beta| over realised defaults (0 up to roundoff)."""
        d = self.jump_X_post - self.jump_X_pre - np.einsum("pkj,pkj->pk", self.jump_pi, self.jump_beta)
        d = d[np.isfinite(d)]
        return float(np.max(np.abs(d))) if d.size else 0.0

    def price_jump_error(self):
        """max relative |S_post - S_pre (1 + beta)| over realised defaults."""
        d = self.jump_S_post - self.jump_S_pre * (1.0 + self.jump_beta)
        d = d[np.isfinite(d)]
        return float(np.max(np.abs(d))) if d.size else 0.0


def simulate_bundle(spec, solution, strategy="optimal", horizon=1.0, dt=1e-3, paths=10_000, seed=0,
                    record_times=None, phi0=None, x0=0.0, s0=1.0, compute_y=True, chunk=8192, threads=1):
    """Defaultable market paths on [0, horizon] under a named strategy.

    Between grid times the factor and wealth follow Euler steps and prices a
    log-Euler step; a default inside a step splits the Brownian increment with
    a bridge draw, applies the jumps at the exact default time and continues.
    """
    tables = _tables(spec, solution)
    strat = _as_strategy(strategy)
    K, h = _grid_steps(horizon, dt)
    record_times = [i * h for i in range(K + 1)] if record_times is None else [float(t) for t in record_times]
    rec = _record_index(record_times, K, h)
    R = len(record_times)
    m, d = spec.m, spec.d
    grid = tables.grid
    dd = spec.default_density
    phi0 = spec.reference_points[0] if phi0 is None else np.asarray(phi0, dtype=float).reshape(d)
    if compute_y and any(v is None for v in tables.y):
        raise DomainError("field tables are incomplete; use compute_y=False")

    def run(a, b):
        p = b - a
        noise = _NormalStream(seed, a, b, K, d, extra=2 * m)
        times, marks = defaults_from_uniforms(dd, noise.extra[:, :m], noise.extra[:, m:])
        bridge = noise.tail(m) if m else None
        reg = np.zeros(p, dtype=int)
        phi = np.repeat(phi0[None, :], p, axis=0)
        X = np.full(p, float(x0))
        S = np.full((p, m), float(s0))
        I = np.zeros(p)
        Ycur = grid.interp(tables.y[0], phi) if compute_y else None
        excluded = np.zeros(p, dtype=bool)
        jr = {
            "phi_pre": np.full((p, m, d), np.nan), "phi_post": np.full((p, m, d), np.nan),
            "X_pre": np.full((p, m), np.nan), "X_post": np.full((p, m), np.nan),
            "S_pre": np.full((p, m, m), np.nan), "S_post": np.full((p, m, m), np.nan),
            "pi": np.full((p, m, m), np.nan), "beta": np.full((p, m, m), np.nan),
        }
        out = {"reg": np.empty((p, R), dtype=int), "phi": np.empty((p, R, d)), "X": np.empty((p, R)),
               "S": np.empty((p, R, m))}
        if compute_y:
            out["Y"] = np.empty((p, R))
            out["I"] = np.empty((p, R))

        def store(j):
            out["reg"][:, j], out["phi"][:, j], out["X"][:, j], out["S"][:, j] = reg, phi, X, S
            if compute_y:
                out["Y"][:, j], out["I"][:, j] = Ycur, I

        def advance(idx, dur, dW):
            nonlocal X, S, phi, I, Ycur
            for n in np.unique(reg[idx]):
                sel = idx[reg[idx] == n]
                ph = phi[sel]
                loc = grid.locate(ph)
                pi = strat.evaluate(spec, tables, n, loc, len(sel))
                sig = spec.sigma[n](ph)
                alp = spec.alpha[n](ph)
                hh = dur[reg[idx] == n]
                dw = dW[reg[idx] == n]
                mu = np.einsum("pij,pj->pi", sig, alp)
                vol = np.einsum("pij,pj->pi", sig, dw)
                X[sel] = X[sel] + np.sum(pi * (mu * hh[:, None] + vol), axis=-1)
                S[sel] = S[sel] * np.exp((mu - 0.5 * np.sum(sig * sig, -1)) * hh[:, None] + vol)
                new = ph + spec.drifts[n](ph) * hh[:, None] + dw @ spec.kappa.T
                phi[sel] = new
                excluded[sel] |= ~grid.contains(new)
                if compute_y:
                    Ynew = grid.interp(tables.y[n], new)
                    I[sel] = I[sel] + 0.5 * hh * (tables.discount_rate(Ycur[sel]) + tables.discount_rate(Ynew))
                    Ycur[sel] = Ynew

        def jump(idx):
            nonlocal X, S, phi, Ycur
            for n in np.unique(reg[idx]):
                sel = idx[reg[idx] == n]
                ph = phi[sel]
                pi = strat.evaluate(spec, tables, n, grid.locate(ph), len(sel))
                lk = marks[sel, n]
                beta = np.empty((len(sel), m))
                for l in np.unique(lk):
                    rows = lk == l
                    beta[rows] = spec.beta[n][l](ph[rows])
                jr["phi_pre"][sel, n], jr["X_pre"][sel, n], jr["S_pre"][sel, n] = ph, X[sel], S[sel]
                jr["pi"][sel, n], jr["beta"][sel, n] = pi, beta
                X[sel] = X[sel] + np.sum(pi * beta, axis=-1)
                S[sel] = S[sel] * (1.0 + beta)
                phi[sel] = ph + spec.jumps[n](ph)
                jr["phi_post"][sel, n], jr["X_post"][sel, n], jr["S_post"][sel, n] = phi[sel], X[sel], S[sel]
                if compute_y:
                    Ycur[sel] = grid.interp(tables.y[n + 1], phi[sel])
            reg[idx] += 1

        if 0 in rec:
            store(rec[0])
        allp = np.arange(p)
        for k in range(K):
            t_end = (k + 1) * h
            t_cur = np.full(p, k * h)
            rem = noise.step(k) * math.sqrt(h)
            while True:
                nxt = np.where(reg < m, times[allp, np.minimum(reg, m - 1)] if m else np.inf, np.inf)
                hit = np.flatnonzero(nxt <= t_end)
                if hit.size == 0:
                    break
                L = t_end - t_cur[hit]
                sdur = nxt[hit] - t_cur[hit]
                frac = (sdur / L)[:, None]
                xi = bridge[hit, reg[hit]]
                dWa = frac * rem[hit] + np.sqrt(np.maximum(sdur * (L - sdur) / L, 0.0))[:, None] * xi
                advance(hit, sdur, dWa)
                rem[hit] = rem[hit] - dWa
                t_cur[hit] = nxt[hit]
                jump(hit)
            advance(allp, t_end - t_cur, rem)
            if k + 1 in rec:
                store(rec[k + 1])
        return out, times, marks, jr, excluded

    parts = _run_chunks(run, paths, chunk, threads)

    def cat(key, src=0):
        return np.concatenate([q[src][key] for q in parts])

    jr = {k: np.concatenate([q[3][k] for q in parts]) for k in parts[0][3]}
    times = np.concatenate([q[1] for q in parts])
    bundle = PathBundle(
        strategy=strat.label, seed=seed, dt=h, horizon=float(horizon), times=np.asarray(record_times),
        default_times=times, marks=np.concatenate([q[2] for q in parts]), regime=cat("reg"), phi=cat("phi"),
        X=cat("X"), S=cat("S"), Y=cat("Y") if compute_y else None, I=cat("I") if compute_y else None,
        jump_phi_pre=jr["phi_pre"], jump_phi_post=jr["phi_post"], jump_X_pre=jr["X_pre"],
        jump_X_post=jr["X_post"], jump_S_pre=jr["S_pre"], jump_S_post=jr["S_post"], jump_pi=jr["pi"],
        jump_beta=jr["beta"], excluded=np.concatenate([q[4] for q in parts]))
    if bundle.exclusion_fraction >= EXCLUSION_LIMIT:
        raise DomainError(f"{bundle.exclusion_fraction:.2%} of paths left the grid domain (limit 0.1%)")
    return bundle


# ---------------------------------------------------------------------------
# growth rate and default-time frequencies

@dataclass
class GrowthReport(_Report):
    horizons: list
    estimates: list  # (1/(gamma T)) log E[...], NaN where skipped
    ses: list
    counts: list
    skipped: list
    varrho: float | None
    gaps: list
    raw: list = field(default_factory=list)  # (1/T) log E[...] = gamma * estimate


def growth_rate_estimate(spec, solution, horizons=(10.0, 25.0, 50.0), paths=10_000, seed=0, dt=1e-2,
                         phi0=None, min_paths=100, chunk=8192, threads=1):
    """(1/(gamma T)) log E[exp(-gamma (X_T - X_{T_m})) ; T >= T_m] under the optimal strategy.

    The 1/gamma puts the estimate on the scale of the ergodic constant (under
    pi*, E e^{-gamma X_T} grows like e^{gamma varrho T}); `raw` keeps the
    unscaled (1/T) log value. Log-space mean and delta-method SE. Horizons
    with fewer than `min_paths` qualifying paths are skipped with a warning.
    """
    Ts = [float(t) for t in horizons]
    if not Ts or any(b <= a for a, b in zip(Ts[:-1], Ts[1:])) or Ts[0] <= 0:
        raise DomainError("horizon ladder must be positive and increasing")
    tables = _tables(spec, solution)
    K, h = _grid_steps(Ts[-1], dt)
    rec_times = [round(t / h) * h for t in Ts]
    bundle = simulate_bundle(spec, tables, "optimal", Ts[-1], dt, paths, seed, record_times=rec_times,
                             phi0=phi0, compute_y=False, chunk=chunk, threads=threads)
    m = spec.m
    Tm = bundle.default_times[:, m - 1] if m else np.zeros(bundle.paths)
    XTm = bundle.jump_X_post[:, m - 1] if m else np.full(bundle.paths, 0.0)
    varrho = tables.varrho
    g = spec.gamma
    est, ses, counts, skipped, gaps, raw = [], [], [], [], [], []
    for j, T in enumerate(Ts):
        ok = (Tm <= T) & ~bundle.excluded
        counts.append(int(ok.sum()))
        if ok.sum() < min_paths:
            warnings.warn(f"growth rate at T={T}: only {int(ok.sum())} qualifying paths, skipped")
            skipped.append(True)
            est.append(math.nan)
            ses.append(math.nan)
            gaps.append(math.nan)
            raw.append(math.nan)
            continue
        a = -spec.gamma * (bundle.X[ok, j] - XTm[ok])
        lm = logsumexp(a) - math.log(a.size)
        r = np.exp(a - lm)
        se = float(np.std(r, ddof=1) / math.sqrt(a.size)) / (g * T)
        rate = lm / (g * T)
        est.append(rate)
        raw.append(lm / T)
        ses.append(se)
        skipped.append(False)
        gaps.append(rate - varrho if varrho is not None else math.nan)
    return GrowthReport(Ts, est, ses, counts, skipped, varrho, gaps, raw)


@dataclass
class TailReport(_Report):
    times: list
    regimes: list
    frequency: list  # [n][t]
    probability: list
    se: list
    passed: bool


def default_tail_check(spec, times=(0.5, 1.0, 2.0), paths=100_000, seed=0, method="closed"):
    """Empirical P(T_{n+1} > t) against the survival-density integral, within 3 SE."""
    dd = spec.default_density
    gens = _NormalStream(seed, 0, paths, 1, 1, extra=2 * dd.m)
    T, _ = defaults_from_uniforms(dd, gens.extra[:, :dd.m], gens.extra[:, dd.m:])
    freq, prob, ses = [], [], []
    ok = True
    for n in range(dd.m):
        fr, pr, sr = [], [], []
        for t in times:
            p = tail_probability(dd, n, t, method=method)
            f = float(np.mean(T[:, n] > t))
            se = math.sqrt(max(p * (1 - p), 1e-300) / paths)
            ok &= abs(f - p) <= 3 * se
            fr.append(f)
            pr.append(p)
            sr.append(se)
        freq.append(fr)
        prob.append(pr)
        ses.append(sr)
    return TailReport(list(times), list(range(dd.m)), freq, prob, ses, bool(ok))
