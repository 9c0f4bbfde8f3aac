"""Drivers of the regime BSDEs and their constrained minimisation over pi.

For regime n the objective in pi is

    f(pi) = (gamma/2)|sigma'pi - (z + alpha/gamma)|^2 - alpha'z - |alpha|^2/(2 gamma)
            + (1/gamma) sum_l w_l exp(gamma (y_next - y - pi'beta_l))     (n < m)

which is strictly convex. Everything is batched over points: arrays carry a
leading axis P.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, NumericalError

LOG_MAX = 700.0


@dataclass(frozen=True)
class DriverInput:
    n: int
    y: float
    z: np.ndarray
    phi: np.ndarray
    y_next_at_jump: float | None = None

    def check(self, m):
        if not 0 <= self.n <= m:
            raise DomainError(f"regime {self.n} outside 0..{m}")
        if (self.y_next_at_jump is None) != (self.n == m):
            raise DomainError("y_next_at_jump must be given exactly when n < m")


@dataclass(frozen=True)
class ArgminResult:
    pi_star: np.ndarray
    value: float
    iterations: int
    kkt_residual: float


@dataclass
class HamiltonianResult:
    pi: np.ndarray  # (P, m)
    value: np.ndarray  # (P,)
    dHdy: np.ndarray  # (P,)
    dHdz: np.ndarray  # (P, d)
    kkt: np.ndarray  # (P,)
    iterations: int


@dataclass(frozen=True, eq=False)
class RegimeCoefficients:
    """Market coefficients of one regime evaluated on a fixed set of points."""

    n: int
    sigma: np.ndarray  # (P, m, d)
    alpha: np.ndarray  # (P, d)
    beta: np.ndarray | None  # (P, K, m), None at n = m
    log_w: np.ndarray | None  # (K,)
    jump_points: np.ndarray | None  # (P, d), phi + varphi^n(phi)


def regime_coefficients(spec, n, phis):
    phis = np.asarray(phis, dtype=float).reshape(-1, spec.d)
    sigma = spec.sigma[n](phis)
    alpha = spec.alpha[n](phis)
    if n < spec.m:
        beta = np.stack([b(phis) for b in spec.beta[n]], axis=1)
        with np.errstate(divide="ignore"):
            log_w = np.log(spec.mark_weights[n])
        jump = phis + spec.jumps[n](phis)
        return RegimeCoefficients(n, sigma, alpha, beta, log_w, jump)
    return RegimeCoefficients(n, sigma, alpha, None, None, None)


# ---------------------------------------------------------------------------
# pointwise drivers

def f1(spec, n, pi, z, phi):
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    c = regime_coefficients(spec, n, phi)
    pi = np.asarray(pi, dtype=float).reshape(-1, spec.m)
    z = np.asarray(z, dtype=float).reshape(-1, spec.d)
    out = _f1(spec.gamma, c.sigma, c.alpha, pi, z)
    return out[0] if out.size == 1 else out


def _f1(g, sigma, alpha, pi, z):
    r = np.einsum("pij,pi->pj", sigma, pi) - z - alpha / g
    return 0.5 * g * np.sum(r * r, -1) - np.sum(alpha * z, -1) - np.sum(alpha * alpha, -1) / (2 * g)


def _log_f2_terms(g, beta, log_w, delta, pi):
    """log of w_l exp(gamma(delta - pi'beta_l)), shape (P, K)."""
    return log_w[None, :] + g * (delta[:, None] - np.einsum("pkj,pj->pk", beta, pi))


def f2(spec, n, pi, y, phi, y_next_at_jump, weights=None):
    if n >= spec.m:
        raise DomainError("the jump driver exists only for n < m")
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    c = regime_coefficients(spec, n, phi)
    log_w = c.log_w
    if weights is not None:
        with np.errstate(divide="ignore"):
            log_w = np.log(np.asarray(weights, dtype=float))
    pi = np.asarray(pi, dtype=float).reshape(-1, spec.m)
    delta = np.atleast_1d(np.asarray(y_next_at_jump, dtype=float) - np.asarray(y, dtype=float))
    terms = _log_f2_terms(spec.gamma, c.beta, log_w, delta, pi)
    lse = logsumexp(terms, axis=-1)
    if np.any(lse > LOG_MAX):
        raise NumericalError("jump driver exceeds floating-point range (log value %.1f)" % float(np.max(lse)))
    out = np.exp(lse) / spec.gamma
    return out[0] if out.size == 1 else out


# ---------------------------------------------------------------------------
# constrained minimisation

def project(con, pi):
    if con is None or not np.isfinite(con.c):
        return pi
    if con.kind == "box":
        return np.clip(pi, -con.c, con.c)
    nrm = np.linalg.norm(pi, axis=-1, keepdims=True)
    scale = np.where(nrm > con.c, con.c / np.maximum(nrm, 1e-300), 1.0)
    return pi * scale


class _Objective:
    def __init__(self, g, sigma, u, const, beta=None, log_w=None, delta=None):
        self.g, self.sigma, self.u, self.const = g, sigma, u, const
        self.beta, self.log_w, self.delta = beta, log_w, delta
        self.SS = sigma @ np.swapaxes(sigma, -1, -2)

    def subset(self, idx):
        o = _Objective.__new__(_Objective)
        o.g = self.g
        o.sigma, o.u, o.const, o.SS = self.sigma[idx], self.u[idx], self.const[idx], self.SS[idx]
        o.beta = None if self.beta is None else self.beta[idx]
        o.log_w = self.log_w
        o.delta = None if self.delta is None else self.delta[idx]
        return o

    def exp_terms(self, pi):
        if self.beta is None:
            return None
        a = _log_f2_terms(self.g, self.beta, self.log_w, self.delta, pi)
        if np.any(a > LOG_MAX):
            raise NumericalError("jump driver exponent overflow (%.1f)" % float(np.max(a)))
        return np.exp(a)

    def value(self, pi):
        r = np.einsum("pij,pi->pj", self.sigma, pi) - self.u
        v = 0.5 * self.g * np.sum(r * r, -1) + self.const
        e = self.exp_terms(pi)
        if e is not None:
            v = v + e.sum(-1) / self.g
        return v

    def derivatives(self, pi):
        r = np.einsum("pij,pi->pj", self.sigma, pi) - self.u
        v = 0.5 * self.g * np.sum(r * r, -1) + self.const
        grad = self.g * np.einsum("pij,pj->pi", self.sigma, r)
        hess = self.g * self.SS.copy()
        e = self.exp_terms(pi)
        if e is not None:
            v = v + e.sum(-1) / self.g
            grad = grad - np.einsum("pk,pkj->pj", e, self.beta)
            hess = hess + self.g * np.einsum("pk,pki,pkj->pij", e, self.beta, self.beta)
        return v, grad, hess


def _kkt(con, pi, grad):
    return np.max(np.abs(pi - project(con, pi - grad)), axis=-1)


def _solve(H, g):
    return np.linalg.solve(H, g[..., None])[..., 0]


def _projected_newton(obj, con, pi, tol, max_iter):
    """Projected Newton with an active set (boxes) and Armijo backtracking."""
    P, m = pi.shape
    pi = project(con, pi)
    done = np.zeros(P, dtype=bool)
    kkt = np.full(P, np.inf)
    it = 0
    box = con is not None and np.isfinite(con.c) and con.kind == "box"
    for it in range(1, max_iter + 1):
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            it -= 1
            break
        sub = obj.subset(todo)
        p = pi[todo]
        f, g, H = sub.derivatives(p)
        res = _kkt(con, p, g)
        kkt[todo] = res
        conv = res <= tol
        done[todo[conv]] = True
        act = ~conv
        if not np.any(act):
            continue
        idx = todo[act]
        p, f, g, H = p[act], f[act], g[act], H[act]
        if box:
            eps = np.minimum(1e-8, res[act])[:, None]
            active = ((p <= -con.c + eps) & (g > 0)) | ((p >= con.c - eps) & (g < 0))
            Hr = np.where(active[:, :, None] | active[:, None, :], 0.0, H)
            Hr[:, np.arange(m), np.arange(m)] += np.where(active, 1.0, 0.0)
            gr = np.where(active, 0.0, g)
            step = _solve(Hr, gr) + np.where(active, g, 0.0)
        else:
            step = _solve(H, g)
        t = np.ones(len(idx))
        accepted = np.zeros(len(idx), dtype=bool)
        new = p.copy()
        fsub = sub.subset(act)
        for _ in range(40):
            pend = np.flatnonzero(~accepted)
            if pend.size == 0:
                break
            cand = project(con, p[pend] - t[pend, None] * step[pend])
            fc = fsub.subset(pend).value(cand)
            # slack covers roundoff in f once the decrease drops below ~1e-16 |f|
            ok = fc <= f[pend] + 1e-4 * np.sum(g[pend] * (cand - p[pend]), -1) + 1e-12 * (1.0 + np.abs(f[pend]))
            new[pend[ok]] = cand[ok]
            accepted[pend[ok]] = True
            t[pend[~ok]] *= 0.5
        # no acceptable step: fall back to a short projected-gradient move
        rej = np.flatnonzero(~accepted)
        if rej.size:
            L = np.linalg.norm(H[rej], axis=(1, 2))
            new[rej] = project(con, p[rej] - g[rej] / L[:, None])
        pi[idx] = new
    return pi, kkt, done, it


def _sphere_newton(obj, c, pi, tol, max_iter):
    """Newton on the KKT system grad f + mu pi = 0, |pi| = c (ball boundary)."""
    P, m = pi.shape
    pi = pi * (c / np.linalg.norm(pi, axis=-1, keepdims=True))
    _, g, _ = obj.derivatives(pi)
    mu = np.maximum(-np.sum(g * pi, -1) / c ** 2, 0.0)
    it = 0
    for it in range(1, max_iter + 1):
        _, g, H = obj.derivatives(pi)
        F = np.concatenate([g + mu[:, None] * pi, (0.5 * (np.sum(pi * pi, -1) - c ** 2))[:, None]], -1)
        if np.max(np.abs(F)) <= 0.1 * tol:
            break
        J = np.zeros((P, m + 1, m + 1))
        J[:, :m, :m] = H + mu[:, None, None] * np.eye(m)
        J[:, :m, m] = pi
        J[:, m, :m] = pi
        step = np.linalg.solve(J, F[..., None])[..., 0]
        pi = pi - step[:, :m]
        mu = mu - step[:, m]
        pi = pi * (c / np.linalg.norm(pi, axis=-1, keepdims=True))
    return pi, it


def argmin_batch(g, sigma, alpha, z, con, beta=None, log_w=None, delta=None, tol=1e-10, max_iter=200, pi0=None):
    """Minimise the regime objective at every point. Returns (pi, value, kkt, e_terms, iterations)."""
    u = z + alpha / g
    const = -np.sum(alpha * z, -1) - np.sum(alpha * alpha, -1) / (2 * g)
    obj = _Objective(g, sigma, u, const, beta, log_w, delta)
    if pi0 is None:
        pi0 = _solve(obj.SS, np.einsum("pij,pj->pi", sigma, u))
    pi0 = np.array(pi0, dtype=float, copy=True)
    ball = con is not None and con.kind == "ball" and np.isfinite(con.c) and pi0.shape[1] > 1
    if ball:
        pi, kkt, done, it = _projected_newton(obj, None, pi0, tol, max_iter)
        out = np.flatnonzero(np.linalg.norm(pi, axis=-1) > con.c)
        if out.size:
            ps, it2 = _sphere_newton(obj.subset(out), con.c, pi[out], tol, max_iter)
            pi[out] = ps
            it = max(it, it2)
        _, grad, _ = obj.derivatives(pi)
        kkt = _kkt(con, pi, grad)
    else:
        pi, kkt, done, it = _projected_newton(obj, con, pi0, tol, max_iter)
        _, grad, _ = obj.derivatives(pi)
        kkt = _kkt(con, pi, grad)
    bad = kkt > tol
    if np.any(bad):
        raise NumericalError(
            "driver minimisation hit the iteration cap (%d) with KKT residual %.3e" % (max_iter, float(np.max(kkt))),
            history=[float(np.max(kkt))], best=pi, achieved=float(np.max(kkt)))
    value = obj.value(pi)
    e = obj.exp_terms(pi)
    return pi, value, kkt, e, it


def hamiltonian(spec, coeffs, y, z, y_next_at_jump=None, tol=1e-10, max_iter=200, pi0=None):
    """min_pi f at every point of `coeffs` plus envelope derivatives in y and z."""
    n = coeffs.n
    g = spec.gamma
    con = spec.constraints[n]
    delta = None
    if n < spec.m:
        delta = np.asarray(y_next_at_jump, dtype=float) - np.asarray(y, dtype=float)
    pi, value, kkt, e, it = argmin_batch(g, coeffs.sigma, coeffs.alpha, z, con, coeffs.beta, coeffs.log_w,
                                         delta, tol=tol, max_iter=max_iter, pi0=pi0)
    dHdy = -e.sum(-1) if e is not None else np.zeros(len(pi))
    dHdz = g * (z - np.einsum("pij,pi->pj", coeffs.sigma, pi))
    return HamiltonianResult(pi, value, dHdy, dHdz, kkt, it)


def minimize_driver(spec, inp, constraint=None, tol=1e-10, max_iter=200):
    if tol <= 0:
        raise ValueError("tol must be > 0")
    inp.check(spec.m)
    phi = np.asarray(inp.phi, dtype=float).reshape(1, spec.d)
    c = regime_coefficients(spec, inp.n, phi)
    con = spec.constraints[inp.n] if constraint is None else constraint
    z = np.asarray(inp.z, dtype=float).reshape(1, spec.d)
    delta = None
    if inp.n < spec.m:
        delta = np.array([inp.y_next_at_jump - inp.y], dtype=float)
    pi, value, kkt, _, it = argmin_batch(spec.gamma, c.sigma, c.alpha, z, con, c.beta, c.log_w, delta,
                                         tol=tol, max_iter=max_iter)
    return ArgminResult(pi[0], float(value[0]), int(it), float(kkt[0]))


def optimal_strategy(solution, n, phi, tol=1e-10):
    """pi* at factor value phi from solved fields (interpolated)."""
    spec, grid = solution.spec, solution.grid
    phi = np.asarray(phi, dtype=float).reshape(1, spec.d)
    loc = grid.locate(phi, strict=True)
    y = float(grid.apply(loc, solution.y[n])[0])
    z = grid.apply(loc, solution.z[n])[0]
    y_next = None
    if n < spec.m:
        jump = phi + spec.jumps[n](phi)
        y_next = float(grid.interp(solution.y[n + 1], jump)[0])
    res = minimize_driver(spec, DriverInput(n, y, z, phi[0], y_next), tol=tol)
    ledger = getattr(solution, "ledger", None)
    if ledger is not None and ledger.pi_compact_remove:
        if np.linalg.norm(res.pi_star) > ledger.C_Pi + 1e-6:
            raise NumericalError("optimal strategy exceeds the certified bound C_Pi")
    return res.pi_star
