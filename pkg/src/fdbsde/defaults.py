"""Default times and marks: renewal density, survival densities, sampling.

The joint law of (T_1 < ... < T_m, L_1..L_m) has independent exponential
inter-arrival times with rates r_1..r_m and independent marks with laws
q_1..q_m. Densities are taken with respect to d(theta) times the loss
measures lambda_k (weights w_k), so a mark contributes q_k(l)/w_k(l).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import integrate, linalg

from .errors import DomainError, NumericalError

QUAD_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class DefaultDensity:
    family: str
    rates: np.ndarray  # (m,)
    mark_probs: np.ndarray  # (m, K) sampling law of each mark
    weights: np.ndarray  # (m, K) loss measures lambda_k

    @property
    def m(self):
        return len(self.rates)

    @classmethod
    def from_dict(cls, raw, m, weights):
        family = raw.get("family", "poisson-renewal")
        if family != "poisson-renewal":
            raise ValueError(f"unsupported density family {family!r}")
        rates = np.asarray(raw.get("rates"), dtype=float).ravel()
        if rates.size != m:
            raise ValueError(f"rates: expected {m} entries, got {rates.size}")
        if not np.all(rates > 0) or not np.all(np.isfinite(rates)):
            raise ValueError("rates: must be positive and finite")
        weights = np.asarray(weights, dtype=float).reshape(m, -1)
        if raw.get("mark_probs") is not None:
            q = np.asarray(raw["mark_probs"], dtype=float).reshape(m, -1)
        else:
            q = np.empty_like(weights)
            for n, w in enumerate(weights):
                tot = w.sum()
                q[n] = w / tot if tot > 0 else np.full(w.size, 1.0 / w.size)
        if q.shape != weights.shape or np.any(q < 0) or not np.allclose(q.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("mark_probs: each row must be a probability vector over the marks")
        return cls(family, rates, q, weights)

    @classmethod
    def renewal(cls, rates, K=1, weights=None, mark_probs=None):
        m = len(rates)
        w = np.ones((m, K)) / K if weights is None else np.asarray(weights, dtype=float).reshape(m, K)
        raw = {"family": "poisson-renewal", "rates": list(rates)}
        if mark_probs is not None:
            raw["mark_probs"] = mark_probs
        return cls.from_dict(raw, m, w)

    def mark_ratio(self, k, mark):
        """q_k(l) / w_k(l): density of the k-th mark w.r.t. lambda_k (k is 0-based)."""
        q = self.mark_probs[k, mark]
        w = self.weights[k, mark]
        if q == 0:
            return 0.0
        if w == 0:
            raise DomainError(f"mark {mark} of default {k + 1} has sampling mass but zero loss weight")
        return q / w


@dataclass(frozen=True, eq=False)
class DefaultDraw:
    times: np.ndarray  # (m,) or (count, m)
    marks: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times)
        if np.any(t <= 0) or np.any(np.diff(t, axis=-1) <= 0):
            raise DomainError("default times must be positive and strictly increasing")


def _check_ordered(theta):
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size and (theta[0] < 0 or np.any(np.diff(theta) <= 0)):
        raise DomainError(f"default times must be ordered 0 <= theta_1 < theta_2 < ..., got {theta.tolist()}")
    return theta


def _prefix_factor(dd, theta, marks):
    """prod_{k<=n} r_k exp(-r_k (theta_k - theta_{k-1})) * q_k/w_k."""
    val = 1.0
    prev = 0.0
    for k, (th, mk) in enumerate(zip(theta, marks)):
        val *= dd.rates[k] * math.exp(-dd.rates[k] * (th - prev)) * dd.mark_ratio(k, int(mk))
        prev = th
    return val


def density_eta(dd, t, theta, marks):
    """Joint density of (T_(m), L_(m)); t is accepted for interface parity only."""
    if t < 0:
        raise DomainError("t must be >= 0")
    theta = _check_ordered(theta)
    marks = np.asarray(marks, dtype=int).ravel()
    if theta.size != dd.m or marks.size != dd.m:
        raise DomainError(f"expected {dd.m} default times and marks")
    return _prefix_factor(dd, theta, marks)


def survival_density(dd, n, t, theta=(), marks=(), method="closed"):
    """eta-hat^n_t: eta integrated over theta_{n+1} > t and all later defaults.

    With n = m this is eta itself. `method="quadrature"` integrates eta
    numerically (nested adaptive quadrature) instead of using the closed form.
    """
    if not 0 <= n <= dd.m:
        raise DomainError(f"regime n={n} outside 0..{dd.m}")
    if t < 0:
        raise DomainError("t must be >= 0")
    theta = _check_ordered(theta)
    marks = np.asarray(marks, dtype=int).ravel()
    if theta.size != n or marks.size != n:
        raise DomainError(f"regime {n} needs {n} default times and marks")
    if n == dd.m:
        return density_eta(dd, t, theta, marks)
    if method == "closed":
        last = theta[-1] if n else 0.0
        return _prefix_factor(dd, theta, marks) * math.exp(-dd.rates[n] * (max(t, last) - last))
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")
    return _survival_quadrature(dd, n, t, theta, marks)


def _integrate(fn, ranges):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.nquad(fn, ranges, opts={"epsrel": QUAD_RTOL, "epsabs": 1e-15, "limit": 200})
        except integrate.IntegrationWarning as exc:
            raise NumericalError(f"quadrature did not reach rtol {QUAD_RTOL}: {exc}", achieved=None) from None
    return val, err


def _survival_quadrature(dd, n, t, theta, marks):
    rest = dd.m - n
    last = theta[-1] if n else 0.0
    lower = max(t, last)
    total = 0.0
    for tail in product(range(dd.weights.shape[1]), repeat=rest):
        lam = np.prod([dd.weights[n + j, tail[j]] for j in range(rest)])
        if lam == 0:
            continue
        all_marks = np.concatenate([marks, tail]).astype(int)

        def fn(*args, all_marks=all_marks):
            # nquad passes innermost variable first: args = (theta_m, ..., theta_{n+1})
            later = np.asarray(args[::-1])
            return density_eta(dd, t, np.concatenate([theta, later]), all_marks)

        # theta_{n+1} in (lower, inf); theta_{j+1} in (theta_j, inf)
        ranges = []
        for j in range(rest - 1, -1, -1):
            if j == 0:
                ranges.append((lower, math.inf))
            else:
                ranges.append(lambda *outer: (outer[0], math.inf))
        val, _ = _integrate(fn, ranges)
        total += lam * val
    return total


def tail_probability(dd, n, t, method="closed"):
    """P(T_{n+1} > t) for n = 0..m-1.

    closed: survival of the hypoexponential sum via a matrix exponential.
    quadrature: integral of eta-hat^n over ordered theta_(n) and marks.
    """
    if not 0 <= n < dd.m:
        raise DomainError(f"tail probability needs 0 <= n < m, got {n}")
    if method == "closed":
        k = n + 1
        Q = np.zeros((k + 1, k + 1))
        for j in range(k):
            Q[j, j] = -dd.rates[j]
            Q[j, j + 1] = dd.rates[j]
        P = linalg.expm(Q * t)
        return float(1.0 - P[0, k])
    if n == 0:
        return survival_density(dd, 0, t, method="quadrature")
    total = 0.0
    for head in product(range(dd.weights.shape[1]), repeat=n):
        lam = np.prod([dd.weights[j, head[j]] for j in range(n)])
        if lam == 0:
            continue

        def fn(*args, head=head):
            # innermost first: args = (theta_1, ..., theta_n)
            th = np.asarray(args)
            if np.any(np.diff(th) <= 0) or th[0] <= 0:
                return 0.0
            return survival_density(dd, n, t, th, head)

        ranges = [lambda *outer: (0.0, outer[0])] * (n - 1) + [(0.0, math.inf)]
        val, _ = _integrate(fn, ranges)
        total += lam * val
    return total


def defaults_from_uniforms(dd, u, v):
    """Inverse transform: uniforms u, v of shape (count, m) -> ordered times and marks."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    gaps = -np.log1p(-u) / dd.rates  # u in [0, 1)
    times = np.cumsum(gaps, axis=-1)
    marks = np.empty(u.shape, dtype=int)
    for k in range(dd.m):
        cdf = np.cumsum(dd.mark_probs[k])
        marks[..., k] = np.minimum(np.searchsorted(cdf, v[..., k], side="right"), len(cdf) - 1)
    return times, marks


def sample_defaults(dd, rng_seed, count=None):
    """Exact draw of ordered default times and marks.

    rng_seed is an int/SeedSequence or a numpy Generator. With `count`, arrays
    of shape (count, m) are returned in a single DefaultDraw.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    size = 1 if count is None else int(count)
    u = rng.random((size, dd.m))
    v = rng.random((size, dd.m))
    times, marks = defaults_from_uniforms(dd, u, v)
    if count is None:
        return DefaultDraw(times[0], marks[0])
    return DefaultDraw(times, marks)


def scale_by_density(uhat_value, eta_hat):
    if not eta_hat > 0:
        raise DomainError(f"survival density must be positive, got {eta_hat}")
    return uhat_value / eta_hat


def forward_scale(dd, n, t, theta, marks, uhat_value):
    """U^n_t = Uhat^n_t / eta-hat^n_t."""
    return scale_by_density(uhat_value, survival_density(dd, n, t, theta, marks))
