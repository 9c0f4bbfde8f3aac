"""Factor process simulation, jump stitching and ergodicity diagnostics.

Each regime n moves the factor by Euler-Maruyama,

    phi_{k+1} = phi_k + g^n(phi_k) dt + kappa dW_k,

and at the (n+1)-th default the factor jumps to phi + varphi^n(phi).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError


def path_generator(seed, index):
    """Counter-based per-path generator: results do not depend on chunking or threads."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(int(index),))))


def _generator(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(rng_seed)))


def _steps(t0, t1, dt):
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    if not t1 > t0:
        raise DomainError(f"need t1 > t0, got [{t0}, {t1}]")
    K = max(1, int(round((t1 - t0) / dt)))
    return K, (t1 - t0) / K


def euler_step(spec, n, phi, h, dW):
    """One Euler-Maruyama step for a batch phi (P, d) with increments dW (P, d)."""
    return phi + spec.drifts[n](phi) * h + dW @ spec.kappa.T


@dataclass
class FactorSegment:
    n: int
    times: np.ndarray  # (K+1,)
    values: np.ndarray  # (K+1, d)
    dW: np.ndarray  # (K, d) Brownian increments, shared with the asset simulator

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


@dataclass
class FactorPath:
    """Factor path across regimes; segment n+1 starts at the jumped end of segment n."""

    segments: list
    change_times: tuple = ()
    seed: object = None

    @property
    def times(self):
        return np.concatenate([s.times for s in self.segments])

    @property
    def values(self):
        return np.concatenate([s.values for s in self.segments])

    @property
    def regimes(self):
        return np.concatenate([np.full(len(s.times), s.n) for s in self.segments])

    def stitching_errors(self, spec):
        """|first(n+1) - (last(n) + varphi^n(last(n)))| per regime change (exactly 0 when built here)."""
        out = []
        for a, b in zip(self.segments[:-1], self.segments[1:]):
            out.append(float(np.max(np.abs(b.values[0] - apply_jump(spec, a.n, a.values[-1])))))
        return out


def simulate_factor(spec, n, phi0, t0, t1, dt, rng_seed, noise=True):
    """Euler-Maruyama segment of regime n on [t0, t1].

    The step is dt rounded so that an integer number of steps fits. With
    noise=False the increments are forced to zero (deterministic ODE).
    """
    if not 0 <= n <= spec.m:
        raise DomainError(f"regime {n} outside 0..{spec.m}")
    K, h = _steps(t0, t1, dt)
    phi = np.asarray(phi0, dtype=float).reshape(spec.d)
    if noise:
        dW = _generator(rng_seed).standard_normal((K, spec.d)) * math.sqrt(h)
    else:
        dW = np.zeros((K, spec.d))
    vals = np.empty((K + 1, spec.d))
    vals[0] = phi
    for k in range(K):
        vals[k + 1] = euler_step(spec, n, vals[k][None, :], h, dW[k][None, :])[0]
    return FactorSegment(n, t0 + h * np.arange(K + 1), vals, dW)


def apply_jump(spec, n, phi):
    """phi + varphi^n(phi), batched over leading axes."""
    if not 0 <= n < spec.m:
        raise DomainError(f"jump maps exist for 0 <= n < m, got n={n}")
    phi = np.asarray(phi, dtype=float)
    flat = phi.reshape(-1, spec.d)
    return (flat + spec.jumps[n](flat)).reshape(phi.shape)


def simulate_factor_path(spec, draw, phi0, horizon, dt, rng_seed, noise=True):
    """Full path on [0, horizon] across the regimes of a DefaultDraw (one path)."""
    rng = _generator(rng_seed)
    times = [0.0] + [float(t) for t in np.asarray(draw.times).ravel() if t < horizon] + [float(horizon)]
    segs = []
    phi = np.asarray(phi0, dtype=float).reshape(spec.d)
    for n in range(len(times) - 1):
        seg = simulate_factor(spec, n, phi, times[n], times[n + 1], dt, rng, noise=noise)
        segs.append(seg)
        if n + 1 < len(times) - 1:
            phi = apply_jump(spec, n, seg.values[-1])
    return FactorPath(segs, tuple(times[1:-1]), rng_seed)


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class CouplingReport:
    times: np.ndarray
    distance: np.ndarray  # |Phi^1_t - Phi^2_t|
    ratio: np.ndarray  # distance * e^{C_g (t - t0)} / |phi1 - phi2|
    sup_ratio: float
    tolerance: float
    passed: bool


def ergodic_coupling_check(spec, n, phi1, phi2, horizon, dt, seed, C_g=None, slack=None):
    """Two paths with shared noise; the scaled distance must stay below 1 + O(dt)."""
    phi1 = np.asarray(phi1, dtype=float).reshape(spec.d)
    phi2 = np.asarray(phi2, dtype=float).reshape(spec.d)
    d0 = float(np.linalg.norm(phi1 - phi2))
    if d0 == 0.0:
        raise DomainError("coupling check needs phi1 != phi2")
    C_g = spec.C_g if C_g is None else C_g
    K, h = _steps(0.0, horizon, dt)
    dW = _generator(seed).standard_normal((K, spec.d)) * math.sqrt(h)
    pair = np.stack([phi1, phi2])
    dist = np.empty(K + 1)
    dist[0] = d0
    for k in range(K):
        pair = euler_step(spec, n, pair, h, np.repeat(dW[k][None, :], 2, axis=0))
        dist[k + 1] = np.linalg.norm(pair[0] - pair[1])
    t = h * np.arange(K + 1)
    ratio = dist * np.exp(C_g * t) / d0
    if slack is None:
        # Euler contraction per step is sqrt(1 - 2 C h + L^2 h^2) against e^{-C h}
        L = spec.drifts[n].lipschitz()
        slack = h * (1.0 + 0.5 * max(L * L - C_g * C_g, 0.0) * horizon)
    sup = float(np.max(ratio))
    return CouplingReport(t, dist, ratio, sup, 1.0 + slack, bool(sup <= 1.0 + slack))


@dataclass
class MomentReport:
    times: np.ndarray
    upper: np.ndarray  # E e^{c|Phi_t|}
    upper_se: np.ndarray
    lower: np.ndarray  # E e^{-c|Phi_t|}
    lower_se: np.ndarray
    stabilized: bool  # False flags growth of the upper estimate along the ladder

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _log_mean_exp(a):
    """log mean e^a and the delta-method SE of the mean, both relative to e^{log mean}."""
    lm = logsumexp(a) - math.log(len(a))
    r = np.exp(a - lm)
    return lm, float(np.std(r, ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0


def exponential_moment_probe(spec, n, c, t, paths, seed, phi0=None, dt=0.01):
    """Monte Carlo E[e^{+-c|Phi^n_t|}] on a time ladder t (scalar or increasing list).

    Computed in log-space. `stabilized` is False when the upper estimate at the
    last time exceeds the previous one by more than 3 combined SE.
    """
    if c < 0:
        raise DomainError(f"c must be >= 0, got {c}")
    ladder = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ladder <= 0) or np.any(np.diff(ladder) <= 0):
        raise DomainError("time ladder must be positive and increasing")
    phi0 = spec.reference_points[n] if phi0 is None else np.asarray(phi0, dtype=float).reshape(spec.d)
    K, h = _steps(0.0, float(ladder[-1]), dt)
    marks = {int(round(tt / h)): i for i, tt in enumerate(ladder)}
    norms = np.empty((len(ladder), paths))
    rng = _generator(seed)
    phi = np.repeat(phi0[None, :], paths, axis=0)
    for k in range(1, K + 1):
        phi = euler_step(spec, n, phi, h, rng.standard_normal((paths, spec.d)) * math.sqrt(h))
        if k in marks:
            norms[marks[k]] = np.linalg.norm(phi, axis=-1)
    up, up_se, lo, lo_se = [], [], [], []
    for row in norms:
        lm, se = _log_mean_exp(c * row)
        up.append(math.exp(lm))
        up_se.append(se * math.exp(lm))
        lm, se = _log_mean_exp(-c * row)
        lo.append(math.exp(lm))
        lo_se.append(se * math.exp(lm))
    up, up_se = np.array(up), np.array(up_se)
    stable = True
    if len(ladder) > 1:
        stable = bool(up[-1] - up[-2] <= 3.0 * math.hypot(up_se[-1], up_se[-2]))
    return MomentReport(ladder, up, up_se, np.array(lo), np.array(lo_se), stable)
