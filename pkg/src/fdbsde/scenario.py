"""Scenario description, loading, validation and closed-form constants.

A scenario file is JSON with regime-indexed arrays (index 0..m). Coefficient
functions come from a small menu of parameterised families, each of which
knows its own sup-norm and Lipschitz constant.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, SemanticError
from .defaults import DefaultDensity

FAMILIES = ("constant", "affine", "ou", "tanh", "table")
VALIDATION_SAMPLES = 4096
VALIDATION_SEED = 20240611


def _norm(x, axis_count):
    """Euclidean/Frobenius norm over the trailing `axis_count` axes."""
    x = np.asarray(x, dtype=float)
    if axis_count == 0:
        return np.abs(x)
    axes = tuple(range(x.ndim - axis_count, x.ndim))
    return np.sqrt(np.sum(x * x, axis=axes))


@dataclass(frozen=True, eq=False)
class Coefficient:
    """phi -> value with fixed output shape.

    kinds:
      constant: value
      affine:   c + A (phi - b)
      ou:       c - A (phi - b)      (drift form)
      tanh:     c + s * tanh(a . (phi - b))
      table:    linear interpolation in phi[axis] through (knots, values),
                held constant outside the knots
    """

    kind: str
    shape: tuple
    d: int
    params: dict = field(default_factory=dict)

    def __call__(self, phi):
        phi = np.asarray(phi, dtype=float)
        lead = phi.shape[:-1]
        p = self.params
        if self.kind == "constant":
            return np.broadcast_to(p["value"], lead + self.shape).copy()
        if self.kind in ("affine", "ou"):
            A = p["A"].reshape(-1, self.d)
            out = (phi - p["b"]) @ A.T
            if self.kind == "ou":
                out = -out
            return p["c"] + out.reshape(lead + self.shape)
        if self.kind == "tanh":
            t = np.tanh((phi - p["b"]) @ p["a"])
            return p["c"] + t[..., None].reshape(lead + (1,) * len(self.shape)) * p["s"]
        if self.kind == "table":
            x = phi[..., p["axis"]]
            vals = p["values"].reshape(len(p["knots"]), -1)
            cols = [np.interp(x, p["knots"], vals[:, j]) for j in range(vals.shape[1])]
            return np.stack(cols, axis=-1).reshape(lead + self.shape)
        raise SemanticError(f"unknown coefficient kind {self.kind!r}")

    def sup_norm(self):
        p = self.params
        k = len(self.shape)
        if self.kind == "constant":
            return float(_norm(p["value"], k))
        if self.kind in ("affine", "ou"):
            if np.any(p["A"] != 0):
                return math.inf
            return float(_norm(p["c"], k))
        if self.kind == "tanh":
            if not np.any(p["a"] != 0):
                return float(_norm(p["c"], k))
            return float(max(_norm(p["c"] + p["s"], k), _norm(p["c"] - p["s"], k)))
        return float(np.max(_norm(p["values"], k)))

    def lipschitz(self):
        p = self.params
        if self.kind == "constant":
            return 0.0
        if self.kind in ("affine", "ou"):
            return float(np.linalg.norm(p["A"].reshape(-1, self.d), 2))
        if self.kind == "tanh":
            return float(_norm(p["s"], len(self.shape)) * np.linalg.norm(p["a"]))
        vals = p["values"].reshape(len(p["knots"]), -1)
        if len(p["knots"]) < 2:
            return 0.0
        slopes = np.linalg.norm(np.diff(vals, axis=0), axis=1) / np.diff(p["knots"])
        return float(np.max(slopes))

    def to_json(self):
        out = {"kind": self.kind}
        for key, val in self.params.items():
            out[key] = val.tolist() if isinstance(val, np.ndarray) else val
        return out


def _array(raw, shape, where):
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: not numeric ({exc})") from None
    if arr.size != int(np.prod(shape, dtype=int)):
        raise SchemaError(f"{where}: expected {int(np.prod(shape, dtype=int))} numbers for shape {shape}, got {arr.size}")
    arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise SemanticError(f"{where}: non-finite entries")
    return arr


def parse_coefficient(raw, shape, d, where):
    """Build a Coefficient from its JSON form. A bare number/list means constant."""
    shape = tuple(shape)
    if not isinstance(raw, dict):
        raw = {"kind": "constant", "value": raw}
    kind = raw.get("kind")
    if kind not in FAMILIES:
        raise SchemaError(f"{where}.kind: expected one of {FAMILIES}, got {kind!r}")
    p = {}
    if kind == "constant":
        p["value"] = _array(_need(raw, "value", where), shape, where + ".value")
    elif kind in ("affine", "ou"):
        p["c"] = _array(raw.get("c", np.zeros(shape)), shape, where + ".c")
        p["A"] = _array(_need(raw, "A", where), shape + (d,), where + ".A")
        p["b"] = _array(raw.get("b", np.zeros(d)), (d,), where + ".b")
    elif kind == "tanh":
        p["c"] = _array(raw.get("c", np.zeros(shape)), shape, where + ".c")
        p["s"] = _array(_need(raw, "s", where), shape, where + ".s")
        p["a"] = _array(raw.get("a", np.ones(d)), (d,), where + ".a")
        p["b"] = _array(raw.get("b", np.zeros(d)), (d,), where + ".b")
    else:
        axis = raw.get("axis", 0)
        if not isinstance(axis, int) or not 0 <= axis < d:
            raise SchemaError(f"{where}.axis: must be an integer in [0, {d})")
        knots = np.asarray(_need(raw, "knots", where), dtype=float).ravel()
        if knots.size < 1 or np.any(np.diff(knots) <= 0):
            raise SemanticError(f"{where}.knots: must be strictly increasing and non-empty")
        p["axis"] = axis
        p["knots"] = knots
        p["values"] = _array(_need(raw, "values", where), (knots.size,) + shape, where + ".values")
    return Coefficient(kind=kind, shape=shape, d=d, params=p)


def _need(raw, key, where):
    if key not in raw:
        raise SchemaError(f"{where}: missing field {key!r}")
    return raw[key]


def _real(x, where):
    if isinstance(x, str) and x.strip().lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {x!r}")
    return float(x)


@dataclass(frozen=True)
class Constraint:
    kind: str  # "box" or "ball"
    c: float

    @property
    def bounded(self):
        return math.isfinite(self.c)


@dataclass(frozen=True)
class GridSpec:
    half_width: float
    points: int
    boundary: str = "neumann"
    center: tuple = ()


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    name: str
    m: int
    d: int
    gamma: float
    rho: float
    drifts: tuple
    C_g: float
    kappa: np.ndarray
    jumps: tuple
    alpha: tuple
    sigma: tuple
    beta: tuple  # beta[n][k] is a Coefficient of shape (m,) for mark k
    mark_labels: tuple
    mark_weights: tuple  # m arrays of length K (loss measure lambda_{n+1})
    default_density: DefaultDensity
    constraints: tuple
    grid: GridSpec
    reference_points: np.ndarray
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def K(self):
        return len(self.mark_labels)

    def mark_mass(self, n):
        return float(np.sum(self.mark_weights[n]))

    def with_overrides(self, **kw):
        """Copy with top-level numbers (gamma, rho, C_g) or grid fields replaced."""
        raw = copy.deepcopy(self.raw)
        for key, val in kw.items():
            if key in ("half_width", "points", "center"):
                raw["grid"][key] = val
            else:
                raw[key] = val
        return scenario_from_dict(raw)

    def digest(self):
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def domain_bounds(self):
        c = np.asarray(self.grid.center, dtype=float) if len(self.grid.center) else np.zeros(self.d)
        R = self.grid.half_width
        return c - R, c + R


def _regime_list(raw, key, length, where=None):
    where = where or key
    val = _need(raw, key, "scenario")
    if not isinstance(val, list):
        raise SchemaError(f"{where}: expected a list of {length} entries")
    if len(val) != length:
        raise SchemaError(f"{where}: arity mismatch, expected {length} entries (regimes), got {len(val)}")
    return val


def scenario_from_dict(raw):
    """Validate a parsed JSON dict and build a ScenarioSpec."""
    if not isinstance(raw, dict):
        raise SchemaError("scenario: top level must be a JSON object")
    raw = copy.deepcopy(raw)
    m = _need(raw, "m", "scenario")
    d = _need(raw, "d", "scenario")
    if not isinstance(m, int) or isinstance(m, bool) or m < 1:
        raise SemanticError(f"m: must be an integer >= 1, got {m!r}")
    if d not in (1, 2) or isinstance(d, bool):
        raise SemanticError(f"d: must be 1 or 2, got {d!r}")
    gamma = _real(_need(raw, "gamma", "scenario"), "gamma")
    rho = _real(_need(raw, "rho", "scenario"), "rho")
    C_g = _real(_need(raw, "C_g", "scenario"), "C_g")
    for key, val in (("gamma", gamma), ("rho", rho), ("C_g", C_g)):
        if not (val > 0 and math.isfinite(val)):
            raise SemanticError(f"{key}: must be positive and finite, got {val}")

    drifts = tuple(parse_coefficient(r, (d,), d, f"factor_drifts[{i}]")
                   for i, r in enumerate(_regime_list(raw, "factor_drifts", m + 1)))
    jumps = tuple(parse_coefficient(r, (d,), d, f"jump_maps[{i}]")
                  for i, r in enumerate(_regime_list(raw, "jump_maps", m)))

    marks = _need(raw, "marks", "scenario")
    labels = tuple(str(x) for x in _need(marks, "labels", "marks"))
    K = len(labels)
    if K < 1:
        raise SemanticError("marks.labels: at least one mark is required")
    wraw = _need(marks, "weights", "marks")
    if not isinstance(wraw, list) or len(wraw) != m:
        raise SchemaError(f"marks.weights: arity mismatch, expected {m} entries (one loss measure per default)")
    weights = []
    for n, w in enumerate(wraw):
        if not isinstance(w, list) or any(isinstance(x, (list, dict)) for x in w):
            raise SemanticError(
                f"marks.weights[{n}]: loss measures must be flat weight lists; "
                "kernels depending on past marks are not supported (Markovian representation)")
        if len(w) != K:
            raise SchemaError(f"marks.weights[{n}]: expected {K} weights, got {len(w)}")
        w = np.array([_real(x, f"marks.weights[{n}]") for x in w])
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise SemanticError(f"marks.weights[{n}]: weights must be finite and >= 0, got {w.tolist()}")
        weights.append(w)

    market = _regime_list(raw, "market", m + 1)
    alpha, sigma, beta = [], [], []
    for n, reg in enumerate(market):
        where = f"market[{n}]"
        if not isinstance(reg, dict):
            raise SchemaError(f"{where}: expected an object")
        alpha.append(parse_coefficient(_need(reg, "alpha", where), (d,), d, where + ".alpha"))
        sigma.append(parse_coefficient(_need(reg, "sigma", where), (m, d), d, where + ".sigma"))
        braw = reg.get("beta", 0.0 if m == 1 else [0.0] * m)
        if isinstance(braw, list) and len(braw) == K and K > 1 and all(isinstance(b, (dict, list)) for b in braw):
            per_mark = braw
        elif isinstance(braw, dict) and braw.get("per_mark") is not None:
            per_mark = braw["per_mark"]
            if len(per_mark) != K:
                raise SchemaError(f"{where}.beta.per_mark: expected {K} entries")
        else:
            per_mark = [braw] * K
        beta.append(tuple(parse_coefficient(b, (m,), d, f"{where}.beta[{k}]") for k, b in enumerate(per_mark)))

    cons = []
    for n, c in enumerate(_regime_list(raw, "constraints", m + 1)):
        kind = c.get("kind", "box") if isinstance(c, dict) else None
        if kind not in ("box", "ball"):
            raise SchemaError(f"constraints[{n}].kind: expected 'box' or 'ball'")
        cval = _real(_need(c, "c", f"constraints[{n}]"), f"constraints[{n}].c")
        if not cval > 0:
            raise SemanticError(f"constraints[{n}].c: must be > 0 (0 must lie inside Pi_n)")
        cons.append(Constraint(kind, cval))

    graw = _need(raw, "grid", "scenario")
    R = _real(_need(graw, "half_width", "grid"), "grid.half_width")
    N = _need(graw, "points", "grid")
    if not R > 0:
        raise SemanticError("grid.half_width: must be > 0")
    if not isinstance(N, int) or N < 4:
        raise SemanticError("grid.points: must be an integer >= 4")
    boundary = graw.get("boundary", "neumann")
    if boundary != "neumann":
        raise SemanticError(f"grid.boundary: only 'neumann' is supported, got {boundary!r}")
    center = tuple(float(x) for x in np.asarray(graw.get("center", [0.0] * d), dtype=float).reshape(d))
    grid = GridSpec(R, N, boundary, center)

    refs = np.asarray(raw.get("reference_points", [[0.0] * d] * (m + 1)), dtype=float)
    if refs.shape != (m + 1, d):
        raise SchemaError(f"reference_points: expected shape ({m + 1}, {d}), got {refs.shape}")

    kraw = raw.get("kappa")
    if kraw is None:
        kappa = np.eye(d) / math.sqrt(d)
    else:
        kappa = _array(kraw, (d, d), "kappa")
        nrm = np.linalg.norm(kappa)
        if nrm == 0:
            raise SemanticError("kappa: zero matrix")
        kappa = kappa / nrm

    draw = _need(raw, "default_density", "scenario")
    try:
        dd = DefaultDensity.from_dict(draw, m, weights)
    except (ValueError, TypeError) as exc:
        raise SemanticError(f"default_density: {exc}") from None

    spec = ScenarioSpec(
        name=str(raw.get("name", "scenario")), m=m, d=d, gamma=gamma, rho=rho,
        drifts=drifts, C_g=C_g, kappa=kappa, jumps=jumps, alpha=tuple(alpha),
        sigma=tuple(sigma), beta=tuple(beta), mark_labels=labels,
        mark_weights=tuple(weights), default_density=dd, constraints=tuple(cons),
        grid=grid, reference_points=refs, raw=raw)
    validate(spec)
    return spec


def load_scenario(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(raw)


def builtin_scenario(name):
    """Load one of the bundled scenarios ("flat", "curved", "flat2")."""
    ref = resources.files("fdbsde") / "data" / f"{name}.json"
    if not ref.is_file():
        raise ParseError(f"no bundled scenario named {name!r}")
    return scenario_from_dict(json.loads(ref.read_text()))


def validation_sample(spec, count=VALIDATION_SAMPLES, seed=VALIDATION_SEED):
    lo, hi = spec.domain_bounds()
    rng = np.random.default_rng(seed)
    pts = lo + (hi - lo) * rng.random((count, spec.d))
    return np.vstack([pts, lo, hi, 0.5 * (lo + hi)])


def sigma_min(spec, phis=None):
    """Smallest singular value of sigma^n(phi)' over a sample and all regimes."""
    phis = validation_sample(spec) if phis is None else phis
    worst = math.inf
    for s in spec.sigma:
        mats = s(phis)  # (P, m, d)
        sv = np.linalg.svd(mats, compute_uv=False)
        worst = min(worst, float(np.min(sv[:, -1])) if spec.m <= spec.d else 0.0)
    return worst


def validate(spec):
    """Check the invariants that need function evaluation. Raises SemanticError."""
    phis = validation_sample(spec)
    for name, coefs in (("market.alpha", spec.alpha), ("market.sigma", spec.sigma), ("jump_maps", spec.jumps)):
        for n, c in enumerate(coefs):
            if not math.isfinite(c.sup_norm()):
                raise SemanticError(f"{name}[{n}]: unbounded coefficient (sup-norm must be finite)")
    for n, per_mark in enumerate(spec.beta):
        for k, b in enumerate(per_mark):
            if not math.isfinite(b.sup_norm()):
                raise SemanticError(f"market[{n}].beta[{k}]: unbounded coefficient")
            if np.any(b(phis) <= -1.0):
                raise SemanticError(f"market[{n}].beta[{k}]: jump sizes must stay > -1")
    if spec.m > spec.d:
        raise SemanticError(f"market.sigma: m={spec.m} assets need m <= d={spec.d} for full row rank")
    smin = sigma_min(spec, phis)
    if not smin > 1e-12:
        raise SemanticError("market.sigma: sigma' is not uniformly injective (sigma_min = 0)")
    _cross_check(spec, phis)


def _cross_check(spec, phis):
    """Sampled values must respect the analytic sup and Lipschitz constants."""
    rng = np.random.default_rng(VALIDATION_SEED + 1)
    i = rng.integers(0, len(phis), size=1024)
    j = rng.integers(0, len(phis), size=1024)
    dist = np.linalg.norm(phis[i] - phis[j], axis=-1)
    ok = dist > 1e-9
    coefs = [("alpha", c) for c in spec.alpha] + [("sigma", c) for c in spec.sigma]
    coefs += [("jump", c) for c in spec.jumps] + [("beta", b) for pm in spec.beta for b in pm]
    for label, c in coefs:
        k = len(c.shape)
        vals = c(phis)
        sup = c.sup_norm()
        if math.isfinite(sup) and np.max(_norm(vals, k)) > sup * (1 + 1e-9) + 1e-12:
            raise SemanticError(f"{label}: sampled value exceeds analytic sup-norm {sup}")
        lip = c.lipschitz()
        ratio = _norm(vals[i] - vals[j], k)[ok] / dist[ok]
        if ratio.size and np.max(ratio) > lip * (1 + 1e-9) + 1e-12:
            raise SemanticError(f"{label}: sampled slope exceeds analytic Lipschitz constant {lip}")


# ---------------------------------------------------------------------------
# constants

@dataclass(frozen=True)
class ConstantsLedger:
    K_Y: float
    C_phi: float
    C_Pi: float
    K_Z: tuple  # n = 0..m
    K_DY: tuple  # n = 1..m stored at index n-1
    K_alpha: float
    C_alpha: float
    K_sigma: float
    C_sigma: float
    K_beta: float
    C_beta: float
    K_varphi: float
    C_varphi: float
    sigma_min: float
    D_g: float
    C_g: float
    cphi_cg: bool
    ergodic_kappa_g: bool
    pi_compact_remove: bool
    pi_compact_margins: tuple
    extra_ergodic_alpha: bool
    extra_ergodic_margin: float
    constraints_bounded: bool

    def K_DeltaY(self, n):
        return self.K_DY[n - 1]

    def to_dict(self):
        def enc(v):
            if isinstance(v, tuple):
                return [enc(x) for x in v]
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else "-inf"
            return v
        return {k: enc(v) for k, v in self.__dict__.items()}


def _mul(a, b):
    """Product with 0 * inf = 0 (a vanishing coefficient kills an unbounded box)."""
    return 0.0 if a == 0 or b == 0 else a * b


def _exp(x):
    return math.inf if x > 700 else math.exp(x)


def _max_over(coefs, fn):
    vals = [fn(c) for c in coefs]
    return max(vals) if vals else 0.0


def sampled_D_g(spec, phis=None):
    phis = validation_sample(spec) if phis is None else phis
    D = 0.0
    for n in range(1, spec.m + 1):
        diff = spec.drifts[n](phis) - spec.drifts[n - 1](phis)
        D = max(D, float(np.max(np.linalg.norm(diff, axis=-1))))
    return D


def pi_hat(spec, n, phis):
    """Unconstrained minimiser of F1 at z = 0: (sigma sigma')^{-1} sigma alpha / gamma."""
    s = spec.sigma[n](phis)
    a = spec.alpha[n](phis)
    rhs = np.einsum("...ij,...j->...i", s, a) / spec.gamma
    return np.linalg.solve(s @ np.swapaxes(s, -1, -2), rhs[..., None])[..., 0]


def in_constraint(con, pi, slack=1e-12):
    if con.kind == "box":
        return np.all(np.abs(pi) <= con.c + slack, axis=-1)
    return np.linalg.norm(pi, axis=-1) <= con.c + slack


def compute_constants(spec):
    """Closed-form bounds and assumption flags. Pure and deterministic."""
    g = spec.gamma
    m = spec.m
    phis = validation_sample(spec)
    K_alpha = _max_over(spec.alpha, Coefficient.sup_norm)
    C_alpha = _max_over(spec.alpha, Coefficient.lipschitz)
    K_sigma = _max_over(spec.sigma, Coefficient.sup_norm)
    C_sigma = _max_over(spec.sigma, Coefficient.lipschitz)
    betas = [b for pm in spec.beta[:m] for b in pm]
    K_beta = _max_over(betas, Coefficient.sup_norm)
    C_beta = _max_over(betas, Coefficient.lipschitz)
    K_varphi = _max_over(spec.jumps, Coefficient.sup_norm)
    C_varphi = _max_over(spec.jumps, Coefficient.lipschitz)
    C_Pi = max(c.c for c in spec.constraints)
    smin = sigma_min(spec, phis)
    D_g = sampled_D_g(spec, phis)

    K_Y = max(1.0, K_alpha ** 2 / 2.0) / g
    lip_part = _mul(C_sigma, C_Pi) + C_alpha / g
    C_phi = max(_mul(g * lip_part, _mul(C_Pi, K_sigma) + K_alpha / g) + C_alpha * K_alpha / g,
                lip_part + C_alpha)
    cphi_cg = bool(spec.C_g > C_phi)

    K_Z = []
    for n in range(m + 1):
        if not cphi_cg:
            K_Z.append(math.inf)
            continue
        geo = sum((1 + C_varphi) ** j for j in range(m - n))
        K_Z.append(C_phi * (1 + C_varphi) ** (m - n) / (spec.C_g - C_phi) + _mul(_mul(C_Pi, C_beta), geo))

    # downward recursion n = m, m-1, ..., 1
    K_DY = [math.inf] * m
    cpkb = _mul(C_Pi, K_beta)
    bracket = 2 * K_varphi + 0.5 * math.sqrt(math.pi) * _exp(cpkb / 2) * math.sqrt(D_g ** 2 / spec.C_g + 4)
    if cphi_cg and math.isfinite(cpkb):
        nxt = None
        for n in range(m, 0, -1):
            C_n = 0.5 * g * K_Z[n] ** 2
            if nxt is not None:
                C_n += _exp(g * nxt) / g
            val = g * _exp(cpkb) * C_n - 1 + _mul(K_Z[n], bracket)
            K_DY[n - 1] = val
            nxt = val

    margins = []
    for n in range(m + 1):
        need = 2 * spec.alpha[n].sup_norm() / g + 2 * K_Z[n]
        if n != m:
            need += math.sqrt(2) / g * _exp(0.5 * g * K_DY[n])
        margins.append(smin * C_Pi - need)
    pi_ok = bool(0 < C_Pi < spec.C_g and cphi_cg and all(mg >= 0 for mg in margins))

    ok_alpha, alpha_margin = _extra_ergodic(spec, K_Z, phis)

    return ConstantsLedger(
        K_Y=K_Y, C_phi=C_phi, C_Pi=C_Pi, K_Z=tuple(K_Z), K_DY=tuple(K_DY),
        K_alpha=K_alpha, C_alpha=C_alpha, K_sigma=K_sigma, C_sigma=C_sigma,
        K_beta=K_beta, C_beta=C_beta, K_varphi=K_varphi, C_varphi=C_varphi,
        sigma_min=smin, D_g=D_g, C_g=spec.C_g, cphi_cg=cphi_cg,
        ergodic_kappa_g=bool(math.isfinite(D_g)), pi_compact_remove=pi_ok,
        pi_compact_margins=tuple(margins), extra_ergodic_alpha=ok_alpha,
        extra_ergodic_margin=alpha_margin,
        constraints_bounded=all(c.bounded for c in spec.constraints))


def _extra_ergodic(spec, K_Z, phis):
    """Membership of pi-hat and the risk-premium monotonicity inequality, sampled."""
    g = spec.gamma
    sub = phis[:512]
    worst = math.inf
    for n in range(spec.m):
        if not np.all(in_constraint(spec.constraints[n], pi_hat(spec, n, sub))):
            return False, -math.inf
        if not (math.isfinite(K_Z[n]) and math.isfinite(K_Z[n + 1])):
            return False, -math.inf
        a1 = spec.alpha[n](sub)[:, None, :]
        a2 = spec.alpha[n + 1](sub)[None, :, :]
        lhs = np.sum(a1 ** 2, axis=-1) / (2 * g)
        n2 = np.linalg.norm(a2, axis=-1)
        rhs = (n2 ** 2 / (2 * g) + g * K_Z[n] ** 2 / 2 + np.linalg.norm(a1 - a2, axis=-1) * K_Z[n]
               + (K_Z[n] + K_Z[n + 1]) * n2)
        worst = min(worst, float(np.min(lhs - rhs)))
    return bool(worst >= 0), worst


@dataclass
class DissipativityReport:
    worst_ratio: tuple  # per regime
    margin: tuple  # worst + C_g, must be <= tol
    passed: bool
    D_g: float
    sample_count: int

    def to_dict(self):
        return dict(self.__dict__)


def check_dissipativity(spec, sample_count=2000, rng_seed=0, tol=1e-9):
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    lo, hi = spec.domain_bounds()
    rng = np.random.default_rng(rng_seed)
    p1 = lo + (hi - lo) * rng.random((sample_count, spec.d))
    p2 = lo + (hi - lo) * rng.random((sample_count, spec.d))
    diff = p1 - p2
    dist2 = np.sum(diff * diff, axis=-1)
    keep = dist2 > 1e-18
    worst, margin = [], []
    for g in spec.drifts:
        r = np.sum((g(p1) - g(p2)) * diff, axis=-1)[keep] / dist2[keep]
        w = float(np.max(r))
        worst.append(w)
        margin.append(w + spec.C_g)
    D_g = 0.0
    for n in range(1, spec.m + 1):
        dg = spec.drifts[n](p1) - spec.drifts[n - 1](p1)
        D_g = max(D_g, float(np.max(np.linalg.norm(dg, axis=-1))))
    passed = all(mg <= tol * max(1.0, spec.C_g) for mg in margin)
    return DissipativityReport(tuple(worst), tuple(margin), passed, D_g, sample_count)
