"""Cell-centred tensor grids in d = 1, 2 with zero-flux (mirror) boundaries."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
import scipy.sparse as sp

from .errors import DomainError


@dataclass(frozen=True, eq=False)
class Grid:
    """N cells per axis on [lo, hi]; nodes sit at cell centres.

    Fields live on `coords` (P, d), flattened in 'ij' order (last axis fastest).
    """

    lo: np.ndarray
    hi: np.ndarray
    N: int
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_spec(cls, spec, points=None):
        lo, hi = spec.domain_bounds()
        return cls(np.asarray(lo, float), np.asarray(hi, float), int(points or spec.grid.points))

    @property
    def d(self):
        return len(self.lo)

    @property
    def h(self):
        return (self.hi - self.lo) / self.N

    @property
    def shape(self):
        return (self.N,) * self.d

    @property
    def size(self):
        return self.N ** self.d

    @cached_property
    def axes(self):
        return tuple(self.lo[k] + (np.arange(self.N) + 0.5) * self.h[k] for k in range(self.d))

    @cached_property
    def coords(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def interior_mask(self, fraction=0.5):
        """Nodes within `fraction` of the half-width of the centre (sup-norm)."""
        half = 0.5 * (self.hi - self.lo)
        return np.all(np.abs(self.coords - self.center) <= fraction * half + 1e-12, axis=-1)

    def contains(self, points, slack=1e-12):
        points = np.atleast_2d(points)
        return np.all((points >= self.lo - slack) & (points <= self.hi + slack), axis=-1)

    # -- finite differences -------------------------------------------------

    def _d1_1d(self, k):
        n, h = self.N, self.h[k]
        off = np.full(n - 1, 0.5 / h)
        D = sp.diags([-off, off], [-1, 1], shape=(n, n), format="lil")
        D[0, 0] = -0.5 / h  # ghost y_{-1} = y_0
        D[n - 1, n - 1] = 0.5 / h
        return D.tocsr()

    def _d2_1d(self, k):
        n, h = self.N, self.h[k]
        main = np.full(n, -2.0 / h ** 2)
        main[0] = main[-1] = -1.0 / h ** 2
        off = np.full(n - 1, 1.0 / h ** 2)
        return sp.diags([off, main, off], [-1, 0, 1], shape=(n, n), format="csr")

    def _embed(self, mats):
        out = mats[0]
        for M in mats[1:]:
            out = sp.kron(out, M, format="csr")
        return out

    def _axis_op(self, k, op):
        eye = sp.identity(self.N, format="csr")
        return self._embed([op if j == k else eye for j in range(self.d)])

    def first_derivative(self, k):
        key = ("D1", k)
        if key not in self._cache:
            self._cache[key] = self._axis_op(k, self._d1_1d(k))
        return self._cache[key]

    def second_derivative(self, k, j=None):
        j = k if j is None else j
        key = ("D2", min(k, j), max(k, j))
        if key not in self._cache:
            if k == j:
                self._cache[key] = self._axis_op(k, self._d2_1d(k))
            else:
                ops = [sp.identity(self.N, format="csr")] * self.d
                ops = list(ops)
                ops[k] = self._d1_1d(k)
                ops[j] = self._d1_1d(j)
                self._cache[key] = self._embed(ops)
        return self._cache[key]

    def gradient(self, y):
        """Central-difference gradient, shape (P, d)."""
        return np.stack([self.first_derivative(k) @ y for k in range(self.d)], axis=-1)

    def generator(self, drift, kappa):
        """Sparse matrix of  g . grad + 1/2 tr(kappa kappa' Hess)  with drift values (P, d)."""
        a = kappa @ kappa.T
        L = sp.csr_matrix((self.size, self.size))
        for k in range(self.d):
            L = L + sp.diags(drift[:, k]) @ self.first_derivative(k)
            L = L + 0.5 * a[k, k] * self.second_derivative(k)
            for j in range(k + 1, self.d):
                if a[k, j] != 0:
                    L = L + a[k, j] * self.second_derivative(k, j)
        return L.tocsr()

    # -- interpolation ------------------------------------------------------

    def locate(self, points, strict=False):
        """Corner indices and multilinear weights for points (Q, d).

        Points beyond the outer cell centres are clamped (zero-flux extension).
        With strict=True, points outside [lo, hi] raise DomainError.
        """
        points = np.asarray(points, dtype=float).reshape(-1, self.d)
        if strict and not np.all(self.contains(points)):
            raise DomainError("evaluation point outside the grid domain (no extrapolation)")
        idx, frac = [], []
        for k in range(self.d):
            x0 = self.axes[k][0]
            s = np.clip((points[:, k] - x0) / self.h[k], 0.0, self.N - 1.0)
            i0 = np.minimum(np.floor(s).astype(np.int64), self.N - 2)
            idx.append(i0)
            frac.append(s - i0)
        corners = []
        for bits in product((0, 1), repeat=self.d):
            flat = np.zeros(len(points), dtype=np.int64)
            w = np.ones(len(points))
            for k, b in enumerate(bits):
                flat = flat * self.N + idx[k] + b
                w = w * (frac[k] if b else 1.0 - frac[k])
            corners.append((flat, w))
        return corners

    @staticmethod
    def apply(loc, values):
        values = np.asarray(values)
        out = None
        for flat, w in loc:
            term = values[flat] * (w if values.ndim == 1 else w[:, None])
            out = term if out is None else out + term
        return out

    def interp(self, values, points, strict=False):
        return self.apply(self.locate(points, strict=strict), values)
