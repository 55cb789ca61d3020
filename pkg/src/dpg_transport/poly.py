"""Small dense multivariate polynomials in physical coordinates.

A Poly stores monomial coefficients in shifted and scaled variables
z = (x - center) / scale, which keeps evaluation well conditioned on tiny
cells. Polynomials combined by arithmetic must share center and scale.
"""
import numpy as np

from .basis import exponents
from .quadrature import lattice_points


class Poly:
    def __init__(self, coef, dim, center=None, scale=1.0):
        self.dim = dim
        self.center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.coef = {tuple(int(e) for e in k): float(v) for k, v in coef.items() if v != 0.0}

    # -- construction ----------------------------------------------------
    def _like(self, coef):
        return Poly(coef, self.dim, self.center, self.scale)

    @classmethod
    def const(cls, value, dim, center=None, scale=1.0):
        return cls({(0,) * dim: value}, dim, center, scale)

    @classmethod
    def coordinate(cls, i, dim, center=None, scale=1.0):
        """The physical coordinate x_i."""
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        e = [0] * dim
        e[i] = 1
        return cls({(0,) * dim: c[i], tuple(e): scale}, dim, c, scale)

    @classmethod
    def random(cls, dim, degree, rng, center=None, scale=1.0, amplitude=1.0):
        exps = exponents(dim, degree)
        vals = amplitude * rng.standard_normal(len(exps))
        return cls(dict(zip(exps, vals)), dim, center, scale)

    @classmethod
    def fit(cls, func, vertices, degree, center=None, scale=None):
        """Interpolate `func` at the degree-`degree` lattice of a simplex."""
        V = np.asarray(vertices, dtype=float)
        dim = V.shape[1]
        center = V.mean(axis=0) if center is None else center
        if scale is None:
            scale = max(np.linalg.norm(V[i] - V[j]) for i in range(len(V)) for j in range(i + 1, len(V)))
        lat = lattice_points(dim, max(degree, 1)) if degree > 0 else np.full((1, dim), 1.0 / (dim + 1))
        X = V[0] + lat @ (V[1:] - V[0])
        exps = exponents(dim, degree)
        A = _monomials((X - center) / scale, exps)
        c = np.linalg.solve(A, np.asarray(func(X), dtype=float))
        return cls(dict(zip(exps, c)), dim, center, scale)

    # -- evaluation --------------------------------------------------------
    @property
    def degree(self):
        return max((sum(k) for k in self.coef), default=0)

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.coef:
            return np.zeros(len(X))
        exps = list(self.coef)
        A = _monomials((X - self.center) / self.scale, exps)
        return A @ np.array([self.coef[e] for e in exps])

    def deriv(self, i):
        out = {}
        for e, v in self.coef.items():
            if e[i] > 0:
                k = list(e)
                k[i] -= 1
                out[tuple(k)] = out.get(tuple(k), 0.0) + v * e[i] / self.scale
        return self._like(out)

    def grad(self, X):
        return np.column_stack([self.deriv(i)(X) for i in range(self.dim)])

    def directional(self, b):
        """b . grad p for a constant vector b."""
        out = self._like({})
        for i in range(self.dim):
            out = out + float(b[i]) * self.deriv(i)
        return out

    # -- arithmetic -----------------------------------------------------------
    def _check(self, other):
        if other.dim != self.dim or other.scale != self.scale or not np.array_equal(other.center, self.center):
            raise ValueError("polynomials live in different coordinates")

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.const(float(other), self.dim, self.center, self.scale)
        self._check(other)
        out = dict(self.coef)
        for e, v in other.coef.items():
            out[e] = out.get(e, 0.0) + v
        return self._like(out)

    __radd__ = __add__

    def __neg__(self):
        return self._like({e: -v for e, v in self.coef.items()})

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return self._like({e: v * float(other) for e, v in self.coef.items()})
        self._check(other)
        out = {}
        for e1, v1 in self.coef.items():
            for e2, v2 in other.coef.items():
                k = tuple(a + b for a, b in zip(e1, e2))
                out[k] = out.get(k, 0.0) + v1 * v2
        return self._like(out)

    __rmul__ = __mul__


def _monomials(Z, exps):
    E = np.array(exps, dtype=int).reshape(len(exps), -1)
    A = np.ones((len(Z), len(exps)))
    for k in range(Z.shape[1]):
        A *= Z[:, [k]] ** E[None, :, k]
    return A


def dot(bvec, grads):
    """sum_i b_i * g_i for lists of Polys (variable convection)."""
    out = bvec[0] * grads[0]
    for bi, gi in zip(bvec[1:], grads[1:]):
        out = out + bi * gi
    return out
