"""Polynomial bases on the reference simplex.

Orthonormal bases come from centred monomials orthonormalised against an exact
quadrature (two Cholesky passes, which keeps the result orthonormal to
roundoff even when the monomial Gram matrix is poorly conditioned).
Lagrange bases are expressed in the orthonormal basis through a Vandermonde
inverse.
"""
from functools import lru_cache
from itertools import product

import numpy as np

from .quadrature import simplex_rule


def exponents(dim, degree):
    """Monomial exponents of total degree <= degree, graded order."""
    out = []
    for d in range(degree + 1):
        if dim == 1:
            out.append((d,))
        else:
            out.extend((d - j, j) for j in range(d + 1))
    return out


def dim_poly(dim, degree):
    if degree < 0:
        return 0
    return degree + 1 if dim == 1 else (degree + 1) * (degree + 2) // 2


def _centroid(dim):
    return np.full(dim, 1.0 / (dim + 1))


def monomials(xi, exps, center):
    """Values and gradients of centred monomials at reference points."""
    xi = np.atleast_2d(xi) - center
    npts, dim = xi.shape
    E = np.array(exps)  # (nb, dim)
    nb = len(exps)
    val = np.ones((npts, nb))
    for k in range(dim):
        val *= xi[:, [k]] ** E[None, :, k]
    grad = np.zeros((npts, nb, dim))
    for k in range(dim):
        g = np.ones((npts, nb))
        for l in range(dim):
            if l == k:
                e = E[:, l]
                g *= np.where(e > 0, e * xi[:, [l]] ** np.maximum(e - 1, 0), 0.0)
            else:
                g *= xi[:, [l]] ** E[None, :, l]
        grad[:, :, k] = g
    return val, grad


class OrthonormalBasis:
    """L2-orthonormal basis of P_m on the reference simplex."""

    def __init__(self, dim, degree):
        self.dim = dim
        self.degree = degree
        self.exps = exponents(dim, degree)
        self.size = len(self.exps)
        self.center = _centroid(dim)
        pts, wts = simplex_rule(dim, 2 * degree)
        M, _ = monomials(pts, self.exps, self.center)
        C = np.eye(self.size)
        for _ in range(2):
            Phi = M @ C
            Gm = Phi.T @ (wts[:, None] * Phi)
            L = np.linalg.cholesky(Gm)
            C = C @ np.linalg.inv(L).T
        self.coef = C

    def eval(self, xi):
        M, _ = monomials(xi, self.exps, self.center)
        return M @ self.coef

    def eval_grad(self, xi):
        M, dM = monomials(xi, self.exps, self.center)
        return M @ self.coef, np.einsum("pjd,jk->pkd", dM, self.coef)


def lattice_multi_indices(dim, m):
    """Barycentric multi-indices (i_0..i_dim) summing to m, vertices first."""
    idx = [t for t in product(range(m + 1), repeat=dim + 1) if sum(t) == m]

    # vertices, then edge-interior, then cell-interior nodes
    def key(t):
        return (sum(1 for v in t if v > 0), tuple(-v for v in t))

    return sorted(idx, key=key)


class LagrangeBasis:
    """Nodal P_m basis on the reference simplex at the equispaced lattice."""

    def __init__(self, dim, degree):
        if degree < 1:
            raise ValueError("Lagrange degree must be >= 1")
        self.dim = dim
        self.degree = degree
        self.multi = lattice_multi_indices(dim, degree)
        self.nodes = np.array([[t[k + 1] / degree for k in range(dim)] for t in self.multi])
        self.size = len(self.multi)
        self.ortho = get_orthonormal(dim, degree)
        V = self.ortho.eval(self.nodes)
        self.coef = np.linalg.inv(V)

    def eval(self, xi):
        return self.ortho.eval(xi) @ self.coef

    def eval_grad(self, xi):
        v, g = self.ortho.eval_grad(xi)
        return v @ self.coef, np.einsum("pjd,jk->pkd", g, self.coef)


@lru_cache(maxsize=None)
def get_orthonormal(dim, degree):
    return OrthonormalBasis(dim, degree)


@lru_cache(maxsize=None)
def get_lagrange(dim, degree):
    return LagrangeBasis(dim, degree)
