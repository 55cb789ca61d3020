"""Quadrature rules on the reference interval [0, 1] and reference triangle.

The triangle rule is a collapsed (Duffy) tensor rule built from Gauss-Jacobi
and Gauss-Legendre points, exact for any requested total degree.
"""
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@lru_cache(maxsize=None)
def gauss_legendre(npts):
    """Gauss-Legendre points and weights on [0, 1]."""
    x, w = roots_legendre(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def npts_for_degree(degree):
    return max(1, (int(degree) + 2) // 2)


@lru_cache(maxsize=None)
def simplex_rule(dim, degree):
    """Reference rule exact for polynomials of total degree <= `degree`.

    Returns points (nq, dim) and weights (nq,). The reference simplex is
    [0, 1] in 1D and conv{(0,0), (1,0), (0,1)} in 2D.
    """
    n = npts_for_degree(degree)
    if dim == 1:
        x, w = gauss_legendre(n)
        return x[:, None].copy(), w.copy()
    if dim != 2:
        raise ValueError("only dim 1 and 2 are supported")
    # s carries the Jacobian factor (1 - s) through the Jacobi weight
    n_s = npts_for_degree(degree + 1)
    xs, ws = roots_jacobi(n_s, 1.0, 0.0)
    s = 0.5 * (xs + 1.0)
    ws = ws / 4.0
    t, wt = gauss_legendre(n)
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    pts = np.column_stack([S.ravel(), (T * (1.0 - S)).ravel()])
    return pts, W.ravel()


def _subsimplices(dim, levels):
    """Affine maps (origin, matrix) of a uniform split of the reference simplex."""
    if dim == 1:
        k = 2 ** levels
        return [(np.array([i / k]), np.array([[1.0 / k]])) for i in range(k)]
    k = 2 ** levels
    h = 1.0 / k
    maps = []
    for i in range(k):
        for j in range(k - i):
            o = np.array([i * h, j * h])
            maps.append((o, np.array([[h, 0.0], [0.0, h]])))
            if i + j < k - 1:
                o2 = np.array([(i + 1) * h, (j + 1) * h])
                maps.append((o2, np.array([[-h, 0.0], [0.0, -h]])))
    return maps


@lru_cache(maxsize=None)
def composite_rule(dim, degree, levels):
    """Reference rule on a uniform split of the simplex into 2**(dim*levels) pieces."""
    p, w = simplex_rule(dim, degree)
    pts, wts = [], []
    for o, A in _subsimplices(dim, levels):
        pts.append(o + p @ A.T)
        wts.append(w * abs(np.linalg.det(A)))
    return np.vstack(pts), np.concatenate(wts)


@lru_cache(maxsize=None)
def lattice_points(dim, k):
    """Equispaced lattice of the reference simplex with k intervals per edge."""
    if dim == 1:
        return (np.arange(k + 1) / k)[:, None]
    pts = [(i / k, j / k) for i in range(k + 1) for j in range(k + 1 - i)]
    return np.array(pts)
