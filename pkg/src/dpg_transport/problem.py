"""Transport problem data b.grad(u) + c u = f with zero inflow data.

Raw data may be constants or callables of points X with shape (N, n).
`project_data` turns them into per-cell polynomials on the trial mesh and
cell averages of the convection on the subgrid.
"""
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .basis import get_orthonormal
from .quadrature import composite_rule, gauss_legendre, lattice_points, simplex_rule


@dataclass(frozen=True)
class DiscretizationConfig:
    m_u: int = 1
    m_w: int = 1
    m_v: int = 3
    m_b: int = 0
    m_c: int = 0
    m_f: int = 0
    subgrid_depth: int = 2
    theta: float = 0.5
    beta: float = 0.2
    refine_depth: int = 1
    downwind_depth: int | None = None
    cg_tol: float = 1e-11
    cg_maxit: int = 20000
    quad_levels: int = 2  # composite levels for integrals of raw data

    @property
    def m_v_min(self):
        return max(self.m_w + max(self.m_c, 1, self.m_b - 1), self.m_u + max(self.m_c, 1), self.m_f,
                   max(self.m_u, self.m_w) + 1)

    @property
    def downwind(self):
        return self.refine_depth if self.downwind_depth is None else self.downwind_depth

    def errors(self, adaptive=False):
        err = []
        for name in ("m_u", "m_b", "m_c", "m_f", "subgrid_depth"):
            if getattr(self, name) < 0:
                err.append(f"{name} must be >= 0")
        if self.m_w < 1:
            err.append("m_w must be >= 1")
        if self.m_v < self.m_v_min:
            err.append(f"m_v={self.m_v} below required minimum {self.m_v_min}")
        if not 0.0 < self.theta <= 1.0:
            err.append("theta must lie in (0, 1]")
        if self.refine_depth < 1 or self.downwind < 0:
            err.append("refine_depth must be >= 1 and downwind_depth >= 0")
        if self.cg_tol <= 0 or self.cg_maxit < 1:
            err.append("solver tolerances must be positive")
        if adaptive:
            if not 0.0 < self.beta < 0.25:
                err.append("beta must lie in (0, 1/4)")
            if self.m_w > self.m_u + 1:
                err.append("m_w <= m_u + 1 is required for adaptive runs")
        return err

    def validate(self, adaptive=False):
        err = self.errors(adaptive)
        if err:
            raise ValueError("; ".join(err))
        return self


def _const_or_call(v, X, ncomp=None):
    X = np.atleast_2d(X)
    if callable(v):
        out = np.asarray(v(X), dtype=float)
    else:
        v = np.asarray(v, dtype=float)
        out = np.broadcast_to(v, (len(X),) + v.shape).astype(float)
    if ncomp is not None:
        out = out.reshape(len(X), ncomp)
    return out


@dataclass(frozen=True)
class TransportProblem:
    """Convection `b`, reaction `c`, source `f` on an interval or a box."""

    dim: int
    domain: tuple
    b: object
    c: object = 0.0
    f: object = 0.0
    u_exact: Callable | None = None
    grad_u_exact: Callable | None = None
    f_breaks: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.dim not in (1, 2) or len(self.domain) != 2 * self.dim:
            raise ValueError("dimension and domain do not match")
        if not callable(self.b):
            bb = np.atleast_1d(np.asarray(self.b, dtype=float))
            if bb.shape != (self.dim,) or not np.linalg.norm(bb) > 0:
                raise ValueError("constant b must be a nonzero vector of length dim")

    @property
    def constant_b(self):
        return not callable(self.b)

    @property
    def constant_c(self):
        return not callable(self.c)

    @property
    def b_vector(self):
        if not self.constant_b:
            raise ValueError("b is not constant")
        return np.atleast_1d(np.asarray(self.b, dtype=float))

    def b_at(self, X):
        return _const_or_call(self.b, X, self.dim)

    def c_at(self, X):
        return _const_or_call(self.c, X).reshape(-1)

    def f_at(self, X):
        return _const_or_call(self.f, X).reshape(-1)

    def min_speed(self, mesh, k=6):
        """Smallest |b| over a lattice of sample points in every cell."""
        X = _lattice_physical(mesh, k).reshape(-1, self.dim)
        return float(np.linalg.norm(self.b_at(X), axis=1).min())

    def exact_pair_error(self):
        return self.u_exact is not None and self.grad_u_exact is not None


def _lattice_physical(mesh, k):
    ref = lattice_points(mesh.dim, k)
    return mesh.x0[:, None, :] + np.einsum("cij,qj->cqi", mesh.jac, ref)


def data_rule(mesh, degree, levels=0, breaks=()):
    """Per-cell quadrature (X (m,nq,n), W (m,nq)) for raw, possibly rough, data.

    Composite over `levels` uniform splits of each cell. In 1D, cells that
    contain a point of `breaks` are split there as well; padding points carry
    zero weight so every cell has the same number of points.
    """
    ref, w = composite_rule(mesh.dim, degree, levels)
    X, W = mesh.quadrature(ref, w)
    breaks = np.asarray(breaks, dtype=float)
    if mesh.dim != 1 or breaks.size == 0:
        return X, W
    x = mesh.vertex_coords[:, :, 0]
    lo, hi = x.min(axis=1), x.max(axis=1)
    inside = [np.sort(breaks[(breaks > a) & (breaks < b)]) for a, b in zip(lo, hi)]
    extra = max(len(s) for s in inside)
    if extra == 0:
        return X, W
    t, tw = gauss_legendre(len(w))
    npieces = 2 ** levels + extra
    nq = npieces * len(t)
    Xn = np.empty((mesh.n_cells, nq, 1))
    Wn = np.zeros((mesh.n_cells, nq))
    for c in range(mesh.n_cells):
        if len(inside[c]) == 0:
            Xn[c, :X.shape[1]], Wn[c, :X.shape[1]] = X[c], W[c]
            Xn[c, X.shape[1]:] = 0.5 * (lo[c] + hi[c])
            continue
        cuts = np.unique(np.concatenate([np.linspace(lo[c], hi[c], 2 ** levels + 1), inside[c]]))
        pts, wts = [], []
        for a, b in zip(cuts[:-1], cuts[1:]):
            pts.append(a + (b - a) * t)
            wts.append((b - a) * tw)
        pts, wts = np.concatenate(pts), np.concatenate(wts)
        Xn[c, :len(pts), 0], Wn[c, :len(pts)] = pts, wts
        Xn[c, len(pts):] = 0.5 * (lo[c] + hi[c])
    return Xn, Wn


class PolyField:
    """Piecewise polynomial on a mesh, coefficients in the per-cell orthonormal basis.

    `coef` has shape (m, nb, ncomp). A constant field stores `const` and skips
    the basis entirely so constants are reproduced exactly.
    """

    def __init__(self, mesh, degree, coef=None, const=None, ncomp=1):
        self.mesh = mesh
        self.degree = degree
        self.ncomp = ncomp
        self.const = None if const is None else np.atleast_1d(np.asarray(const, dtype=float))
        self.coef = coef
        self.basis = get_orthonormal(mesh.dim, degree)

    @classmethod
    def constant(cls, mesh, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(mesh, 0, const=value, ncomp=len(value))

    @classmethod
    def project(cls, mesh, func, degree, ncomp=1, levels=0, breaks=()):
        """L2 projection of a callable onto per-cell polynomials of `degree`."""
        if not callable(func):
            return cls.constant(mesh, func)
        X, W = data_rule(mesh, 2 * degree + 4, levels, breaks)
        m, nq, n = X.shape
        vals = _const_or_call(func, X.reshape(-1, n), ncomp).reshape(m, nq, ncomp)
        xi = np.einsum("cij,cqj->cqi", mesh.jac_inv, X - mesh.x0[:, None, :])
        phi = get_orthonormal(mesh.dim, degree).eval(xi.reshape(-1, n)).reshape(m, nq, -1)
        phi = phi / np.sqrt(np.abs(mesh.det))[:, None, None]
        coef = np.einsum("cq,cqb,cqk->cbk", W, phi, vals)
        return cls(mesh, degree, coef=coef, ncomp=ncomp)

    @classmethod
    def from_coefficients(cls, mesh, degree, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.ndim == 2:
            coef = coef[:, :, None]
        return cls(mesh, degree, coef=coef, ncomp=coef.shape[2])

    def _phi(self, cells, X, grad=False):
        mesh = self.mesh
        xi = np.einsum("nij,nj->ni", mesh.jac_inv[cells], X - mesh.x0[cells])
        s = 1.0 / np.sqrt(np.abs(mesh.det[cells]))
        if not grad:
            return self.basis.eval(xi) * s[:, None]
        v, g = self.basis.eval_grad(xi)
        g = np.einsum("nji,nbj->nbi", mesh.jac_inv[cells], g)
        return v * s[:, None], g * s[:, None, None]

    def __call__(self, cells, X):
        """Values (N, ncomp) at points X (N, n), point i taken in cell cells[i]."""
        cells = np.broadcast_to(np.asarray(cells), (len(X),))
        if self.const is not None:
            return np.broadcast_to(self.const, (len(X), self.ncomp)).copy()
        phi = self._phi(cells, X)
        return np.einsum("nb,nbk->nk", phi, self.coef[cells])

    def grad(self, cells, X):
        """Gradients (N, ncomp, n)."""
        cells = np.broadcast_to(np.asarray(cells), (len(X),))
        if self.const is not None:
            return np.zeros((len(X), self.ncomp, self.mesh.dim))
        _, g = self._phi(cells, X, grad=True)
        return np.einsum("nbi,nbk->nki", g, self.coef[cells])

    def scalar(self, cells, X):
        return self(cells, X)[:, 0]


@dataclass(eq=False)
class PerturbedData:
    """Projected data on the trial mesh and frozen convection on the subgrid."""

    problem: TransportProblem
    pair: object
    b: PolyField
    c: PolyField
    f: PolyField
    b_avg: np.ndarray = field(repr=False)  # (n_fine, n)
    d_avg: np.ndarray = field(repr=False)  # (n_fine,)

    @property
    def mesh(self):
        return self.pair.coarse

    def b_tilde(self, cells, X):
        return self.b(cells, X)

    def div_b(self, cells, X):
        return np.trace(self.b.grad(cells, X), axis1=1, axis2=2)

    def c_tilde(self, cells, X):
        return self.c.scalar(cells, X)

    def f_tilde(self, cells, X):
        return self.f.scalar(cells, X)

    @property
    def constant_b(self):
        return self.b.const is not None


def project_data(problem, pair, cfg):
    """Polynomial surrogates of (b, c, f) on the coarse mesh of `pair`.

    All three are L2 projections per coarse cell; constants are kept exactly.
    b_avg and d_avg are the cell means of b_tilde and div b_tilde on the fine
    mesh, computed with a rule exact for their polynomial degree.
    """
    mesh = pair.coarse
    lv = cfg.quad_levels
    b = PolyField.project(mesh, problem.b, cfg.m_b, ncomp=problem.dim, levels=lv)
    c = PolyField.project(mesh, problem.c, cfg.m_c, levels=lv)
    f = PolyField.project(mesh, problem.f, cfg.m_f, levels=lv, breaks=problem.f_breaks)
    fine = pair.fine
    if b.const is not None:
        b_avg = np.tile(b.const, (fine.n_cells, 1))
        d_avg = np.zeros(fine.n_cells)
    else:
        ref, w = simplex_rule(mesh.dim, cfg.m_b)
        X, W = fine.quadrature(ref, w)
        m, nq, n = X.shape
        cells = np.repeat(pair.parent, nq)
        vals = b(cells, X.reshape(-1, n)).reshape(m, nq, n)
        div = np.trace(b.grad(cells, X.reshape(-1, n)), axis1=1, axis2=2).reshape(m, nq)
        b_avg = np.einsum("cq,cqk->ck", W, vals) / fine.measures[:, None]
        d_avg = np.einsum("cq,cq->c", W, div) / fine.measures
    return PerturbedData(problem, pair, b, c, f, b_avg, d_avg)


def data_oscillation(problem, data, mesh=None, k=None):
    """max(||f - f~||, max(||c - c~||_inf, max_K diam^-1 ||b - b~||_inf) ||f||).

    Sup norms are estimated on an equispaced lattice of at least 10**n points
    per cell.
    """
    mesh = data.mesh if mesh is None else mesh
    n = mesh.dim
    deg = 2 * max(data.f.degree, 1) + 6
    X, W = data_rule(mesh, deg, 3, problem.f_breaks)
    m, nq, _ = X.shape
    cells = np.repeat(np.arange(m), nq)
    Xf = X.reshape(-1, n)
    fr = problem.f_at(Xf)
    ft = data.f.scalar(cells, Xf)
    err_f = np.sqrt(np.sum(W.reshape(-1) * (fr - ft) ** 2))
    norm_f = np.sqrt(np.sum(W.reshape(-1) * fr ** 2))
    k = k or (10 if n == 1 else 13)
    L = _lattice_physical(mesh, k)
    nl = L.shape[1]
    cells = np.repeat(np.arange(m), nl)
    Lf = L.reshape(-1, n)
    sup_c = np.max(np.abs(problem.c_at(Lf) - data.c.scalar(cells, Lf)))
    db = np.linalg.norm(problem.b_at(Lf) - data.b(cells, Lf), axis=1).reshape(m, nl).max(axis=1)
    sup_b = np.max(db / mesh.diameters)
    return float(max(err_f, max(sup_c, sup_b) * norm_f))


def evaluate(source, cell, points):
    """Values of the data at `points` in `cell`.

    `source` is a TransportProblem (raw b, c, f) or PerturbedData (projected
    b~, c~, f~ with gradients and div b~). Points outside the cell evaluate
    the polynomial extension.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if isinstance(source, TransportProblem):
        return {"b": source.b_at(X), "c": source.c_at(X), "f": source.f_at(X)}
    mesh = source.mesh
    if not 0 <= int(cell) < mesh.n_cells:
        raise IndexError(f"unknown cell id {cell}")
    cells = np.full(len(X), int(cell))
    return {
        "b": source.b_tilde(cells, X),
        "grad_b": source.b.grad(cells, X),
        "div_b": source.div_b(cells, X),
        "c": source.c_tilde(cells, X),
        "grad_c": source.c.grad(cells, X)[:, 0],
        "f": source.f_tilde(cells, X),
        "grad_f": source.f.grad(cells, X)[:, 0],
    }

