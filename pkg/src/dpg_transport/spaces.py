"""Trial space (broken P_mu) x (continuous P_mw, zero on the inflow boundary)
and the broken test space P_mv on the subgrid.

Coefficients of a trial function are ordered [u-block, w-block]. The u-block
holds per-cell coefficients in the L2(K)-orthonormal basis. The w-block holds
nodal values at the free Lagrange nodes.
"""
from dataclasses import dataclass

import numpy as np

from .basis import get_lagrange, get_orthonormal
from .mesh import INFLOW, ancestor_map


def _ref_points(mesh, cells, X):
    return np.einsum("nij,nj->ni", mesh.jac_inv[cells], X - mesh.x0[cells])


class TrialSpace:
    def __init__(self, mesh, m_u, m_w, faces=None, constrain=True):
        if m_u < 0 or m_w < 1:
            raise ValueError("need m_u >= 0 and m_w >= 1")
        self.mesh = mesh
        self.m_u, self.m_w = int(m_u), int(m_w)
        self.ubasis = get_orthonormal(mesh.dim, self.m_u)
        self.wbasis = get_lagrange(mesh.dim, self.m_w)
        self.nbu, self.nbw = self.ubasis.size, self.wbasis.size
        self.n_u = mesh.n_cells * self.nbu

        C = mesh.cells
        multi = self.wbasis.multi
        keys = [[tuple(sorted((int(C[c, k]), t[k]) for k in range(mesh.dim + 1) if t[k] > 0))
                 for t in multi] for c in range(mesh.n_cells)]
        blocked = set()
        if constrain and faces is not None:
            for c, k in zip(*np.nonzero(faces.boundary & (faces.face_type == INFLOW))):
                on_face = {int(v) for j, v in enumerate(C[c]) if j != k}
                for key in keys[c]:
                    if all(v in on_face for v, _ in key):
                        blocked.add(key)
        self.constrained = blocked
        number = {}
        l2g = np.full((mesh.n_cells, self.nbw), -1, dtype=np.int64)
        coords = []
        for c in range(mesh.n_cells):
            for j, key in enumerate(keys[c]):
                if key in blocked:
                    continue
                if key not in number:
                    number[key] = len(number)
                    coords.append(mesh.to_physical(c, self.wbasis.nodes[j])[0])
                l2g[c, j] = number[key]
        self.node_keys = number
        self.node_coords = np.array(coords).reshape(-1, mesh.dim)
        self.w_l2g = l2g
        self.n_w = len(number)
        self.dim = self.n_u + self.n_w

    @property
    def local_dofs(self):
        """(m, nbu + nbw) global dof indices; -1 marks constrained w-nodes."""
        u = np.arange(self.n_u).reshape(-1, self.nbu)
        w = np.where(self.w_l2g >= 0, self.w_l2g + self.n_u, -1)
        return np.hstack([u, w])

    def basis_at(self, cells, X):
        """u values (N, nbu), w values (N, nbw), w gradients (N, nbw, n).

        Point i is evaluated with the polynomials of cell cells[i]; points
        outside that cell give the polynomial extension.
        """
        mesh = self.mesh
        cells = np.broadcast_to(np.asarray(cells), (len(X),))
        xi = _ref_points(mesh, cells, X)
        u = self.ubasis.eval(xi) / np.sqrt(np.abs(mesh.det[cells]))[:, None]
        w, gw = self.wbasis.eval_grad(xi)
        gw = np.einsum("nji,nbj->nbi", mesh.jac_inv[cells], gw)
        return u, w, gw

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[:self.n_u].reshape(-1, self.nbu), x[self.n_u:]

    def evaluate(self, x, cells, X):
        cells = np.broadcast_to(np.asarray(cells), (len(X),))
        ub, wb, gw = self.basis_at(cells, X)
        uc, wc = self.split(x)
        wloc = np.where(self.w_l2g >= 0, wc[np.maximum(self.w_l2g, 0)], 0.0)[cells]
        u = np.einsum("nb,nb->n", ub, uc[cells])
        w = np.einsum("nb,nb->n", wb, wloc)
        g = np.einsum("nbi,nb->ni", gw, wloc)
        return u, w, g

    def interpolate(self, u_func=None, w_func=None, levels=1):
        """Coefficients of (L2 projection of u_func, nodal interpolant of w_func)."""
        x = np.zeros(self.dim)
        if u_func is not None:
            from .quadrature import composite_rule
            ref, wt = composite_rule(self.mesh.dim, 2 * self.m_u + 8, levels)
            X, W = self.mesh.quadrature(ref, wt)
            m, nq, n = X.shape
            cells = np.repeat(np.arange(m), nq)
            ub, _, _ = self.basis_at(cells, X.reshape(-1, n))
            vals = np.asarray(u_func(X.reshape(-1, n)), dtype=float)
            x[:self.n_u] = np.einsum("n,nb->nb", W.reshape(-1) * vals, ub).reshape(m, nq, -1).sum(axis=1).ravel()
        if w_func is not None and self.n_w:
            x[self.n_u:] = np.asarray(w_func(self.node_coords), dtype=float)
        return x


@dataclass(eq=False)
class TrialFunction:
    space: TrialSpace
    coeffs: np.ndarray

    @property
    def u_coeffs(self):
        return self.space.split(self.coeffs)[0]

    @property
    def w_coeffs(self):
        return self.space.split(self.coeffs)[1]

    def __sub__(self, other):
        return TrialFunction(self.space, self.coeffs - other.coeffs)

    def __add__(self, other):
        return TrialFunction(self.space, self.coeffs + other.coeffs)


def build_trial_space(mesh, cfg, faces):
    return TrialSpace(mesh, cfg.m_u, cfg.m_w, faces)


def evaluate_trial(fn, cell, points):
    """(u, w, grad w) of a trial function at points of one cell."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    return fn.space.evaluate(fn.coeffs, np.full(len(X), int(cell)), X)


class TestSpace:
    """Broken P_mv on the subgrid with L2(K)-orthonormal bases."""

    __test__ = False

    def __init__(self, mesh, m_v):
        self.mesh = mesh
        self.m_v = int(m_v)
        self.basis = get_orthonormal(mesh.dim, self.m_v)
        self.nb = self.basis.size
        self.dim = mesh.n_cells * self.nb

    def offsets(self):
        return np.arange(self.mesh.n_cells) * self.nb

    def basis_at(self, cells, X):
        mesh = self.mesh
        cells = np.broadcast_to(np.asarray(cells), (len(X),))
        xi = _ref_points(mesh, cells, X)
        v, g = self.basis.eval_grad(xi)
        s = 1.0 / np.sqrt(np.abs(mesh.det[cells]))
        g = np.einsum("nji,nbj->nbi", mesh.jac_inv[cells], g)
        return v * s[:, None], g * s[:, None, None]

    def evaluate(self, coeffs, cells, X):
        cells = np.broadcast_to(np.asarray(cells), (len(X),))
        v, g = self.basis_at(cells, X)
        c = np.asarray(coeffs).reshape(-1, self.nb)[cells]
        return np.einsum("nb,nb->n", v, c), np.einsum("nbi,nb->ni", g, c)


def build_test_space(mesh, cfg):
    return TestSpace(mesh, cfg.m_v)


def prolongate(fn, space):
    """Re-express a trial function on a refined mesh (exact for nested meshes)."""
    old = fn.space
    new_mesh = space.mesh
    anc = ancestor_map(new_mesh, old.mesh)
    from .quadrature import simplex_rule
    ref, wt = simplex_rule(new_mesh.dim, 2 * max(old.m_u, space.m_u))
    X, W = new_mesh.quadrature(ref, wt)
    m, nq, n = X.shape
    Xf = X.reshape(-1, n)
    cells_new = np.repeat(np.arange(m), nq)
    u_old, _, _ = old.evaluate(fn.coeffs, anc[cells_new], Xf)
    ub, _, _ = space.basis_at(cells_new, Xf)
    x = np.zeros(space.dim)
    x[:space.n_u] = (ub * (W.reshape(-1) * u_old)[:, None]).reshape(m, nq, -1).sum(axis=1).ravel()
    # nodal values of the old w at new nodes, located through any owning cell
    owner = np.zeros(space.n_w, dtype=np.int64)
    for c in range(m):
        g = space.w_l2g[c]
        owner[g[g >= 0]] = c
    if space.n_w:
        _, w_old, _ = old.evaluate(fn.coeffs, anc[owner], space.node_coords)
        x[space.n_u:] = w_old
    return TrialFunction(space, x)
