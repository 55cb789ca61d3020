"""Broken bilinear form, Gram operator and the minimal-residual PG solve.

For a trial pair (u, w) with w continuous and a broken test function v, the
form on a fine cell K is

    b_K(u, w; v) = int_K (c u + b.grad w) v + (w - u)(v div b + b.grad v),

which equals int_K (c v - b.grad v - v div b) u + int_dK (b.n) v w after
integration by parts. Both variants are available; they agree up to roundoff.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .linalg import BlockDiagonal, min_generalized_eig, normal_matrix, spd_solve
from .mesh import face_points
from .quadrature import gauss_legendre, simplex_rule
from .spaces import TrialFunction


def quad_degree(m_u, m_w, m_v, m_b, m_c, m_f):
    """Degree that integrates every product in B, G and F exactly."""
    return 2 * m_v + 2 * max(m_b, m_c, m_f) + max(m_u, m_w) + 2


@dataclass(eq=False)
class DpgSystem:
    pair: object
    data: object
    trial: object
    test: object
    B: sp.csr_matrix
    G: BlockDiagonal
    F: np.ndarray
    tol: float = 1e-11
    maxit: int = 20000

    @cached_property
    def S(self):
        return normal_matrix(self.B, self.G)

    @cached_property
    def rhs(self):
        return self.B.T @ self.G.solve(self.F)


@dataclass(eq=False)
class LiftedResidual:
    """Per fine cell coefficients in the test basis with squared norms."""

    coeffs: np.ndarray  # (n_fine, nbv)
    kind: str
    norms2: np.ndarray  # ||.||^2_{H(b;K)} per fine cell
    triple2: np.ndarray | None = field(default=None, repr=False)

    @property
    def total2(self):
        return float(self.norms2.sum())

    @property
    def norm(self):
        return float(np.sqrt(self.total2))

    def per_coarse(self, parent, n_coarse):
        return np.bincount(parent, weights=self.norms2, minlength=n_coarse)


def _fine_points(pair, degree):
    ref, wts = simplex_rule(pair.fine.dim, degree)
    X, W = pair.fine.quadrature(ref, wts)
    m, nq, n = X.shape
    fine_cells = np.repeat(np.arange(m), nq)
    return X.reshape(-1, n), W.reshape(-1), fine_cells, pair.parent[fine_cells], nq


def _degrees(data, trial, test):
    return (trial.m_u, trial.m_w, test.m_v, data.b.degree, data.c.degree, data.f.degree)


def _scatter(rows_local, cols_local, blocks, shape):
    """COO assembly of (m, nr, nc) blocks; entries with a negative index are dropped."""
    m, nr, nc = blocks.shape
    R = np.broadcast_to(rows_local[:, :, None], (m, nr, nc))
    C = np.broadcast_to(cols_local[:, None, :], (m, nr, nc))
    keep = (R >= 0) & (C >= 0)
    return sp.coo_matrix((blocks[keep], (R[keep], C[keep])), shape=shape).tocsr()


def assemble(problem, data, trial, test, pair, form="volume", tol=1e-11, maxit=20000):
    """Assemble B, G and F on the subgrid with projected data."""
    if trial.mesh is not pair.coarse or test.mesh is not pair.fine:
        raise ValueError("spaces are not built on the given subgrid pair")
    deg = quad_degree(*_degrees(data, trial, test))
    X, W, fc, pc, nq = _fine_points(pair, deg)
    mf = pair.fine.n_cells
    ub, wb, gw = trial.basis_at(pc, X)
    v, gv = test.basis_at(fc, X)
    bt = data.b_tilde(pc, X)
    divb = data.div_b(pc, X)
    ct = data.c_tilde(pc, X)
    ft = data.f_tilde(pc, X)
    bv = np.einsum("ni,nbi->nb", bt, gv)
    Wv = W[:, None] * v

    def cellsum(a):
        return a.reshape((mf, nq) + a.shape[1:]).sum(axis=1)

    if form == "volume":
        left_u = ct[:, None] * v - divb[:, None] * v - bv
        Bu = cellsum(np.einsum("ni,nj->nij", W[:, None] * left_u, ub))
        bw = np.einsum("ni,nbi->nb", bt, gw)
        Bw = cellsum(np.einsum("ni,nj->nij", Wv, bw)
                     + np.einsum("ni,nj->nij", W[:, None] * (divb[:, None] * v + bv), wb))
    elif form == "skeleton":
        left_u = ct[:, None] * v - bv - divb[:, None] * v
        Bu = cellsum(np.einsum("ni,nj->nij", W[:, None] * left_u, ub))
        Bw = _face_terms(pair, data, trial, test, deg)
    else:
        raise ValueError("form must be 'volume' or 'skeleton'")
    Bloc = np.concatenate([Bu, Bw], axis=2)
    Gloc = cellsum(np.einsum("ni,nj->nij", Wv, v) + np.einsum("ni,nj->nij", W[:, None] * bv, bv))
    Gloc = 0.5 * (Gloc + np.transpose(Gloc, (0, 2, 1)))
    Floc = cellsum(Wv * ft[:, None])

    rows = test.offsets()[:, None] + np.arange(test.nb)[None, :]
    cols = trial.local_dofs[pair.parent]
    B = _scatter(rows, cols, Bloc, (test.dim, trial.dim))
    G = BlockDiagonal.factor(Gloc)
    return DpgSystem(pair, data, trial, test, B, G, Floc.ravel(), tol, maxit)


def _face_terms(pair, data, trial, test, deg):
    """Per fine cell: sum over faces of int_F (b~.n) v psi_j for w-basis psi_j."""
    fine = pair.fine
    mf, n = fine.n_cells, fine.dim
    normals, areas = fine.face_normals
    t, tw = gauss_legendre(max(2, deg // 2 + 1))
    out = np.zeros((mf, test.nb, trial.nbw))
    for k in range(n + 1):
        P = face_points(fine, k, t)
        nq = P.shape[1]
        wts = np.ones((mf, 1)) if n == 1 else areas[:, k][:, None] * tw[None, :]
        Pf = P.reshape(-1, n)
        fc = np.repeat(np.arange(mf), nq)
        pc = pair.parent[fc]
        _, wb, _ = trial.basis_at(pc, Pf)
        v, _ = test.basis_at(fc, Pf)
        bn = np.einsum("ni,ni->n", data.b_tilde(pc, Pf), np.repeat(normals[:, k], nq, axis=0))
        contrib = np.einsum("ni,nj->nij", (wts.reshape(-1) * bn)[:, None] * v, wb)
        out += contrib.reshape(mf, nq, test.nb, trial.nbw).sum(axis=1)
    return out


def solve_pg(sys):
    x = spd_solve(sys.S, sys.rhs, sys.tol, sys.maxit)
    return TrialFunction(sys.trial, x)


def _coeffs(fn):
    return fn.coeffs if isinstance(fn, TrialFunction) else np.asarray(fn, dtype=float)


def project_residual(sys, fn, f=True):
    """R^delta: per fine cell G_K r_K = (B x - F)|_K, with broken norms."""
    res = sys.B @ _coeffs(fn)
    if f:
        res = res - sys.F
    r = sys.G.solve(res)
    R = r.reshape(-1, sys.test.nb)
    norms2 = np.einsum("ci,ci->c", R, res.reshape(-1, sys.test.nb))
    return LiftedResidual(R, "R_delta", np.maximum(norms2, 0.0))


def trial_to_test(sys, fn):
    return sys.G.solve(sys.B @ _coeffs(fn))


def residual_norm2(sys, fn):
    return project_residual(sys, fn).total2


def trial_norm_matrix(trial, data):
    """Gram of ||u||^2_{L2} + ||w||^2_{L2} + ||b~.grad w||^2_{L2} on the trial mesh."""
    mesh = trial.mesh
    deg = 2 * max(trial.m_u, trial.m_w) + 2 * data.b.degree
    ref, wts = simplex_rule(mesh.dim, deg)
    X, W = mesh.quadrature(ref, wts)
    m, nq, n = X.shape
    cells = np.repeat(np.arange(m), nq)
    Xf, Wf = X.reshape(-1, n), W.reshape(-1)
    ub, wb, gw = trial.basis_at(cells, Xf)
    bt = data.b_tilde(cells, Xf)
    bw = np.einsum("ni,nbi->nb", bt, gw)
    Muu = np.einsum("ni,nj->nij", Wf[:, None] * ub, ub).reshape(m, nq, trial.nbu, trial.nbu).sum(axis=1)
    Mww = (np.einsum("ni,nj->nij", Wf[:, None] * wb, wb)
           + np.einsum("ni,nj->nij", Wf[:, None] * bw, bw)).reshape(m, nq, trial.nbw, trial.nbw).sum(axis=1)
    Z1 = np.zeros((m, trial.nbu, trial.nbw))
    Mloc = np.concatenate([np.concatenate([Muu, Z1], axis=2),
                           np.concatenate([np.transpose(Z1, (0, 2, 1)), Mww], axis=2)], axis=1)
    dofs = trial.local_dofs
    M = _scatter(dofs, dofs, Mloc, (trial.dim, trial.dim))
    return (0.5 * (M + M.T)).tocsr()


def estimate_discrete_infsup(sys, trial=None, M=None):
    """sqrt of the smallest eigenvalue of S x = lam M x; returns (gamma, converged)."""
    trial = sys.trial if trial is None else trial
    M = trial_norm_matrix(trial, sys.data) if M is None else M
    lam, ok = min_generalized_eig(sys.S, M)
    return float(np.sqrt(max(lam, 0.0))), ok


def trial_error(problem, data, fn, degree=None, levels=1):
    """(||u_ex - u||_{L2}, ||u_ex - w||_{H(b)}) against the exact solution."""
    from .quadrature import composite_rule
    trial = fn.space
    mesh = trial.mesh
    deg = degree or 2 * max(trial.m_u, trial.m_w) + 8
    ref, wts = composite_rule(mesh.dim, deg, levels)
    X, W = mesh.quadrature(ref, wts)
    m, nq, n = X.shape
    cells = np.repeat(np.arange(m), nq)
    Xf, Wf = X.reshape(-1, n), W.reshape(-1)
    u, w, gw = trial.evaluate(fn.coeffs, cells, Xf)
    ue = np.asarray(problem.u_exact(Xf), dtype=float)
    ge = np.asarray(problem.grad_u_exact(Xf), dtype=float).reshape(-1, n)
    b = problem.b_at(Xf)
    eu = np.sqrt(np.sum(Wf * (ue - u) ** 2))
    ew = np.sqrt(np.sum(Wf * ((ue - w) ** 2 + np.einsum("ni,ni->n", b, ge - gw) ** 2)))
    return float(eu), float(ew)


def trial_norm2(fn, data):
    M = trial_norm_matrix(fn.space, data)
    x = _coeffs(fn)
    return float(x @ (M @ x))
