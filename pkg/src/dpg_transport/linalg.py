"""Block-diagonal Gram solves, sparse normal equations and SPD solvers."""
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_LIMIT = 2000


class SolverError(RuntimeError):
    """Raised when an iterative or factorised solve fails."""


@dataclass(eq=False)
class BlockDiagonal:
    """Equal-size dense SPD blocks (nblocks, k, k) with Cholesky factors."""

    blocks: np.ndarray
    chol: np.ndarray

    @classmethod
    def factor(cls, blocks, sym_tol=1e-13):
        blocks = np.asarray(blocks, dtype=float)
        asym = np.abs(blocks - np.transpose(blocks, (0, 2, 1))).max(axis=(1, 2))
        scale = np.abs(blocks).max(axis=(1, 2))
        bad = np.flatnonzero(asym > sym_tol * np.maximum(scale, 1e-300))
        if bad.size:
            raise SolverError(f"block {int(bad[0])} is not symmetric")
        try:
            chol = np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError:
            for i, B in enumerate(blocks):
                try:
                    np.linalg.cholesky(B)
                except np.linalg.LinAlgError:
                    raise SolverError(f"block {i} is not positive definite") from None
            raise
        return cls(blocks, chol)

    @property
    def nblocks(self):
        return self.blocks.shape[0]

    @property
    def block_size(self):
        return self.blocks.shape[1]

    @property
    def shape(self):
        n = self.nblocks * self.block_size
        return n, n

    def _shape_rhs(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.shape[0]:
            raise ValueError("dimension mismatch")
        return rhs.reshape((self.nblocks, self.block_size) + rhs.shape[1:])

    def apply(self, x):
        X = self._shape_rhs(x)
        if X.ndim == 2:
            return np.einsum("cij,cj->ci", self.blocks, X).reshape(np.shape(x))
        return np.einsum("cij,cjk->cik", self.blocks, X).reshape(np.shape(x))

    def solve(self, rhs):
        X = self._shape_rhs(rhs)
        vec = X.ndim == 2
        if vec:
            X = X[..., None]
        Y = _chol_solve(self.chol, X)
        return (Y[..., 0] if vec else Y).reshape(np.shape(rhs))

    def inverse_sparse(self):
        inv = _chol_solve(self.chol, np.broadcast_to(np.eye(self.block_size), self.blocks.shape).copy())
        return sp.block_diag(list(inv), format="csr")


def _chol_solve(L, X):
    """Solve L L^T Y = X blockwise (batched)."""
    Z = np.linalg.solve(L, X)
    return np.linalg.solve(np.transpose(L, (0, 2, 1)), Z)


def block_solve(G, rhs):
    return G.solve(rhs)


def normal_matrix(B, G):
    """S = B^T G^-1 B as a symmetric sparse matrix."""
    B = sp.csr_matrix(B)
    S = (B.T @ (G.inverse_sparse() @ B)).tocsr()
    S = 0.5 * (S + S.T)
    return S.tocsr()


def cg_solve(S, rhs, tol=1e-11, maxit=20000, x0=None):
    """Jacobi-preconditioned conjugate gradients; relative residual <= tol."""
    rhs = np.asarray(rhs, dtype=float)
    nrm = np.linalg.norm(rhs)
    if nrm == 0.0:
        return np.zeros_like(rhs)
    d = S.diagonal() if sp.issparse(S) else np.diag(S)
    if np.any(d <= 0):
        raise SolverError("matrix has non-positive diagonal")
    Minv = spla.LinearOperator(S.shape, matvec=lambda v: v / d, dtype=float)
    x, info = spla.cg(S, rhs, x0=x0, rtol=tol, atol=0.0, maxiter=int(maxit), M=Minv)
    res = np.linalg.norm(rhs - S @ x) / nrm
    if info == 0 or res <= tol:
        return x
    raise SolverError(f"CG did not converge in {maxit} iterations, relative residual {res:.3e}")


def spd_solve(S, rhs, tol=1e-11, maxit=20000):
    """Dense Cholesky for small systems, CG above DENSE_LIMIT unknowns."""
    n = S.shape[0]
    if n <= DENSE_LIMIT:
        A = S.toarray() if sp.issparse(S) else np.asarray(S)
        try:
            return sla.cho_solve(sla.cho_factor(A, lower=True), rhs)
        except np.linalg.LinAlgError:
            raise SolverError("system matrix is not positive definite") from None
    return cg_solve(S, rhs, tol, maxit)


def min_generalized_eig(S, M, tol=1e-10, maxit=500, seed=0):
    """Smallest eigenvalue of S x = lam M x.

    Dense symmetric-definite solve up to DENSE_LIMIT unknowns, shift-invert
    Lanczos about 0 above. Returns (lam, converged); a singular S gives
    (0.0, True).
    """
    n = S.shape[0]
    if n <= DENSE_LIMIT:
        Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        Sd = S.toarray() if sp.issparse(S) else np.asarray(S, dtype=float)
        lam = sla.eigh(Sd, Md, eigvals_only=True, subset_by_index=[0, 0])[0]
        return float(max(lam, 0.0)), True
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        lam = spla.eigsh(sp.csc_matrix(S), k=1, M=sp.csc_matrix(M), sigma=0.0, which="LM",
                         tol=tol, maxiter=maxit, v0=v0, return_eigenvectors=False)[0]
    except RuntimeError:  # exactly singular S
        return 0.0, True
    except spla.ArpackNoConvergence as exc:
        vals = exc.eigenvalues
        return (float(vals.min()) if len(vals) else float("nan")), False
    return float(max(lam, 0.0)), True
