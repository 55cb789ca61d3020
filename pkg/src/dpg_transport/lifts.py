"""Closed-form local lifts of the frozen-convection residual on one cell.

On a cell K with a constant direction b (the cell average of the perturbed
convection), Cartesian coordinates (x, y) are chosen with x along b. Each
characteristic line {y = const} enters K at x_-(y) and leaves at x_+(y).
The lift solves a two-point problem along every line. Because the nested
antiderivatives of the source are polynomial in x with piecewise-linear
limits, every integral along a line is computed with a Gauss rule that is
exact for the polynomial degrees involved. The average form of the last
term never divides by the chord length r = x_+ - x_-, so very short chords
need no special treatment.

Sign convention: integrating the modified form by parts against the inner
product gives the line source

    gamma = b~.grad u + c~ u - f~ + d mu,     mu = w - u,

where d is the cell average of div b~. The approximate lift uses the matching
constant term (lambda - (c~ - d) mu) at the foot point, so that both lifts
agree to first order. For divergence-free convection the sign is immaterial.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from .mesh import CHAR_TOL
from .poly import Poly
from .quadrature import gauss_legendre, simplex_rule


class CharacteristicWarning(UserWarning):
    """The cell is larger than the convection speed allows for norm equivalence."""


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Piece:
    """Part of K between two consecutive vertex heights.

    Lines are (alpha, beta) with x = alpha + beta * y.
    """

    y0: float
    y1: float
    lo: tuple
    hi: tuple
    triangle: np.ndarray  # physical vertices (3, 2)


@dataclass(eq=False)
class CharacteristicFrame:
    vertices: np.ndarray
    b: np.ndarray
    speed: float
    e1: np.ndarray
    e2: np.ndarray | None
    origin: np.ndarray
    diam: float
    pieces: list
    normals: np.ndarray  # outward, face k opposite vertex k
    areas: np.ndarray
    inflow: np.ndarray  # indices of inflow faces
    shadow_face: int
    xbar: tuple  # (alpha, beta) of the linear foot map; 1D: (x_-, 0)
    shadow: np.ndarray  # vertices of the enclosing simplex
    x_range: tuple = field(default=(0.0, 0.0))  # 1D only

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def single_inflow(self):
        return len(self.inflow) == 1

    @property
    def breakpoints(self):
        return [p.y1 for p in self.pieces[:-1]]

    @property
    def xbar_slope(self):
        """Lipschitz constant of the foot map y -> xbar_-(y)."""
        return abs(self.xbar[1])

    @property
    def diam_ok(self):
        return self.diam <= self.speed

    # -- coordinates --------------------------------------------------------
    def to_frame(self, X):
        D = np.atleast_2d(np.asarray(X, dtype=float)) - self.origin
        if self.dim == 1:
            return D[:, 0] * self.e1[0], np.zeros(len(D))
        return D @ self.e1, D @ self.e2

    def to_physical(self, x, y):
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            return self.origin + (x * self.e1[0])[..., None]
        y = np.asarray(y, dtype=float)
        return self.origin + x[..., None] * self.e1 + y[..., None] * self.e2

    def _piece_index(self, y):
        if self.dim == 1:
            return np.zeros(np.shape(y), dtype=int)
        br = np.array(self.breakpoints)
        return np.searchsorted(br, y, side="right") if br.size else np.zeros(np.shape(y), dtype=int)

    def x_minus(self, y):
        if self.dim == 1:
            return np.full(np.shape(y), self.x_range[0])
        idx = self._piece_index(y)
        a = np.array([p.lo for p in self.pieces])[idx]
        return a[..., 0] + a[..., 1] * y

    def x_plus(self, y):
        if self.dim == 1:
            return np.full(np.shape(y), self.x_range[1])
        idx = self._piece_index(y)
        a = np.array([p.hi for p in self.pieces])[idx]
        return a[..., 0] + a[..., 1] * y

    def r(self, y):
        return np.maximum(self.x_plus(y) - self.x_minus(y), 0.0)

    def x_bar(self, y):
        return self.xbar[0] + self.xbar[1] * np.asarray(y, dtype=float)

    # -- quadrature -------------------------------------------------------------
    def volume_rule(self, degree):
        """Points and weights on K, split along the characteristic subdivision."""
        if self.dim == 1:
            t, w = gauss_legendre(max(1, degree // 2 + 1))
            a, b = self.vertices[:, 0].min(), self.vertices[:, 0].max()
            return (a + t * (b - a))[:, None], w * (b - a)
        return _triangles_rule([p.triangle for p in self.pieces], degree)

    def inflow_rule(self, degree):
        """(y, weight) pairs for integrals over dK_- against |b0.n| ds."""
        if self.dim == 1:
            return np.zeros(1), np.ones(1)
        t, w = gauss_legendre(max(1, degree // 2 + 1))
        ys, ws = [], []
        for p in self.pieces:
            ys.append(p.y0 + t * (p.y1 - p.y0))
            ws.append(w * (p.y1 - p.y0))
        return np.concatenate(ys), np.concatenate(ws)

    def inflow_points(self, y):
        return self.to_physical(self.x_minus(y), y)

    def shadow_rule(self, degree):
        if self.dim == 1:
            return self.volume_rule(degree)
        return _triangles_rule([self.shadow], degree)


def _triangles_rule(tris, degree):
    ref, wts = simplex_rule(2, degree)
    X, W = [], []
    for T in tris:
        T = np.asarray(T, dtype=float)
        J = np.column_stack([T[1] - T[0], T[2] - T[0]])
        X.append(T[0] + ref @ J.T)
        W.append(wts * abs(np.linalg.det(J)))
    return np.vstack(X), np.concatenate(W)


def _line(P, Q):
    """x as an affine function of y through frame points P, Q (y must differ)."""
    beta = (Q[0] - P[0]) / (Q[1] - P[1])
    return (P[0] - beta * P[1], beta)


def _eval_line(L, y):
    return L[0] + L[1] * y


def build_frame(vertices, b, warn=True):
    """Characteristic frame of a simplex for a constant direction b."""
    V = np.atleast_2d(np.asarray(vertices, dtype=float))
    n = V.shape[1]
    if V.shape[0] != n + 1 or n not in (1, 2):
        raise ValueError("expected an interval or a triangle")
    b = np.atleast_1d(np.asarray(b, dtype=float)).reshape(n)
    speed = float(np.linalg.norm(b))
    if speed == 0.0:
        raise ValueError("convection direction vanishes")
    diam = max(np.linalg.norm(V[i] - V[j]) for i in range(n + 1) for j in range(i + 1, n + 1))
    vol = abs(np.linalg.det(np.column_stack([V[k] - V[0] for k in range(1, n + 1)])))
    if diam == 0.0 or vol <= 1e-14 * diam ** n:
        raise ValueError("degenerate cell")
    if warn and diam > speed:
        warnings.warn(f"diam(K)={diam:.3g} exceeds |b|={speed:.3g}", CharacteristicWarning, stacklevel=2)
    e1 = b / speed
    origin = V[0].copy()

    if n == 1:
        xs = (V[:, 0] - origin[0]) * e1[0]
        normals = np.array([[np.sign(V[1, 0] - V[0, 0])], [np.sign(V[0, 0] - V[1, 0])]])
        areas = np.ones(2)
        bn = normals[:, 0] * e1[0]
        inflow = np.flatnonzero(bn < 0)
        xr = (float(xs.min()), float(xs.max()))
        return CharacteristicFrame(V, b, speed, e1, None, origin, diam, [], normals, areas,
                                   inflow, int(inflow[0]), (xr[0], 0.0), V.copy(), xr)

    e2 = np.array([-e1[1], e1[0]])
    F = np.column_stack([(V - origin) @ e1, (V - origin) @ e2])
    normals, areas = np.zeros((3, 2)), np.zeros(3)
    for k in range(3):
        i, j = [m for m in range(3) if m != k]
        t = V[j] - V[i]
        nv = np.array([t[1], -t[0]])
        if nv @ (V[k] - V[i]) > 0:
            nv = -nv
        areas[k] = np.linalg.norm(t)
        normals[k] = nv / areas[k]
    bn = normals @ e1
    inflow = np.flatnonzero(bn < -CHAR_TOL)
    order = np.argsort(F[:, 1], kind="stable")
    A, M, C = F[order]
    PA, PM, PC = V[order]
    tol = 1e-13 * diam
    pieces = []
    s = (M[1] - A[1]) / (C[1] - A[1])
    Pphys = PA + s * (PC - PA)
    for (y0, y1, E1, E2, tri) in (
            (A[1], M[1], (A, M), (A, C), np.array([PA, PM, Pphys])),
            (M[1], C[1], (M, C), (A, C), np.array([PM, Pphys, PC]))):
        if y1 - y0 <= tol:
            continue
        L1, L2 = _line(*E1), _line(*E2)
        ym = 0.5 * (y0 + y1)
        lo, hi = (L1, L2) if _eval_line(L1, ym) <= _eval_line(L2, ym) else (L2, L1)
        pieces.append(Piece(float(y0), float(y1), lo, hi, tri))

    k = int(inflow[np.argmax(-bn[inflow])])
    i, j = [m for m in range(3) if m != k]
    xbar = _line(F[i], F[j])
    ya, yc = A[1], C[1]
    foot = [origin + _eval_line(xbar, yy) * e1 + yy * e2 for yy in (ya, yc)]
    shadow = np.array([V[k], foot[0], foot[1]])
    return CharacteristicFrame(V, b, speed, e1, e2, origin, diam, pieces, normals, areas,
                               inflow, k, xbar, shadow)


# ---------------------------------------------------------------------------
# residual data
# ---------------------------------------------------------------------------

def _as_poly(v, like):
    if isinstance(v, Poly):
        return v
    return Poly.const(float(v), like.dim, like.center, like.scale)


@dataclass(eq=False)
class LocalResidualData:
    """Polynomial data on one cell; b is a list of component polynomials."""

    u: Poly
    w: Poly
    f: Poly
    b: list
    c: Poly
    b_avg: np.ndarray
    d: float = 0.0

    def __post_init__(self):
        self.f = _as_poly(self.f, self.u)
        self.c = _as_poly(self.c, self.u)
        self.b = [_as_poly(bi, self.u) for bi in self.b]
        self.b_avg = np.atleast_1d(np.asarray(self.b_avg, dtype=float))

    @classmethod
    def build(cls, vertices, u, w, f, b, c):
        """Averages of b and div b are taken over the cell with given vertices."""
        bp = [_as_poly(bi, u) for bi in np.atleast_1d(b)] if not isinstance(b, Poly) else [b]
        bavg, d = cell_averages(vertices, bp)
        return cls(u, w, f, bp, c, bavg, d)

    def convect(self, p):
        """b~ . grad p as a polynomial."""
        out = self.b[0] * p.deriv(0)
        for i in range(1, len(self.b)):
            out = out + self.b[i] * p.deriv(i)
        return out

    @property
    def div_b(self):
        out = self.b[0].deriv(0)
        for i in range(1, len(self.b)):
            out = out + self.b[i].deriv(i)
        return out

    @property
    def mu(self):
        return self.w - self.u

    @property
    def lam(self):
        return self.convect(self.w) + self.c * self.w - self.f

    @property
    def gamma(self):
        mu = self.mu
        return self.lam - (self.convect(mu) + self.c * mu - self.d * mu)

    @property
    def gamma_direct(self):
        return self.convect(self.u) + self.c * self.u - self.f + self.d * self.mu


def cell_averages(vertices, b_polys):
    """(average of b, average of div b) over a simplex."""
    V = np.atleast_2d(np.asarray(vertices, dtype=float))
    n = V.shape[1]
    deg = max(p.degree for p in b_polys)
    ref, wts = simplex_rule(n, max(deg, 1))
    J = np.column_stack([V[k] - V[0] for k in range(1, n + 1)])
    X = V[0] + ref @ J.T
    W = wts * abs(np.linalg.det(J))
    vol = W.sum()
    bavg = np.array([W @ p(X) for p in b_polys]) / vol
    div = sum(p.deriv(i)(X) for i, p in enumerate(b_polys))
    return bavg, float(W @ div / vol)


def random_local_data(frame, rng, deg_u=1, deg_w=2, deg_f=1, deg_b=0, deg_c=0, amplitude=1.0):
    """Random polynomial data centred on the cell; convection averages to frame.b."""
    V = frame.vertices
    n = frame.dim
    center, scale = V.mean(axis=0), frame.diam
    P = lambda k: Poly.random(n, k, rng, center, scale, amplitude)
    b = []
    for i in range(n):
        bi = Poly.const(frame.b[i], n, center, scale)
        if deg_b > 0:
            pert = P(deg_b)
            pert.coef.pop((0,) * n, None)
            bi = bi + 0.3 * frame.speed * pert
        b.append(bi)
    bavg, d = cell_averages(V, b)
    # shift constants so that the average matches the frame direction exactly
    b = [bi + (frame.b[i] - bavg[i]) for i, bi in enumerate(b)]
    bavg, d = cell_averages(V, b)
    return LocalResidualData(P(deg_u), P(deg_w), P(deg_f), b, P(deg_c), bavg, d)


# ---------------------------------------------------------------------------
# lifts
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Lift:
    """A (piecewise) polynomial on K with its derivative along b."""

    frame: CharacteristicFrame
    kind: str
    value: object
    db: object
    degree: int

    def __call__(self, X):
        return self.value(X)


def _value_db(obj, frame, X):
    if isinstance(obj, Lift):
        return obj.value(X), obj.db(X)
    return obj(X), obj.directional(frame.b)(X)


def _degree(obj):
    return obj.degree


def _line_nodes(x0, x1, t):
    """Gauss nodes between x0 and x1, shape (N, nt)."""
    return x0[:, None] + t[None, :] * (x1 - x0)[:, None]


def exact_modified_lift(frame, data):
    """Riesz lift of v -> b_K(u,w;v) - (f,v) for the frame inner product."""
    s = frame.speed
    mu, gamma = data.mu, data.gamma
    dmu = mu.directional(frame.b)
    src = dmu + gamma
    deg = max(gamma.degree + 2, mu.degree + 1, src.degree)
    t, wt = gauss_legendre(max(2, gamma.degree // 2 + 2, src.degree // 2 + 1))

    def along(poly, x, y, Q):
        N, nt = Q.shape
        return poly(frame.to_physical(Q.ravel(), np.repeat(y, nt))).reshape(N, nt)

    def parts(X):
        x, y = frame.to_frame(X)
        xm, xp = frame.x_minus(y), frame.x_plus(y)
        r = np.maximum(xp - xm, 0.0)
        Qx = _line_nodes(xm, x, t)
        gx = along(gamma, x, y, Qx)
        lx = x - xm
        I1 = lx * (((x[:, None] - Qx) * gx) @ wt)
        Ix = lx * (gx @ wt)
        Qr = _line_nodes(xm, xp, t)
        Gam = r * (along(gamma, x, y, Qr) @ wt)
        avg = along(src, x, y, Qr) @ wt
        mup = mu(frame.to_physical(xp, y))
        return x, xm, I1, Ix, Gam, avg, mup

    def value(X):
        x, xm, I1, _, Gam, avg, mup = parts(X)
        return -I1 / s**2 + (mup / s + Gam / s**2) * (x - xm) + avg

    def db(X):
        _, _, _, Ix, Gam, _, mup = parts(X)
        return -Ix / s + mup + Gam / s

    return Lift(frame, "exact", value, db, deg)


def approximate_lift(frame, data):
    """Polynomial lift built from the residual traces at the foot map xbar_-."""
    s = frame.speed
    mu = data.mu
    tail = data.lam - (data.c - data.d) * mu
    deg = max(mu.degree + 1, tail.degree)

    def foot(X):
        x, y = frame.to_frame(X)
        xb = frame.x_bar(y)
        return x, xb, frame.to_physical(xb, y)

    def value(X):
        x, xb, P = foot(X)
        return mu(P) / s * (x - xb) + tail(P)

    def db(X):
        return mu(foot(X)[2])

    return Lift(frame, "approximate", value, db, deg)


def lift_to_poly(lift, degree=None):
    """Interpolate a lift that is polynomial on K (the approximate one)."""
    deg = lift.degree if degree is None else degree
    return Poly.fit(lift.value, lift.frame.vertices, deg)


def special_inner_product(frame, v, z):
    """<<v, z>> = (d_b v, d_b z)_K + int_{dK_-} v z r |b0.n| ds."""
    deg = _degree(v) + _degree(z)
    X, W = frame.volume_rule(deg)
    _, dv = _value_db(v, frame, X)
    _, dz = _value_db(z, frame, X)
    ys, wy = frame.inflow_rule(deg + 1)
    P = frame.inflow_points(ys)
    vv, _ = _value_db(v, frame, P)
    zz, _ = _value_db(z, frame, P)
    return float(W @ (dv * dz) + wy @ (vv * zz * frame.r(ys)))


def lift_norms(lift, frame=None):
    """(||R||^2_{H(b;K)}, |||R|||^2)."""
    frame = lift.frame if frame is None else frame
    deg = 2 * _degree(lift)
    X, W = frame.volume_rule(deg)
    v, dv = _value_db(lift, frame, X)
    ys, wy = frame.inflow_rule(deg + 1)
    vb, _ = _value_db(lift, frame, frame.inflow_points(ys))
    h2 = float(W @ (v**2 + dv**2))
    t2 = float(W @ dv**2 + wy @ (vb**2 * frame.r(ys)))
    return h2, t2


def lift_difference(a, b):
    """Lift representing a - b (same frame)."""
    return Lift(a.frame, f"{a.kind}-{b.kind}", lambda X: a.value(X) - b.value(X),
                lambda X: a.db(X) - b.db(X), max(a.degree, b.degree))


def modified_form(frame, u, w, v, b=None, c=0.0, d=0.0):
    """b_K(u, w; v) with frozen boundary convection frame.b.

    b is a list of polynomial components of b~ (default: frame.b), c is c~
    (polynomial or scalar) and d the cell constant for div b~.
    """
    n = frame.dim
    if b is None:
        b = [Poly.const(frame.b[i], n, u.center, u.scale) for i in range(n)]
    b = [_as_poly(bi, u) for bi in b]
    c = _as_poly(c, u)
    mu = w - u
    bu = b[0] * u.deriv(0)
    for i in range(1, n):
        bu = bu + b[i] * u.deriv(i)
    vol = bu + c * u + d * mu
    X, W = frame.volume_rule(vol.degree + v.degree)
    out = W @ (vol(X) * v(X))
    V = frame.vertices
    if n == 1:
        for k in range(2):
            P = V[[1 - k]]
            out += frame.b[0] * frame.normals[k, 0] * mu(P)[0] * v(P)[0]
        return float(out)
    t, wt = gauss_legendre(max(1, (mu.degree + v.degree) // 2 + 1))
    for k in range(3):
        i, j = [m for m in range(3) if m != k]
        P = V[i] + t[:, None] * (V[j] - V[i])
        out += (frame.b @ frame.normals[k]) * frame.areas[k] * (wt @ (mu(P) * v(P)))
    return float(out)


def data_form(frame, data, v):
    """b_K(u, w; v) - (f~, v)_K for LocalResidualData."""
    X, W = frame.volume_rule(data.f.degree + v.degree)
    return modified_form(frame, data.u, data.w, v, data.b, data.c, data.d) - float(W @ (data.f(X) * v(X)))


# ---------------------------------------------------------------------------
# norms of polynomials on K and on the enclosing simplex
# ---------------------------------------------------------------------------

def h_norm2(poly, frame, on_shadow=False):
    """||p||^2_{H(b;K)} (or on the enclosing simplex)."""
    rule = frame.shadow_rule if on_shadow else frame.volume_rule
    X, W = rule(2 * poly.degree)
    return float(W @ (poly(X) ** 2 + poly.directional(frame.b)(X) ** 2))


def h1_norm2(poly, frame, on_shadow=False, seminorm=False):
    rule = frame.shadow_rule if on_shadow else frame.volume_rule
    X, W = rule(2 * poly.degree)
    g = poly.grad(X)
    val = 0.0 if seminorm else W @ poly(X) ** 2
    return float(val + W @ (g**2).sum(axis=1))


def l2_norm2(poly, frame):
    X, W = frame.volume_rule(2 * poly.degree)
    return float(W @ poly(X) ** 2)


# ---------------------------------------------------------------------------
# per-cell lifts of a discrete trial pair
# ---------------------------------------------------------------------------

def local_data_on_cell(trial_fn, data, k):
    """LocalResidualData on fine cell k of the subgrid for a trial function."""
    pair = data.pair
    fine = pair.fine
    space = trial_fn.space
    V = fine.vertex_coords[k]
    pc = int(pair.parent[k])
    center, scale = V.mean(axis=0), float(fine.diameters[k])

    def fit(func, deg):
        return Poly.fit(func, V, deg, center, scale)

    u = fit(lambda X: space.evaluate(trial_fn.coeffs, np.full(len(X), pc), X)[0], space.m_u)
    w = fit(lambda X: space.evaluate(trial_fn.coeffs, np.full(len(X), pc), X)[1], space.m_w)
    f = fit(lambda X: data.f_tilde(np.full(len(X), pc), X), data.f.degree)
    c = fit(lambda X: data.c_tilde(np.full(len(X), pc), X), data.c.degree)
    b = [fit(lambda X, i=i: data.b_tilde(np.full(len(X), pc), X)[:, i], data.b.degree)
         for i in range(fine.dim)]
    return LocalResidualData(u, w, f, b, c, data.b_avg[k], float(data.d_avg[k]))


@dataclass(eq=False)
class CellLiftSummary:
    """Per fine cell squared norms of the exact lift, the approximate lift and their gap."""

    exact2: np.ndarray
    approx2: np.ndarray
    gap2: np.ndarray
    triple2: np.ndarray
    parent: np.ndarray

    def per_coarse(self, values, n_coarse):
        return np.bincount(self.parent, weights=values, minlength=n_coarse)


def cell_lifts(trial_fn, data, cells=None):
    """Exact and approximate lifts on every (or selected) fine cell."""
    fine = data.pair.fine
    cells = np.arange(fine.n_cells) if cells is None else np.asarray(cells)
    ex, ap, gap, tri = (np.zeros(len(cells)) for _ in range(4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CharacteristicWarning)
        for i, k in enumerate(cells):
            loc = local_data_on_cell(trial_fn, data, int(k))
            frame = build_frame(fine.vertex_coords[k], data.b_avg[k])
            R = exact_modified_lift(frame, loc)
            Ra = approximate_lift(frame, loc)
            ex[i], tri[i] = lift_norms(R)
            ap[i], _ = lift_norms(Ra)
            gap[i], _ = lift_norms(lift_difference(R, Ra))
    return CellLiftSummary(ex, ap, gap, tri, data.pair.parent[cells])
