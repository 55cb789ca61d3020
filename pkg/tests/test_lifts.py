import warnings

import numpy as np
import pytest
import shapely
from hypothesis import given, settings, strategies as st

from dpg_transport import dpg, lifts as L, mesh as M
from dpg_transport.poly import Poly
from dpg_transport.problem import DiscretizationConfig, TransportProblem, project_data
from dpg_transport.spaces import TestSpace, TrialSpace

TRI = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def quiet_frame(V, b):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", L.CharacteristicWarning)
        return L.build_frame(V, b)


def random_cell(rng, dim, scale=0.3):
    while True:
        V = rng.standard_normal((dim + 1, dim)) * scale
        if dim == 1 or abs(np.linalg.det(V[1:] - V[0])) > 0.05 * scale**2:
            return V


def const_data(V, mu, lam, dim=1):
    """u = -mu, w = 0, f = -lam with b along the first axis, c = 0."""
    center, scale = V.mean(axis=0), 1.0
    P = lambda v: Poly.const(v, dim, center, scale)
    return L.LocalResidualData.build(V, P(-mu), P(0.0), P(-lam), [P(1.0)] + [P(0.0)] * (dim - 1), P(0.0))


# -- frames -------------------------------------------------------------------

def test_frame_1d():
    h = 0.3
    fr = L.build_frame(np.array([[0.0], [h]]), [1.0])
    assert fr.x_minus(0.0) == 0.0 and fr.x_plus(0.0) == pytest.approx(h)
    assert fr.r(0.0) == pytest.approx(h)
    assert fr.single_inflow


def test_frame_single_inflow_triangle():
    fr = quiet_frame(TRI, [1.0, 0.0])
    assert fr.single_inflow
    for y in (0.1, 0.5, 0.9):
        (x, yy), = np.column_stack(fr.to_frame([[0.0, y]]))
        assert fr.x_minus(yy) == pytest.approx(x, abs=1e-14)
        assert fr.r(yy) == pytest.approx(1 - y)
    assert shapely.Polygon(fr.shadow).equals(shapely.Polygon(TRI))


def test_frame_two_inflow_faces():
    fr = quiet_frame(TRI, np.array([1.0, 1.0]) / np.sqrt(2))
    assert not fr.single_inflow
    K, Kbar = shapely.Polygon(TRI), shapely.Polygon(fr.shadow)
    assert Kbar.area > K.area
    assert Kbar.buffer(1e-12).contains(K)
    np.testing.assert_allclose(sorted(map(tuple, fr.shadow)), [(0, -1), (0, 1), (1, 0)], atol=1e-14)


def test_frame_rejects_degenerate_and_warns():
    with pytest.raises(ValueError):
        L.build_frame(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), [1.0, 0.0])
    with pytest.raises(ValueError):
        L.build_frame(TRI, [0.0, 0.0])
    with pytest.warns(L.CharacteristicWarning):
        L.build_frame(TRI, [0.5, 0.0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_frame_invariants(seed):
    rng = np.random.default_rng(seed)
    V = random_cell(rng, 2)
    fr = quiet_frame(V, rng.standard_normal(2))
    ys = np.concatenate([np.linspace(p.y0, p.y1, 7) for p in fr.pieces])
    assert np.all(fr.x_plus(ys) - fr.x_minus(ys) >= -1e-12)
    # K lies in the shadow simplex: barycentric test (vertices of K often sit
    # exactly on its boundary, where polygon clipping is not robust)
    S = fr.shadow
    lam = np.linalg.solve(np.vstack([S.T, np.ones(3)]), np.vstack([V.T, np.ones(3)]))
    assert lam.min() >= -1e-12
    area = lambda T: 0.5 * abs(np.linalg.det(T[1:] - T[0]))
    assert (abs(area(S) - area(V)) <= 1e-10 * area(V)) == fr.single_inflow
    # pieces tile K
    assert sum(area(p.triangle) for p in fr.pieces) == pytest.approx(area(V))
    # the foot map agrees with x_- on the chosen inflow face
    i, j = [m for m in range(3) if m != fr.shadow_face]
    for P in (V[i], V[j], 0.5 * (V[i] + V[j])):
        x, y = fr.to_frame(P[None, :])
        assert fr.x_bar(y)[0] == pytest.approx(x[0], abs=1e-12)
    assert np.isfinite(fr.xbar_slope)


# -- inner product and lifts ---------------------------------------------------

def test_special_inner_product_examples():
    h = 0.25
    V = np.array([[0.0], [h]])
    fr = L.build_frame(V, [1.0])
    one = Poly.const(1.0, 1)
    x = Poly.coordinate(0, 1)
    assert L.special_inner_product(fr, one, one) == pytest.approx(h)
    assert L.special_inner_product(fr, x, x) == pytest.approx(h)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), dim=st.sampled_from([1, 2]))
def test_special_inner_product_bilinear_symmetric(seed, dim):
    rng = np.random.default_rng(seed)
    V = random_cell(rng, dim)
    fr = quiet_frame(V, rng.standard_normal(dim))
    c, s = V.mean(axis=0), fr.diam
    p, q, z = (Poly.random(dim, 3, rng, c, s) for _ in range(3))
    a = float(rng.standard_normal())
    ip = lambda v, w: L.special_inner_product(fr, v, w)
    scale = abs(ip(p, p)) + abs(ip(q, q)) + abs(ip(z, z))
    assert abs(ip(p, z) - ip(z, p)) <= 1e-13 * scale
    assert abs(ip(p + a * q, z) - ip(p, z) - a * ip(q, z)) <= 1e-13 * scale


def test_lifts_closed_form_1d():
    h = 0.1
    V = np.array([[0.0], [h]])
    fr = L.build_frame(V, [1.0])
    data = const_data(V, 1.0, 2.0)
    X = np.linspace(0, h, 9)[:, None]
    x = X[:, 0]
    np.testing.assert_allclose(L.exact_modified_lift(fr, data)(X), -x**2 + (1 + 2 * h) * x + 2, atol=1e-14)
    np.testing.assert_allclose(L.approximate_lift(fr, data)(X), x + 2, atol=1e-14)
    zero = const_data(V, 0.0, 0.0)
    assert np.all(L.exact_modified_lift(fr, zero)(X) == 0)
    assert np.all(L.approximate_lift(fr, zero)(X) == 0)
    assert L.lift_norms(L.exact_modified_lift(fr, zero)) == (0.0, 0.0)


def test_lift_norms_constant():
    h = 0.4
    fr = L.build_frame(np.array([[0.0], [h]]), [1.0])
    h2, t2 = L.lift_norms(Poly.const(1.0, 1), fr)
    assert h2 == pytest.approx(h) and t2 == pytest.approx(h)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), dim=st.sampled_from([1, 2]), deg_b=st.integers(0, 1))
def test_lift_variational_identity(seed, dim, deg_b):
    rng = np.random.default_rng(seed)
    V = random_cell(rng, dim)
    fr = quiet_frame(V, rng.standard_normal(dim))
    data = L.random_local_data(fr, rng, 1, 2, 1, deg_b=deg_b, deg_c=1)
    R = L.exact_modified_lift(fr, data)
    for _ in range(10):
        v = Poly.random(dim, int(rng.integers(0, 4)), rng, V.mean(axis=0), fr.diam)
        rhs = L.data_form(fr, data, v)
        lhs = L.special_inner_product(fr, R, v)
        # relative to |rhs|, with a roundoff floor from the Cauchy-Schwarz bound
        cs = np.sqrt(L.special_inner_product(fr, R, R) * L.special_inner_product(fr, v, v))
        assert abs(lhs - rhs) <= 1e-10 * abs(rhs) + 1e-13 * cs


def test_gamma_identity():
    rng = np.random.default_rng(7)
    for dim in (1, 2):
        V = random_cell(rng, dim)
        fr = quiet_frame(V, rng.standard_normal(dim))
        data = L.random_local_data(fr, rng, 2, 2, 1, deg_b=1, deg_c=1)
        X = V.mean(axis=0) + 0.1 * rng.standard_normal((20, dim))
        np.testing.assert_allclose(data.gamma(X), data.gamma_direct(X), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), dim=st.sampled_from([1, 2]))
def test_strong_form_along_characteristics(seed, dim):
    rng = np.random.default_rng(seed)
    V = random_cell(rng, dim)
    fr = quiet_frame(V, rng.standard_normal(dim))
    data = L.random_local_data(fr, rng, 1, 2, 2, deg_c=1)
    R = L.exact_modified_lift(fr, data)
    pieces = fr.pieces or [None]
    for p in pieces:
        y = 0.0 if p is None else rng.uniform(p.y0, p.y1)
        xm, xp = fr.x_minus(y), fr.x_plus(y)
        deg = data.gamma.degree + 2
        xs = xm + (xp - xm) * (0.5 - 0.5 * np.cos(np.pi * (np.arange(deg + 2) + 0.5) / (deg + 2)))
        P = fr.to_physical(xs, np.full(len(xs), y))
        coef = np.polynomial.polynomial.polyfit(xs - xm, R.db(P), deg)
        d2 = fr.speed * np.polynomial.polynomial.polyval(xs - xm, np.polynomial.polynomial.polyder(coef))
        g = data.gamma(P)
        assert np.max(np.abs(-d2 - g)) <= 1e-8 * max(1.0, np.abs(g).max())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), dim=st.sampled_from([1, 2]))
def test_approximate_lift_derivative(seed, dim):
    rng = np.random.default_rng(seed)
    V = random_cell(rng, dim)
    fr = quiet_frame(V, rng.standard_normal(dim))
    data = L.random_local_data(fr, rng, 2, 2, 1)
    Ra = L.approximate_lift(fr, data)
    X = V.mean(axis=0) + 0.05 * rng.standard_normal((15, dim))
    x, y = fr.to_frame(X)
    foot = fr.to_physical(fr.x_bar(y), y)
    np.testing.assert_allclose(Ra.db(X), data.mu(foot), atol=1e-12)
    # the difference quotient along b agrees with db
    eps = 1e-6
    fd = (Ra(X + eps * fr.b) - Ra(X - eps * fr.b)) / (2 * eps)
    np.testing.assert_allclose(fd, Ra.db(X), atol=1e-6 * max(1, np.abs(Ra.db(X)).max()))


# -- modified form -------------------------------------------------------------

def _volume_form(fr, u, w, v, b, c):
    """int (c u + b.grad w) v + (w - u) b.grad v for constant b."""
    X, W = fr.volume_rule(u.degree + w.degree + v.degree + 2)
    bw = w.directional(b)(X)
    bv = v.directional(b)(X)
    return float(W @ ((c * u(X) + bw) * v(X) + (w(X) - u(X)) * bv))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), dim=st.sampled_from([1, 2]))
def test_modified_form_matches_volume_form(seed, dim):
    rng = np.random.default_rng(seed)
    V = random_cell(rng, dim)
    b = rng.standard_normal(dim)
    fr = quiet_frame(V, b)
    c0, s = V.mean(axis=0), fr.diam
    u, w, v = (Poly.random(dim, k, rng, c0, s) for k in (1, 2, 3))
    c = 0.7
    a = L.modified_form(fr, u, w, v, c=c)
    ref = _volume_form(fr, u, w, v, b, c)
    assert a == pytest.approx(ref, rel=1e-12, abs=1e-13)
    # u = w: the form reduces to the volume integral of (b.grad u + c u) v
    X, W = fr.volume_rule(6)
    same = float(W @ ((u.directional(b)(X) + c * u(X)) * v(X)))
    assert L.modified_form(fr, u, u, v, c=c) == pytest.approx(same, rel=1e-12, abs=1e-13)
    # v = 1, u = 0, c = 0: only the boundary flux of w survives
    one = Poly.const(1.0, dim, c0, s)
    zero = Poly.const(0.0, dim, c0, s)
    flux = L.modified_form(fr, zero, w, one)
    assert flux == pytest.approx(float(W @ w.directional(b)(X)), rel=1e-12, abs=1e-13)


# -- estimates -------------------------------------------------------------------

def test_norm_closeness_bound():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        dim = int(rng.integers(1, 3))
        V = random_cell(rng, dim, rng.uniform(0.05, 0.5))
        fr = quiet_frame(V, rng.standard_normal(dim))
        p = Poly.random(dim, int(rng.integers(0, 4)), rng, V.mean(axis=0), fr.diam)
        h2, t2 = L.lift_norms(p, fr)
        bound = fr.diam / fr.speed * h2
        assert abs(h2 - t2) <= bound * (1 + 1e-12)
        worst = max(worst, abs(h2 - t2) / bound)
    assert worst > 0


def _shrinking_gap(dim, rng):
    b = np.array([1.0, 0.4])[:dim]
    ref = np.array([[0.0], [1.0]]) if dim == 1 else np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 1.0]])
    x0 = np.full(dim, 0.2)
    polys = lambda deg: Poly.random(dim, deg, rng, x0, 1.0)
    u, w, f = polys(1), polys(2), polys(1)
    c = polys(0)
    hs, ratios = [], []
    for h in 0.5 ** np.arange(2, 7):
        V = x0 + h * ref
        fr = L.build_frame(V, b, warn=False)
        bp = [Poly.const(bi, dim, x0, 1.0) for bi in b]
        data = L.LocalResidualData.build(V, u, w, f, bp, c)
        gap2, _ = L.lift_norms(L.lift_difference(L.exact_modified_lift(fr, data), L.approximate_lift(fr, data)))
        mu, lam = data.mu, data.lam
        den = (np.sqrt(L.h_norm2(mu, fr, True)) + np.sqrt(L.h_norm2(lam, fr, True))
               + np.sqrt(L.h1_norm2(mu, fr, True)))
        hs.append(fr.diam)
        ratios.append(np.sqrt(gap2) / den)
    return np.polyfit(np.log(hs), np.log(ratios), 1)[0]


@pytest.mark.parametrize("dim", [1, 2])
def test_gap_scales_linearly(dim):
    rng = np.random.default_rng(5 + dim)
    for _ in range(5):
        assert abs(_shrinking_gap(dim, rng) - 1.0) <= 0.2


def test_coercivity_surrogate():
    rng = np.random.default_rng(3)
    consts = []
    for _ in range(100):
        dim = int(rng.integers(1, 3))
        V = random_cell(rng, dim, 0.2)
        b = rng.standard_normal(dim)
        b *= max(1.0, 1.1 * np.max(np.linalg.norm(V[:, None] - V[None], axis=2))) / np.linalg.norm(b)
        fr = L.build_frame(V, b)
        assert fr.diam_ok
        data = L.random_local_data(fr, rng, 1, 2, 1)
        Ra = L.approximate_lift(fr, data)
        a2, _ = L.lift_norms(Ra)
        mu, lam = data.mu, data.lam
        lhs = a2 + fr.diam**2 * (L.h1_norm2(mu, fr, True, seminorm=True) + L.h1_norm2(lam, fr, True, seminorm=True))
        rhs = L.l2_norm2(lam, fr) + L.l2_norm2(mu, fr)
        consts.append(lhs / rhs)
    print(f"coercivity surrogate constant: {min(consts):.3e}")
    assert min(consts) > 1e-2


def test_global_gap_decreases_with_subgrid_depth():
    prob = TransportProblem(2, (0, 1, 0, 1), [1.0, 0.5], 1.0, lambda X: np.exp(X[:, 0]) + X[:, 1])
    mesh = M.build_root_mesh(prob.domain, 2)
    trial = TrialSpace(mesh, 1, 1, M.classify_faces(mesh, prob.b))
    x = np.random.default_rng(0).standard_normal(trial.dim)
    gaps = []
    for depth in (1, 2, 3):
        cfg = DiscretizationConfig(subgrid_depth=depth)
        pair = M.make_subgrid(mesh, depth)
        data = project_data(prob, pair, cfg)
        sys = dpg.assemble(prob, data, trial, TestSpace(pair.fine, cfg.m_v), pair)
        fn = dpg.solve_pg(sys)
        fn.coeffs[:] += 0.1 * x
        summary = L.cell_lifts(fn, data)
        gaps.append(summary.per_coarse(summary.gap2, mesh.n_cells) /
                    summary.per_coarse(summary.exact2, mesh.n_cells))
    for a, b in zip(gaps, gaps[1:]):
        assert a.max() > b.max()
