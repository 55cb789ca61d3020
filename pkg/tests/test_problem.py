import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpg_transport import mesh as M
from dpg_transport.problem import (DiscretizationConfig, TransportProblem, data_oscillation, data_rule,
                                   evaluate, project_data)


def _pair(dim=1, res=2, depth=1):
    dom = (0, 1) if dim == 1 else (0, 1, 0, 1)
    return M.make_subgrid(M.build_root_mesh(dom, res), depth)


def test_problem_rejects_bad_b():
    with pytest.raises(ValueError):
        TransportProblem(1, (0, 1), [0.0])
    with pytest.raises(ValueError):
        TransportProblem(2, (0, 1, 0, 1), [1.0])
    with pytest.raises(ValueError):
        TransportProblem(2, (0, 1), [1.0, 0.0])


def test_min_speed():
    p = TransportProblem(2, (0, 1, 0, 1), lambda X: np.column_stack([1 + X[:, 0], 0 * X[:, 1]]))
    assert p.min_speed(M.build_root_mesh(p.domain, 2)) == pytest.approx(1.0)


def test_config_constraints():
    DiscretizationConfig().validate(adaptive=True)
    cfg = DiscretizationConfig(m_u=1, m_w=2, m_v=2)
    assert any("m_v" in e for e in cfg.errors())
    assert any("m_w <= m_u + 1" in e for e in DiscretizationConfig(m_u=0, m_w=2, m_v=4).errors(adaptive=True))
    assert DiscretizationConfig(m_u=0, m_w=2, m_v=4).errors(adaptive=False) == []
    for bad in (dict(theta=0.0), dict(theta=1.5), dict(m_w=0)):
        with pytest.raises(ValueError):
            DiscretizationConfig(**bad).validate()
    with pytest.raises(ValueError):
        DiscretizationConfig(beta=0.3).validate(adaptive=True)
    assert DiscretizationConfig(refine_depth=3).downwind == 3
    assert DiscretizationConfig(refine_depth=3, downwind_depth=1).downwind == 1


@settings(max_examples=40, deadline=None)
@given(m_u=st.integers(0, 3), m_w=st.integers(1, 4), m_b=st.integers(0, 2), m_c=st.integers(0, 2),
       m_f=st.integers(0, 4))
def test_mv_minimum_formula(m_u, m_w, m_b, m_c, m_f):
    cfg = DiscretizationConfig(m_u=m_u, m_w=m_w, m_b=m_b, m_c=m_c, m_f=m_f)
    need = max(m_w + max(m_c, 1, m_b - 1), m_u + max(m_c, 1), m_f, max(m_u, m_w) + 1)
    assert cfg.m_v_min == need


def test_polynomial_data_is_kept():
    pair = _pair()
    prob = TransportProblem(1, (0, 1), 1.0, 2.0, lambda X: 3 * X[:, 0] - 1)
    data = project_data(prob, pair, DiscretizationConfig(m_f=1))
    X = np.linspace(0, 1, 7)[:, None]
    cells = np.minimum((X[:, 0] * 2).astype(int), 1)
    np.testing.assert_allclose(data.f_tilde(cells, X), 3 * X[:, 0] - 1, atol=1e-13)
    np.testing.assert_allclose(data.b_avg, 1.0)
    np.testing.assert_allclose(data.d_avg, 0.0)
    assert data_oscillation(prob, data) <= 1e-13


def test_linear_b_average_1d():
    h = 0.5
    pair = M.make_subgrid(M.build_root_mesh((0, 1), 2), 0)
    prob = TransportProblem(1, (0, 1), lambda X: X[:, :1] + 1.0)
    data = project_data(prob, pair, DiscretizationConfig(m_b=1, m_v=4))
    left = int(np.argmin(pair.fine.centroids[:, 0]))
    assert data.b_avg[left, 0] == pytest.approx(1 + h / 2)
    np.testing.assert_allclose(data.d_avg, 1.0)


def test_oscillation_x_squared():
    pair = M.make_subgrid(M.build_root_mesh((0, 1), 1), 0)
    prob = TransportProblem(1, (0, 1), 1.0, 0.0, lambda X: X[:, 0] ** 2)
    data = project_data(prob, pair, DiscretizationConfig(m_f=1))
    assert data_oscillation(prob, data) == pytest.approx(1 / np.sqrt(180), rel=1e-10)


def test_evaluate_examples():
    prob = TransportProblem(2, (0, 1, 0, 1), [1.0, 0.0], 0.0, 1.0)
    np.testing.assert_allclose(evaluate(prob, 0, [[0.3, 0.7]])["b"], [[1.0, 0.0]])
    p1 = TransportProblem(1, (0, 1), 1.0, 0.0, lambda X: 2 * X[:, 0])
    pair1 = M.make_subgrid(M.build_root_mesh((0, 1), 1), 0)
    d = project_data(p1, pair1, DiscretizationConfig(m_f=1))
    assert evaluate(d, 0, [[0.25]])["f"][0] == pytest.approx(0.5)
    with pytest.raises(IndexError):
        evaluate(d, 5, [[0.25]])


def test_projection_orthogonality_and_average_consistency():
    pair = _pair(dim=2, res=2, depth=1)
    prob = TransportProblem(2, (0, 1, 0, 1), lambda X: np.column_stack([1 + X[:, 1] ** 2, np.sin(X[:, 0])]),
                            0.5, lambda X: np.exp(X[:, 0] * X[:, 1]))
    cfg = DiscretizationConfig(m_b=1, m_f=2, m_v=4)
    data = project_data(prob, pair, cfg)
    mesh = pair.coarse
    X, W = data_rule(mesh, 14, 2)
    m, nq, _ = X.shape
    cells = np.repeat(np.arange(m), nq)
    Xf = X.reshape(-1, 2)
    r = prob.f_at(Xf) - data.f_tilde(cells, Xf)
    for p in (lambda x: 1 + 0 * x[:, 0], lambda x: x[:, 0], lambda x: x[:, 0] * x[:, 1], lambda x: x[:, 1] ** 2):
        ip = np.bincount(cells, weights=W.reshape(-1) * r * p(Xf), minlength=m)
        assert np.abs(ip).max() <= 1e-6 * np.abs(W.reshape(-1) * r).sum()
    # cell means of b~ and div b~ on the subgrid with a much finer independent rule
    fine = pair.fine
    Xs, Ws = data_rule(fine, 8, 2)
    mf, nq2, _ = Xs.shape
    pc = np.repeat(pair.parent, nq2)
    vals = data.b_tilde(pc, Xs.reshape(-1, 2)).reshape(mf, nq2, 2)
    avg = np.einsum("cq,cqk->ck", Ws, vals) / fine.measures[:, None]
    np.testing.assert_allclose(avg, data.b_avg, rtol=1e-13, atol=1e-14)
    div = data.div_b(pc, Xs.reshape(-1, 2)).reshape(mf, nq2)
    np.testing.assert_allclose(np.einsum("cq,cq->c", Ws, div) / fine.measures, data.d_avg, atol=1e-13)


def test_oscillation_decreases_under_refinement():
    # constant b, smooth c and f: the f and c terms only shrink on nested meshes
    prob = TransportProblem(1, (0, 1), 1.0, lambda X: 1 + np.sin(3 * X[:, 0]), lambda X: np.exp(X[:, 0]))
    cfg = DiscretizationConfig()
    m = M.build_root_mesh((0, 1), 2)
    prev = np.inf
    for _ in range(5):
        osc = data_oscillation(prob, project_data(prob, M.make_subgrid(m, 0), cfg))
        assert osc <= prev * (1 + 1e-12)
        prev = osc
        m = M.uniform_refine(m)


def test_scaled_b_term_can_grow():
    # b = 1 + x^2 with m_b = 0 and f = 1: the right cell gives
    # (b(1) - mean b) / h = 0.8333 for h = 1/2 and 0.9167 for h = 1/4
    prob = TransportProblem(1, (0, 1), lambda X: 1 + X[:, :1] ** 2, 0.0, 1.0)
    cfg = DiscretizationConfig()
    vals = []
    for res in (2, 4):
        m = M.build_root_mesh((0, 1), res)
        vals.append(data_oscillation(prob, project_data(prob, M.make_subgrid(m, 0), cfg)))
    np.testing.assert_allclose(vals, [5 / 6, 11 / 12], rtol=1e-12)
