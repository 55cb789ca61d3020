import dataclasses

import numpy as np
import pytest

from dpg_transport import driver as D, mesh as M
from dpg_transport.problem import DiscretizationConfig


def cfg_from(text, tmp_path, **run):
    cfg = D.parse_config(text)
    return cfg.replace(output_dir=str(tmp_path), **run)


def test_parse_scalar_rejects_other_symbols():
    assert float(D.parse_scalar("2*pi", 1)) == pytest.approx(2 * np.pi)
    with pytest.raises(D.ConfigError):
        D.parse_scalar("x + z", 2)
    with pytest.raises(D.ConfigError):
        D.parse_scalar("y", 1)
    with pytest.raises(D.ConfigError):
        D.parse_scalar("x +", 1)


def test_stock_problems_consistent():
    # f derived from u_exact satisfies the equation pointwise
    for name in ("smooth1d", "smooth2d", "linear1d", "linear2d"):
        p = D.stock_problem(name)
        X = np.random.default_rng(0).uniform(0, 1, (20, p.dim))
        lhs = np.einsum("ni,ni->n", p.b_at(X), p.grad_u_exact(X)) + p.c_at(X) * p.u_exact(X)
        np.testing.assert_allclose(lhs, p.f_at(X), atol=1e-12)
    jump = D.stock_problem("jump1d")
    assert jump.f_breaks == pytest.approx((1 / np.pi,))
    assert jump.f_at(np.array([[0.2], [0.5]])) == pytest.approx([1.0, 2.0])


def test_explicit_problem_and_overrides():
    p = D.make_problem({"stock": "smooth1d", "c": "2"})
    assert p.c_at(np.array([[0.3]]))[0] == 2.0
    q = D.make_problem({"dim": "2", "domain": "0, 2, 0, 1", "b": "1, x", "f": "1"})
    assert not q.constant_b
    assert q.domain == (0.0, 2.0, 0.0, 1.0)


@pytest.mark.parametrize("spec", [
    {"stock": "nope"},
    {"dim": "3", "domain": "0,1", "b": "1"},
    {"dim": "1", "domain": "0", "b": "1"},
    {"dim": "1", "domain": "0,1", "b": "1, 2"},
    {"dim": "1", "domain": "0,1"},
    {"stock": "smooth1d", "colour": "red"},
    {"dim": "1", "domain": "0,1", "b": "0"},
])
def test_make_problem_rejects(spec):
    with pytest.raises(D.ConfigError):
        D.make_problem(spec)


@pytest.mark.parametrize("text", [
    "[run]\nmode = adaptive\n",
    "[problem]\nstock = smooth1d\n[extra]\na = 1\n",
    "[problem]\nstock = smooth1d\n[run]\nspeed = 3\n",
    "[problem]\nstock = smooth1d\n[run]\nmode = sideways\n",
    "[problem]\nstock = smooth1d\n[run]\ninfsup = maybe\n",
    "[problem]\nstock = smooth1d\n[discretization]\nm_u = one\n",
    "[problem]\nstock = smooth1d\n[discretization]\nm_v = 1\n",
    "[problem]\nstock = smooth1d\n[discretization]\ntheta = 0\n",
    "not an ini file",
])
def test_parse_config_rejects(text):
    with pytest.raises(D.ConfigError):
        D.parse_config(text)


def test_parse_config_values():
    cfg = D.parse_config("[problem]\nstock = jump1d\n[discretization]\nm_u = 1\ndownwind_depth = none\n"
                         "[run]\nmode = uniform\ninfsup = yes\nresolution = 3  # inline\n")
    assert cfg.disc == DiscretizationConfig(m_u=1)
    assert cfg.run.infsup is True and cfg.run.resolution == 3 and cfg.run.mode == "uniform"
    assert cfg.problem.name == "jump1d"
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.run.seed = 3


def test_load_config_missing_file(tmp_path):
    with pytest.raises(D.ConfigError):
        D.load_config(tmp_path / "absent.ini")


def test_csv_header_and_rows():
    assert D.convergence_csv([]) == ",".join(D.CSV_HEADER) + "\n"
    rec = D.ConvergenceRecord(0, 12, 0.5, 0.25, 0.0)
    lines = D.convergence_csv([rec]).splitlines()
    assert len(lines) == 2
    assert lines[1].split(",")[:3] == ["0", "12", "5.0000000000e-01"]
    assert lines[1].split(",")[5] == "nan"


JUMP = "[problem]\nstock = jump1d\n[discretization]\nm_u = 1\n[run]\nmax_iterations = 6\n"


def test_adaptive_1d_reduces_eta_and_writes_files(tmp_path):
    res = D.run_adaptive(cfg_from(JUMP, tmp_path))
    recs = res.records
    assert len(recs) == 6
    eta = [r.eta for r in recs]
    assert all(b < a for a, b in zip(eta, eta[1:]))
    ndof = [r.ndof for r in recs]
    assert all(b > a for a, b in zip(ndof, ndof[1:]))
    assert all(r.marked > 0 for r in recs[:-1]) and recs[-1].marked == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "convergence.csv" in names and "indicators_5.csv" in names and "mesh_0.txt" in names
    V, C, data = M.load_mesh(open(tmp_path / "mesh_1.txt"))
    assert len(C) == res.meshes[1].n_cells
    np.testing.assert_allclose(data["eta2"], res.reports[1].eta2, rtol=1e-10)


def test_adaptive_runs_are_deterministic(tmp_path):
    a = D.run_adaptive(cfg_from(JUMP, tmp_path / "a", max_iterations=3))
    b = D.run_adaptive(cfg_from(JUMP, tmp_path / "b", max_iterations=3))
    assert D.convergence_csv(a.records) == D.convergence_csv(b.records)
    for name in ("convergence.csv", "indicators_2.csv", "mesh_2.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_source_stops_immediately(tmp_path):
    cfg = cfg_from("[problem]\nstock = zero1d\n", tmp_path)
    res = D.run_adaptive(cfg)
    assert len(res.records) == 1
    assert res.records[0].eta <= 1e-12


def test_adaptive_2d_keeps_downstream_grading(tmp_path):
    cfg = cfg_from("[problem]\nstock = smooth2d\n[run]\nresolution = 2\nmax_iterations = 4\n", tmp_path,
                   write_files=False)
    res = D.run_adaptive(cfg)
    assert len(res.records) == 4
    assert res.grading_violations == [0, 0, 0]
    assert all(m.is_conforming() for m in res.meshes)
    ndof = [r.ndof for r in res.records]
    assert all(b > a for a, b in zip(ndof, ndof[1:]))


def test_uniform_rate(tmp_path):
    cfg = cfg_from("[problem]\nstock = smooth1d\n[discretization]\nm_u = 1\nm_w = 2\nm_v = 4\n"
                   "[run]\nmode = uniform\nuniform_levels = 4\n", tmp_path, write_files=False)
    recs = D.run_uniform(cfg).records
    err = np.array([r.err_u for r in recs])
    rates = np.log2(err[:-1] / err[1:])
    assert np.all(np.abs(rates - 2) <= 0.2)


def test_refinement_plan_and_depths():
    p = D.stock_problem("smooth2d")
    mesh = M.build_root_mesh(p.domain, 2)
    disc = DiscretizationConfig(refine_depth=2, downwind_depth=1)
    plan = D.refinement_plan(p, disc, mesh, [0])
    assert plan[0] == 2
    assert all(v == 1 for k, v in plan.items() if k != 0)
    new = D.refine_with_depths(mesh, plan)
    anc = M.ancestor_map(new, mesh)
    assert (new.generation[anc == 0] - mesh.generation[0]).min() >= 2


def test_gram_fault_raises_solver_error():
    from dpg_transport.linalg import SolverError
    p = D.stock_problem("smooth1d")
    with pytest.raises(SolverError):
        D.solve_step(p, DiscretizationConfig(), M.build_root_mesh(p.domain, 2), "pg", "gram_asymmetry")


def test_verify_report(tmp_path):
    cfg = cfg_from("[problem]\nstock = smooth2d\n[run]\nresolution = 2\n", tmp_path)
    results = D.run_verify(cfg)
    assert all(r.status == "PASS" for r in results), D.verify_text(results)
    text = (tmp_path / "verify.txt").read_text()
    assert text.splitlines()[-1].startswith("SUMMARY 13/13")
    again = D.run_verify(cfg.replace(output_dir=str(tmp_path / "b")))
    assert D.verify_text(again) == text


def test_verify_zero_problem_skips(tmp_path):
    results = D.run_verify(cfg_from("[problem]\nstock = zero1d\n", tmp_path, write_files=False))
    assert not any(r.status == "FAIL" for r in results)
    assert any(r.status == "SKIP" for r in results)


def test_conjecture_table(tmp_path):
    text = ("[problem]\nstock = smooth1d\n[run]\nresolution = 8\nconjecture_max_depth = 3\n"
            "conjecture_scenarios = smooth1d, zero1d\n")
    rows, excluded = D.run_conjecture(cfg_from(text, tmp_path))
    assert [r.r for r in rows] == [1, 2, 3]
    assert ("zero1d", "F vanishes") in excluded or ("zero1d", "no Type-II cell marked") in excluded
    xs = [r.xi for r in rows]
    assert all(b <= a + 1e-12 for a, b in zip(xs, xs[1:]))
    csv_text = (tmp_path / "conjecture.csv").read_text()
    assert csv_text.splitlines()[0] == "scenario,r,xi,w_ratio,n_free"
    assert len(csv_text.splitlines()) == 4
