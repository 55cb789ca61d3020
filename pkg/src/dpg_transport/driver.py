"""Experiment configuration, the adaptive loop, invariant suites and reports.

Config files are INI documents with three sections:

    [problem]        stock name and/or dim, domain, b, c, f, u_exact, f_breaks
    [discretization] fields of DiscretizationConfig
    [run]            mode, resolution, stopping rule, output and seed

Scalar fields are expressions in x and y parsed with sympy; vectors are
comma separated. When f is omitted but u_exact is given, f is derived as
b.grad u + c u.
"""
import configparser
import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
import sympy as sym
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

from . import dpg, estimator, lifts, mesh as meshmod
from .linalg import BlockDiagonal, SolverError
from .poly import Poly
from .problem import DiscretizationConfig, TransportProblem, data_oscillation, project_data
from .spaces import TestSpace, TrialFunction, TrialSpace

MODES = ("adaptive", "uniform", "verify", "conjecture")
CSV_HEADER = ["iter", "ndof", "eta", "rdelta", "osc", "err_u", "err_w", "marked", "nu_obs", "gamma_infsup"]


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


# ---------------------------------------------------------------------------
# expressions and problems
# ---------------------------------------------------------------------------

_X, _Y = sym.symbols("x y", real=True)
_LOCALS = {"x": _X, "y": _Y, "pi": sym.pi, "e": sym.E, "exp": sym.exp, "sin": sym.sin,
           "cos": sym.cos, "tanh": sym.tanh, "sqrt": sym.sqrt, "log": sym.log,
           "Heaviside": sym.Heaviside, "Max": sym.Max, "Min": sym.Min, "Abs": sym.Abs,
           "Piecewise": sym.Piecewise}


def parse_scalar(text, dim):
    try:
        expr = parse_expr(str(text), local_dict=dict(_LOCALS), transformations=standard_transformations,
                          global_dict={"__builtins__": {}, "Integer": sym.Integer, "Float": sym.Float,
                                       "Rational": sym.Rational, "Symbol": sym.Symbol})
    except Exception as exc:  # sympy raises a zoo of types here
        raise ConfigError(f"cannot parse expression {text!r}: {exc}") from None
    allowed = {_X} if dim == 1 else {_X, _Y}
    extra = expr.free_symbols - allowed
    if extra:
        raise ConfigError(f"unknown symbols {sorted(map(str, extra))} in {text!r}")
    return expr


def _split(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _numeric(expr, dim):
    """Callable X (N, n) -> (N,) for a sympy expression, or a float for constants."""
    if not expr.free_symbols:
        return float(expr)
    f = sym.lambdify((_X, _Y), expr, modules="numpy")

    def fn(X):
        X = np.atleast_2d(X)
        y = X[:, 1] if dim > 1 else np.zeros(len(X))
        return np.broadcast_to(np.asarray(f(X[:, 0], y), dtype=float), (len(X),)).copy()
    return fn


def _vector(exprs, dim):
    if all(not e.free_symbols for e in exprs):
        return [float(e) for e in exprs]
    comps = [_numeric(e, dim) for e in exprs]

    def fn(X):
        X = np.atleast_2d(X)
        return np.column_stack([c(X) if callable(c) else np.full(len(X), c) for c in comps])
    return fn


STOCK = {
    "smooth1d": dict(dim="1", domain="0, 1", b="1", c="1", f="1", u_exact="1 - exp(-x)"),
    "jump1d": dict(dim="1", domain="0, 1", b="1", c="0", f="1 + Heaviside(x - 1/pi)",
                   u_exact="x + Max(0, x - 1/pi)", f_breaks="1/pi"),
    "smooth2d": dict(dim="2", domain="0, 1, 0, 1", b="1, 0.5", c="1", u_exact="x*y*exp(-x)"),
    "linear1d": dict(dim="1", domain="0, 1", b="1", c="1", u_exact="x"),
    "linear2d": dict(dim="2", domain="0, 1, 0, 1", b="1, 0", c="1", u_exact="x"),
    "zero1d": dict(dim="1", domain="0, 1", b="1", c="0", f="0", u_exact="0"),
}

PROBLEM_KEYS = {"stock", "dim", "domain", "b", "c", "f", "u_exact", "f_breaks", "name"}


def make_problem(spec):
    """TransportProblem from a dict of strings (stock name optional)."""
    spec = dict(spec)
    unknown = set(spec) - PROBLEM_KEYS
    if unknown:
        raise ConfigError(f"unknown [problem] keys: {sorted(unknown)}")
    stock = spec.pop("stock", None)
    if stock is not None:
        if stock not in STOCK:
            raise ConfigError(f"unknown stock problem {stock!r}; choose from {sorted(STOCK)}")
        spec = {**STOCK[stock], **spec}
        spec.setdefault("name", stock)
    for key in ("dim", "domain", "b"):
        if key not in spec:
            raise ConfigError(f"[problem] needs {key!r}")
    try:
        dim = int(spec["dim"])
    except ValueError:
        raise ConfigError("dim must be 1 or 2") from None
    if dim not in (1, 2):
        raise ConfigError("dim must be 1 or 2")
    domain = tuple(float(parse_scalar(t, dim)) for t in _split(spec["domain"]))
    if len(domain) != 2 * dim:
        raise ConfigError("domain needs 2*dim numbers")
    bx = [parse_scalar(t, dim) for t in _split(spec["b"])]
    if len(bx) != dim:
        raise ConfigError("b needs dim components")
    cx = parse_scalar(spec.get("c", "0"), dim)
    ux = parse_scalar(spec["u_exact"], dim) if "u_exact" in spec else None
    if "f" in spec:
        fx = parse_scalar(spec["f"], dim)
    elif ux is not None:
        grads = [sym.diff(ux, s) for s in (_X, _Y)[:dim]]
        fx = sym.simplify(sum(bi * gi for bi, gi in zip(bx, grads)) + cx * ux)
    else:
        fx = sym.Integer(0)
    u_exact = grad_u = None
    if ux is not None:
        uf = _numeric(ux, dim)
        u_exact = uf if callable(uf) else (lambda X, v=uf: np.full(len(np.atleast_2d(X)), v))
        gexprs = [sym.diff(ux, s) for s in (_X, _Y)[:dim]]
        gf = _vector(gexprs, dim)
        grad_u = gf if callable(gf) else (lambda X, v=np.array(gf): np.tile(v, (len(np.atleast_2d(X)), 1)))
    breaks = tuple(float(parse_scalar(t, dim)) for t in _split(spec.get("f_breaks", "")))
    try:
        return TransportProblem(dim, domain, _vector(bx, dim), _numeric(cx, dim), _numeric(fx, dim),
                                u_exact, grad_u, breaks, spec.get("name", "custom"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def stock_problem(name):
    return make_problem({"stock": name})


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    mode: str = "adaptive"
    resolution: int = 4
    max_iterations: int = 25
    target_eta: float = 1e-8  # relative to the first iterate
    max_dofs: int = 200_000
    uniform_levels: int = 5
    output_dir: str = "out"
    seed: int = 0
    solver: str = "pg"  # pg | ls | both
    marking: str = "eta"  # eta | rdelta
    infsup: bool = False
    conjecture_max_depth: int = 4
    conjecture_scenarios: str = ""
    inject_fault: str = "none"
    grading_repair: bool = True
    write_files: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    problem: TransportProblem
    disc: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    run: RunConfig = field(default_factory=RunConfig)
    problem_spec: dict = field(default_factory=dict, compare=False)

    def validate(self):
        errs = list(self.disc.errors(adaptive=self.run.mode == "adaptive"))
        r = self.run
        if r.mode not in MODES:
            errs.append(f"mode must be one of {MODES}")
        if r.solver not in ("pg", "ls", "both"):
            errs.append("solver must be pg, ls or both")
        if r.marking not in ("eta", "rdelta"):
            errs.append("marking must be eta or rdelta")
        if r.resolution < 1 or r.max_iterations < 1 or r.uniform_levels < 1 or r.conjecture_max_depth < 1:
            errs.append("resolution and iteration counts must be positive")
        if r.inject_fault not in ("none", "gram_asymmetry"):
            errs.append("inject_fault must be none or gram_asymmetry")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def replace(self, **run_changes):
        return dataclasses.replace(self, run=dataclasses.replace(self.run, **run_changes))


def _coerce(cls, section, items):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        default = getattr(cls(), key)
        try:
            if key == "downwind_depth":
                out[key] = None if raw.strip().lower() in ("", "none") else int(raw)
            elif isinstance(default, bool):
                if raw.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                out[key] = raw.strip().lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                out[key] = int(raw)
            elif isinstance(default, float):
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key} in [{section}]") from None
    return cls(**out)


def parse_config(text):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - {"problem", "discretization", "run"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    if not cp.has_section("problem"):
        raise ConfigError("missing [problem] section")
    spec = dict(cp["problem"])
    problem = make_problem(spec)
    disc = _coerce(DiscretizationConfig, "discretization",
                   dict(cp["discretization"]) if cp.has_section("discretization") else {})
    run = _coerce(RunConfig, "run", dict(cp["run"]) if cp.has_section("run") else {})
    return ExperimentConfig(problem, disc, run, spec).validate()


def load_config(path):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


# ---------------------------------------------------------------------------
# one solve on a mesh
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceRecord:
    iter: int
    ndof: int
    eta: float
    rdelta: float
    osc: float
    err_u: float = float("nan")
    err_w: float = float("nan")
    marked: int = 0
    nu_obs: float = float("nan")
    gamma_infsup: float = float("nan")

    def row(self):
        out = []
        for name in CSV_HEADER:
            v = getattr(self, name)
            out.append(str(v) if isinstance(v, (int, np.integer)) else _fmt(v))
        return out


def _fmt(v):
    v = float(v)
    return "%.10e" % v if math.isfinite(v) else ("nan" if math.isnan(v) else str(v))


@dataclass(eq=False)
class Step:
    """Everything computed on one trial mesh."""

    mesh: object
    pair: object
    data: object
    trial: object
    system: object
    pg: object
    ls: object
    rdelta: object
    report: object

    @property
    def primary(self):
        return self.ls if self.ls is not None else self.pg


def _convection_direction(problem, mesh):
    if problem.constant_b:
        return problem.b_vector
    X = mesh.centroids
    return problem.b_at(X).mean(axis=0)


def solve_step(problem, disc, mesh, solver="pg", fault="none"):
    faces = meshmod.classify_faces(mesh, problem.b if problem.constant_b else problem.b_at)
    pair = meshmod.make_subgrid(mesh, disc.subgrid_depth)
    data = project_data(problem, pair, disc)
    trial = TrialSpace(mesh, disc.m_u, disc.m_w, faces)
    test = TestSpace(pair.fine, disc.m_v)
    sys = dpg.assemble(problem, data, trial, test, pair, tol=disc.cg_tol, maxit=disc.cg_maxit)
    if fault == "gram_asymmetry":
        blocks = sys.G.blocks.copy()
        blocks[0, 0, -1] += 1e-3 * max(abs(blocks[0]).max(), 1.0)
        sys.G = BlockDiagonal.factor(blocks)
    pg = dpg.solve_pg(sys) if solver in ("pg", "both") else None
    ls = estimator.solve_least_squares(problem, trial, disc.quad_levels, disc.cg_tol, disc.cg_maxit) \
        if solver in ("ls", "both") else None
    fn = ls if ls is not None else pg
    if pg is None:
        pg = dpg.solve_pg(sys)
    rdelta = dpg.project_residual(sys, pg)
    osc = data_oscillation(problem, data)
    report = estimator.build_report(fn, problem, rdelta, pair.parent, osc=osc, levels=disc.quad_levels)
    return Step(mesh, pair, data, trial, sys, pg, ls, rdelta, report)


def record_for(problem, step, it, marked=0, prev=None, infsup=False):
    fn = step.primary
    eu = ew = float("nan")
    if problem.exact_pair_error():
        eu, ew = dpg.trial_error(problem, step.data, fn)
    gam = float("nan")
    if infsup:
        gam, _ = dpg.estimate_discrete_infsup(step.system)
    eta = step.report.eta
    nu = eta / prev if prev and prev > 0 else float("nan")
    return ConvergenceRecord(it, step.trial.dim, eta, step.rdelta.norm, step.report.osc, eu, ew,
                             int(marked), nu, gam)


def refine_with_depths(mesh, depth_of):
    """Refine cell k of `mesh` depth_of[k] times (dict), keeping conformity."""
    depth = np.zeros(mesh.n_cells, dtype=int)
    for k, d in depth_of.items():
        depth[int(k)] = max(depth[int(k)], int(d))
    cur = mesh
    for j in range(1, int(depth.max(initial=0)) + 1):
        anc = meshmod.ancestor_map(cur, mesh) if cur is not mesh else np.arange(mesh.n_cells)
        sel = np.flatnonzero(depth[anc] >= j)
        if sel.size == 0:
            break
        # cells of `cur` still at generation < gen(ancestor) + j need another bisection
        need = sel[cur.generation[sel] < mesh.generation[anc[sel]] + j]
        if need.size:
            cur = meshmod.refine(cur, need, 1)
    return cur


def refinement_plan(problem, disc, mesh, marked):
    """Map old cell -> refinement depth: r for marked, downwind depth for the enrichment."""
    plan = {int(k): disc.refine_depth for k in marked}
    if mesh.dim > 1 and disc.downwind > 0:
        b = _convection_direction(problem, mesh)
        for k in meshmod.downwind_closure(mesh, marked, b):
            plan.setdefault(int(k), disc.downwind)
    return plan


def downstream_violations(mesh, b, slack=0):
    """Pairs (K, K') with K' meeting the forward sweep of K and gen(K') < gen(K) - slack."""
    import shapely
    if mesh.dim == 1:
        return []
    lo, hi = mesh.bounding_box()
    clip = shapely.box(lo[0], lo[1], hi[0], hi[1])
    b = np.asarray(b, dtype=float)
    L = 2.0 * float(np.linalg.norm(hi - lo)) / float(np.linalg.norm(b))
    V = mesh.vertex_coords
    polys = mesh.polygons()
    tree = shapely.STRtree(polys)
    sweeps = shapely.intersection(
        shapely.convex_hull(shapely.multipoints(np.concatenate([V, V + L * b], axis=1))), clip)
    gen = mesh.generation
    area = mesh.measures
    bad = []
    for k in range(mesh.n_cells):
        cand = tree.query(sweeps[k])
        cand = cand[gen[cand] < gen[k] - slack]
        if cand.size == 0:
            continue
        ov = shapely.area(shapely.intersection(polys[cand], sweeps[k]))
        bad.extend((k, int(j)) for j in cand[ov > 1e-9 * area[cand]])
    return bad


def repair_grading(mesh, b, max_rounds=50):
    """Bisect cells that are coarser than some upstream cell until none is left.

    Conformity closure can leave an upstream neighbour one generation finer
    than the cells in its sweep; refining those cells only adds DOFs.
    """
    for _ in range(max_rounds):
        bad = downstream_violations(mesh, b)
        if not bad:
            return mesh
        mesh = meshmod.refine(mesh, sorted({j for _, j in bad}), 1)
    raise SolverError("downstream grading repair did not terminate")


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RunResult:
    records: list
    reports: list
    meshes: list
    grading_violations: list = field(default_factory=list)


def _wrap_solver(it, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except SolverError as exc:
        raise SolverError(f"iteration {it}: {exc}") from None


def run_adaptive(cfg):
    problem, disc, run = cfg.problem, cfg.disc, cfg.run
    mesh = meshmod.build_root_mesh(problem.domain, run.resolution)
    records, reports, meshes, grading = [], [], [], []
    eta0 = prev = None
    for it in range(run.max_iterations):
        step = _wrap_solver(it, solve_step, problem, disc, mesh, run.solver, run.inject_fault)
        eta = step.report.eta
        eta0 = eta if eta0 is None else eta0
        stop = eta <= max(run.target_eta * eta0, 1e-12) or it == run.max_iterations - 1
        marked = np.zeros(0, dtype=int)
        if not stop:
            marked, _, _ = estimator.classify_and_mark(step.report, disc.theta, disc.beta, run.marking)
        else:
            step.report.classify(disc.beta)
        rec = record_for(problem, step, it, len(marked), prev, run.infsup)
        records.append(rec)
        reports.append(step.report)
        meshes.append(mesh)
        prev = eta
        if stop or len(marked) == 0:
            break
        new = refine_with_depths(mesh, refinement_plan(problem, disc, mesh, marked))
        if mesh.dim > 1 and disc.downwind > 0:
            b = _convection_direction(problem, new)
            if run.grading_repair:
                new = repair_grading(new, b)
            grading.append(len(downstream_violations(new, b)))
        mesh = new
        if new.n_cells * (step.trial.nbu + step.trial.nbw) > run.max_dofs:
            break
    res = RunResult(records, reports, meshes, grading)
    if run.write_files:
        report(records, reports, meshes, run.output_dir)
    return res


def run_uniform(cfg):
    problem, disc, run = cfg.problem, cfg.disc, cfg.run
    mesh = meshmod.build_root_mesh(problem.domain, run.resolution)
    records, reports, meshes = [], [], []
    prev = None
    for it in range(run.uniform_levels):
        step = _wrap_solver(it, solve_step, problem, disc, mesh, run.solver, run.inject_fault)
        step.report.classify(disc.beta)
        rec = record_for(problem, step, it, mesh.n_cells, prev, run.infsup)
        records.append(rec)
        reports.append(step.report)
        meshes.append(mesh)
        prev = rec.eta
        if it + 1 < run.uniform_levels:
            mesh = meshmod.uniform_refine(mesh, mesh.dim)
    if run.write_files:
        report(records, reports, meshes, run.output_dir)
    return RunResult(records, reports, meshes)


def report(records, reports, meshes, outdir):
    """Write convergence.csv, indicators_<iter>.csv and mesh_<iter>.txt."""
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "convergence.csv"), "w", newline="") as fh:
        fh.write(convergence_csv(records))
    for rec, rep, m in zip(records, reports, meshes):
        with open(os.path.join(outdir, f"indicators_{rec.iter}.csv"), "w", newline="") as fh:
            rep.to_csv(fh)
        with open(os.path.join(outdir, f"mesh_{rec.iter}.txt"), "w") as fh:
            meshmod.dump_mesh(m, fh, {"eta2": rep.eta2, "marked": rep.marked.astype(float)})


def convergence_csv(records):
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(CSV_HEADER)
    for r in records:
        wr.writerow(r.row())
    return out.getvalue()


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    status: str  # PASS | FAIL | SKIP
    detail: str = ""

    def line(self):
        return f"{self.status} {self.name}" + (f": {self.detail}" if self.detail else "")


def _check(name, fn):
    try:
        out = fn()
    except SolverError as exc:
        return CheckResult(name, "FAIL", f"solver error: {exc}")
    if out is None:
        return CheckResult(name, "SKIP", "vacuous for this problem")
    ok, detail = out
    return CheckResult(name, "PASS" if ok else "FAIL", detail)


def run_verify(cfg):
    """Run the invariant suites on the configured problem; returns CheckResults."""
    problem, disc, run = cfg.problem, cfg.disc, cfg.run
    rng = np.random.default_rng(run.seed)
    mesh = meshmod.build_root_mesh(problem.domain, run.resolution)
    results = []
    state = {}

    def setup():
        st = solve_step(problem, disc, mesh, "both", run.inject_fault)
        state["step"] = st
        return True, f"ndof={st.trial.dim}"

    results.append(_check("gram_spd_and_symmetric", setup))
    if "step" not in state:
        for name in ("pg_orthogonality", "form_equivalence", "ls_first_order", "ls_galerkin_identity",
                     "eta_additivity", "line_average_orthogonality", "type2_omega_bound"):
            results.append(CheckResult(name, "SKIP", "setup failed"))
    else:
        st = state["step"]
        results.append(_check("pg_orthogonality", lambda: _pg_orthogonality(st, rng)))
        results.append(_check("form_equivalence", lambda: _form_equivalence(problem, st)))
        results.append(_check("ls_first_order", lambda: _ls_first_order(problem, st, disc)))
        results.append(_check("ls_galerkin_identity", lambda: _ls_identity(problem, st, disc, rng)))
        results.append(_check("eta_additivity", lambda: _eta_additivity(problem, st, disc, rng)))
        results.append(_check("line_average_orthogonality", lambda: _g_orthogonality(problem, st, disc)))
        results.append(_check("type2_omega_bound", lambda: _omega_bound(st, disc)))
    results.append(_check("mesh_refinement", lambda: _mesh_check(mesh, rng)))
    results.append(_check("downwind_closure_idempotent", lambda: _closure_check(problem, mesh, rng)))
    results.append(_check("lift_identity", lambda: _lift_identity(rng, problem.dim)))
    results.append(_check("lift_norm_closeness", lambda: _norm_closeness(rng, problem.dim)))
    results.append(_check("umin_oracle", lambda: _umin_check(rng)))
    if run.write_files:
        os.makedirs(run.output_dir, exist_ok=True)
        with open(os.path.join(run.output_dir, "verify.txt"), "w") as fh:
            fh.write(verify_text(results))
    return results


def verify_text(results):
    n_fail = sum(r.status == "FAIL" for r in results)
    lines = [r.line() for r in results]
    lines.append(f"SUMMARY {len(results) - n_fail}/{len(results)} not failed, {n_fail} failed")
    return "\n".join(lines) + "\n"


def _pg_orthogonality(st, rng, trials=10):
    sys, x = st.system, st.pg.coeffs
    base = dpg.project_residual(sys, x).total2
    worst = 0.0
    for _ in range(trials):
        d = rng.standard_normal(len(x))
        y = x + d
        ry = dpg.project_residual(sys, y).total2
        t = dpg.trial_to_test(sys, d)
        tt = float(t @ sys.G.apply(t))
        worst = max(worst, abs(ry - base - tt) / ry)
    return worst <= 1e-9, f"max rel defect {worst:.2e}"


def _form_equivalence(problem, st):
    B2 = dpg.assemble(problem, st.data, st.trial, st.system.test, st.pair, form="skeleton").B
    d = abs(st.system.B - B2).max()
    s = abs(st.system.B).max()
    return d <= 1e-10 * s, f"max entry difference {d / s:.2e} (relative)"


def _ls_first_order(problem, st, disc):
    r = estimator.ls_optimality_residual(st.ls, problem, disc.quad_levels)
    return r <= 1e-10, f"relative residual {r:.2e}"


def _ls_identity(problem, st, disc, rng, trials=5):
    xbar = st.ls.coeffs
    lv = disc.quad_levels
    e0 = estimator.residual_parts(st.ls, problem, lv).total
    worst = 0.0
    for _ in range(trials):
        d = rng.standard_normal(len(xbar))
        ey = estimator.residual_parts(st.ls, problem, lv, x=xbar + d).total
        zero = estimator._without_source(problem)
        ed = estimator.residual_parts(st.ls, zero, lv, x=d).total
        worst = max(worst, abs(ey - e0 - ed) / ey)
    return worst <= 1e-10, f"max rel defect {worst:.2e}"


def _eta_additivity(problem, st, disc, rng):
    eta2 = estimator.eta_indicator(st.primary, problem, levels=disc.quad_levels)
    sub = rng.permutation(len(eta2))[: max(1, len(eta2) // 2)]
    part = estimator.eta_indicator(st.primary, problem, cells=sub, levels=disc.quad_levels).sum()
    rest = np.setdiff1d(np.arange(len(eta2)), sub)
    other = estimator.eta_indicator(st.primary, problem, cells=rest, levels=disc.quad_levels).sum()
    total = eta2.sum()
    if total == 0.0:
        return None
    d = abs(part + other - total) / total
    return d <= 1e-12, f"relative defect {d:.2e}"


def _g_orthogonality(problem, st, disc):
    if not problem.constant_b:
        return None
    # projected data keeps g polynomial, so both quadratures are exact
    rf = estimator.ResidualFields(st.primary, st.data, disc.quad_levels)
    g2, G2, cross = rf.volume_checks()
    if g2.sum() == 0.0:
        return None
    scale = g2.max()
    orth = float(np.abs(cross).max() / scale)
    contr = float(np.abs(G2 - rf.G_norm2).max() / scale)
    return max(orth, contr) <= 1e-8, f"orthogonality {orth:.2e}, norm formula {contr:.2e}"


def _omega_bound(st, disc):
    rep = st.report
    rep.classify(disc.beta)
    if not np.any(rep.types == "II") or rep.g_norm.sum() == 0.0:
        return None
    bad = estimator.type2_omega_violations(rep)
    return not bad, f"{len(bad)} violations over {int(np.sum(rep.types == 'II'))} Type-II cells"


def _mesh_check(mesh, rng):
    m = meshmod.refine(mesh, rng.choice(mesh.n_cells, size=max(1, mesh.n_cells // 4), replace=False), 2)
    ok = m.is_conforming() and abs(m.domain_measure() - mesh.domain_measure()) <= 1e-12 * mesh.domain_measure()
    return ok, f"{m.n_cells} cells"


def _closure_check(problem, mesh, rng):
    if mesh.dim == 1:
        return None
    b = _convection_direction(problem, mesh)
    marks = rng.choice(mesh.n_cells, size=max(1, mesh.n_cells // 8), replace=False)
    once = meshmod.downwind_closure(mesh, marks, b)
    twice = meshmod.downwind_closure(mesh, once, b)
    return once == twice and set(marks.tolist()) <= set(once), f"{len(once)} cells in closure"


def _random_cell(rng, dim, scale=0.3):
    while True:
        V = rng.standard_normal((dim + 1, dim)) * scale
        if dim == 1 or abs(np.linalg.det(V[1:] - V[0])) > 0.05 * scale**2:
            return V


def _lift_identity(rng, dim, cells=20, tests=5):
    import warnings
    worst = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", lifts.CharacteristicWarning)
        for _ in range(cells):
            V = _random_cell(rng, dim)
            fr = lifts.build_frame(V, rng.standard_normal(dim))
            data = lifts.random_local_data(fr, rng, 1, 2, 1, deg_b=1, deg_c=1)
            R = lifts.exact_modified_lift(fr, data)
            for _ in range(tests):
                v = Poly.random(dim, 3, rng, V.mean(axis=0), fr.diam)
                rhs = lifts.data_form(fr, data, v)
                lhs = lifts.special_inner_product(fr, R, v)
                worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1e-300))
    return worst <= 1e-9, f"max rel defect {worst:.2e}"


def _norm_closeness(rng, dim, samples=40):
    import warnings
    viol = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", lifts.CharacteristicWarning)
        for _ in range(samples):
            V = _random_cell(rng, dim, rng.uniform(0.05, 0.5))
            fr = lifts.build_frame(V, rng.standard_normal(dim))
            p = Poly.random(dim, int(rng.integers(0, 4)), rng, V.mean(axis=0), fr.diam)
            h2, t2 = lifts.lift_norms(p, fr)
            viol += abs(h2 - t2) > fr.diam / fr.speed * h2 * (1 + 1e-12) + 1e-300
    return viol == 0, f"{viol} violations in {samples} samples"


def _umin_check(rng, samples=20):
    worst = 0.0
    for _ in range(samples):
        n = int(rng.integers(1, 8))
        e, g, c = rng.standard_normal(n), rng.standard_normal(n), float(rng.standard_normal())
        u, fac = estimator.umin_correction(e, g, c)
        # stacked least squares oracle: min || [I; c I] u - [e; g] ||
        A = np.vstack([np.eye(n), c * np.eye(n)])
        uo = np.linalg.lstsq(A, np.concatenate([e, g]), rcond=None)[0]
        fo = estimator.q_functional(uo, e, g, c) / estimator.q_functional(0 * e, e, g, c)
        worst = max(worst, np.abs(u - uo).max(), abs(fac - fo))
    return worst <= 1e-10, f"max deviation {worst:.2e}"


# ---------------------------------------------------------------------------
# conjecture
# ---------------------------------------------------------------------------

@dataclass
class ConjectureRow:
    scenario: str
    r: int
    xi: float
    w_ratio: float
    n_free: int


def conjecture_scenarios(cfg):
    names = _split(cfg.run.conjecture_scenarios)
    if not names:
        return [(cfg.problem.name or "config", cfg.problem)]
    return [(n, stock_problem(n)) for n in names]


def run_conjecture(cfg):
    """Relative residuals of the constrained w-correction for depths 1..max."""
    disc, run = cfg.disc, cfg.run
    rows, excluded = [], []
    for name, problem in conjecture_scenarios(cfg):
        if not problem.constant_b:
            excluded.append((name, "needs constant b"))
            continue
        mesh = meshmod.build_root_mesh(problem.domain, run.resolution)
        faces = meshmod.classify_faces(mesh, problem.b_vector)
        trial = TrialSpace(mesh, disc.m_u, disc.m_w, faces)
        fn = estimator.solve_least_squares(problem, trial, disc.quad_levels, disc.cg_tol, disc.cg_maxit)
        rep = estimator.build_report(fn, problem, levels=disc.quad_levels)
        M, _, MII = estimator.classify_and_mark(rep, disc.theta, disc.beta, "eta")
        rf = estimator.ResidualFields(fn, problem, disc.quad_levels)
        F = rf.F(MII)
        # ||f|| is eta of the zero pair; F at roundoff level carries no signal
        f_norm2 = estimator.residual_parts(TrialFunction(trial, np.zeros(trial.dim)), problem,
                                           disc.quad_levels).total
        if len(MII) == 0:
            excluded.append((name, "no Type-II cell marked"))
            continue
        if float(np.sum(rf.G_norm2[MII])) <= 1e-20 * f_norm2:
            excluded.append((name, "F vanishes"))
            continue
        U = meshmod.downwind_closure(mesh, M, problem.b_vector, sweep_1d=True)
        c = problem.c if not callable(problem.c) else problem.c_at
        fine, res = mesh, None
        for r in range(1, run.conjecture_max_depth + 1):
            # one more bisection of everything inside U keeps the spaces nested
            anc = meshmod.ancestor_map(fine, mesh)
            fine = meshmod.refine(fine, np.flatnonzero(np.isin(anc, U)), 1)
            res = estimator.conjecture_probe(F, mesh, fine, U, problem.b_vector, c, disc.m_w,
                                             disc.quad_levels, start=res)
            rows.append(ConjectureRow(name, r, res.xi, res.w_ratio, res.n_free))
    if run.write_files:
        os.makedirs(run.output_dir, exist_ok=True)
        with open(os.path.join(run.output_dir, "conjecture.csv"), "w", newline="") as fh:
            fh.write(conjecture_csv(rows))
    return rows, excluded


def conjecture_csv(rows):
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(["scenario", "r", "xi", "w_ratio", "n_free"])
    for r in rows:
        wr.writerow([r.scenario, r.r, _fmt(r.xi), _fmt(r.w_ratio), r.n_free])
    return out.getvalue()
