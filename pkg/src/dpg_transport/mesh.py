"""Simplicial meshes in 1D and 2D with bisection refinement.

Cells are stored in a shared, append-only refinement forest. A mesh is a set
of forest leaves, so refining a mesh never invalidates older meshes and
repeated bisection of the same cell always returns the same children.

In 2D a cell (a, b, c) is bisected at the edge (a, b); the vertex c is the
newest vertex. Children are (c, a, m) and (b, c, m) with m the edge midpoint,
which is newest-vertex bisection. In 1D a cell (a, b) splits at its midpoint.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely

CHAR_TOL = 1e-12

INFLOW, CHARACTERISTIC, OUTFLOW = -1, 0, 1


class Forest:
    """Append-only store of vertices and cells with parent/child links."""

    def __init__(self, dim, vertices, cells):
        self.dim = dim
        self.vertices = [tuple(float(c) for c in v) for v in vertices]
        self.cells = [tuple(int(i) for i in c) for c in cells]
        self.parent = [-1] * len(self.cells)
        self.children = [None] * len(self.cells)
        self.generation = [0] * len(self.cells)
        self.midpoints = {}
        self._vcache = None

    @property
    def coords(self):
        if self._vcache is None or len(self._vcache) != len(self.vertices):
            self._vcache = np.array(self.vertices, dtype=float)
        return self._vcache

    def midpoint(self, i, j):
        key = (i, j) if i < j else (j, i)
        m = self.midpoints.get(key)
        if m is None:
            p, q = self.vertices[i], self.vertices[j]
            self.vertices.append(tuple(0.5 * (a + b) for a, b in zip(p, q)))
            m = len(self.vertices) - 1
            self.midpoints[key] = m
        return m

    def _add(self, verts, parent):
        self.cells.append(verts)
        self.parent.append(parent)
        self.children.append(None)
        self.generation.append(self.generation[parent] + 1)
        return len(self.cells) - 1

    def bisect(self, cid):
        """Children of cell `cid`, creating them on first request."""
        ch = self.children[cid]
        if ch is not None:
            return ch
        c = self.cells[cid]
        if self.dim == 1:
            a, b = c
            m = self.midpoint(a, b)
            ch = (self._add((a, m), cid), self._add((m, b), cid))
        else:
            a, b, v = c
            m = self.midpoint(a, b)
            ch = (self._add((v, a, m), cid), self._add((b, v, m), cid))
        self.children[cid] = ch
        return ch

    def is_descendant(self, cid, ancestor):
        while cid >= 0:
            if cid == ancestor:
                return True
            cid = self.parent[cid]
        return False


@dataclass(eq=False)
class SimplicialMesh:
    """Leaves of a refinement forest forming a partition of the domain.

    `box` is the axis-aligned bounding box (lo, hi) of the domain when the
    mesh was built from a box, used for boundary detection and clipping.
    """

    forest: Forest
    leaves: np.ndarray
    box: tuple | None = None

    @property
    def dim(self):
        return self.forest.dim

    @property
    def n_cells(self):
        return len(self.leaves)

    def __len__(self):
        return len(self.leaves)

    @cached_property
    def cells(self):
        fc = self.forest.cells
        return np.array([fc[i] for i in self.leaves], dtype=np.int64).reshape(-1, self.dim + 1)

    @cached_property
    def generation(self):
        g = self.forest.generation
        return np.array([g[i] for i in self.leaves], dtype=np.int64)

    @cached_property
    def vertex_coords(self):
        return self.forest.coords[self.cells]  # (m, n+1, n)

    @cached_property
    def x0(self):
        return self.vertex_coords[:, 0, :]

    @cached_property
    def jac(self):
        V = self.vertex_coords
        return np.transpose(V[:, 1:, :] - V[:, :1, :], (0, 2, 1))  # columns are edge vectors

    @cached_property
    def det(self):
        return np.linalg.det(self.jac)

    @cached_property
    def jac_inv(self):
        return np.linalg.inv(self.jac)

    @cached_property
    def measures(self):
        return np.abs(self.det) / (1.0 if self.dim == 1 else 2.0)

    @cached_property
    def diameters(self):
        V = self.vertex_coords
        d = np.zeros(len(V))
        for i in range(self.dim + 1):
            for j in range(i + 1, self.dim + 1):
                d = np.maximum(d, np.linalg.norm(V[:, i] - V[:, j], axis=1))
        return d

    @cached_property
    def centroids(self):
        return self.vertex_coords.mean(axis=1)

    @cached_property
    def inradii(self):
        if self.dim == 1:
            return 0.5 * self.measures
        V = self.vertex_coords
        per = sum(np.linalg.norm(V[:, (k + 1) % 3] - V[:, (k + 2) % 3], axis=1) for k in range(3))
        return 2.0 * self.measures / per

    @cached_property
    def index_of(self):
        return {int(c): i for i, c in enumerate(self.leaves)}

    def to_reference(self, cell, X):
        """Reference coordinates of physical points X (npts, n) w.r.t. cell."""
        return (np.atleast_2d(X) - self.x0[cell]) @ self.jac_inv[cell].T

    def to_physical(self, cell, xi):
        return self.x0[cell] + np.atleast_2d(xi) @ self.jac[cell].T

    def quadrature(self, ref_pts, ref_wts, cells=None):
        """Physical points (m, nq, n) and weights (m, nq) of a reference rule."""
        idx = np.arange(self.n_cells) if cells is None else np.asarray(cells)
        X = self.x0[idx][:, None, :] + np.einsum("cij,qj->cqi", self.jac[idx], ref_pts)
        W = np.abs(self.det[idx])[:, None] * ref_wts[None, :]
        return X, W

    # -- faces -----------------------------------------------------------
    @cached_property
    def face_vertices(self):
        """(m, n+1, n) vertex ids of local face k (opposite local vertex k)."""
        C = self.cells
        return np.stack([np.delete(C, k, axis=1) for k in range(self.dim + 1)], axis=1)

    @cached_property
    def face_map(self):
        """Map sorted face vertex tuple -> list of (cell, local face)."""
        fm = {}
        FV = self.face_vertices
        for c in range(self.n_cells):
            for k in range(self.dim + 1):
                fm.setdefault(tuple(sorted(FV[c, k])), []).append((c, k))
        return fm

    @cached_property
    def face_normals(self):
        """Outward unit normals (m, n+1, n) and face measures (m, n+1)."""
        V = self.vertex_coords
        m = self.n_cells
        N = np.zeros((m, self.dim + 1, self.dim))
        A = np.ones((m, self.dim + 1))
        for k in range(self.dim + 1):
            others = [j for j in range(self.dim + 1) if j != k]
            if self.dim == 1:
                n = np.sign(V[:, others[0], 0] - V[:, k, 0])[:, None]
            else:
                t = V[:, others[1]] - V[:, others[0]]
                A[:, k] = np.linalg.norm(t, axis=1)
                n = np.column_stack([t[:, 1], -t[:, 0]]) / A[:, k][:, None]
                s = np.sign(np.einsum("ij,ij->i", n, V[:, others[0]] - V[:, k]))
                n = n * s[:, None]
            N[:, k] = n
        return N, A

    @cached_property
    def boundary_mask(self):
        """(m, n+1) flags for faces on the domain boundary."""
        m = self.n_cells
        mask = np.zeros((m, self.dim + 1), dtype=bool)
        if self.box is not None:
            lo, hi = (np.asarray(t, dtype=float) for t in self.box)
            P = self.forest.coords[self.face_vertices]  # (m, n+1, n, n)
            scale = np.max(hi - lo)
            for d in range(self.dim):
                for side in (lo[d], hi[d]):
                    mask |= np.all(np.abs(P[..., d] - side) <= 1e-12 * scale, axis=2)
            return mask
        for faces in self.face_map.values():
            if len(faces) == 1:
                c, k = faces[0]
                mask[c, k] = True
        return mask

    def domain_measure(self):
        if self.box is not None:
            lo, hi = (np.asarray(t, dtype=float) for t in self.box)
            return float(np.prod(hi - lo))
        return float(self.measures.sum())

    def bounding_box(self):
        if self.box is not None:
            return tuple(np.asarray(t, dtype=float) for t in self.box)
        used = self.forest.coords[np.unique(self.cells)]
        return used.min(axis=0), used.max(axis=0)

    def is_conforming(self):
        """No hanging vertices: every face is interior-shared twice or on the boundary."""
        bm = self.boundary_mask
        for faces in self.face_map.values():
            if len(faces) == 2:
                continue
            if len(faces) == 1 and bm[faces[0]]:
                continue
            return False
        return True

    def polygons(self):
        if self.dim != 2:
            raise ValueError("polygons only exist in 2D")
        return shapely.polygons(self.vertex_coords)

    @classmethod
    def from_arrays(cls, vertices, cells, box=None):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        forest = Forest(vertices.shape[1], vertices, np.asarray(cells))
        return cls(forest, np.arange(len(forest.cells)), box)


# -- construction and refinement --------------------------------------------
def build_root_mesh(domain, resolution):
    """Uniform root mesh of an interval (a, b) or a box (x0, x1, y0, y1).

    In 2D every sub-square is split along its diagonal; the diagonal is the
    refinement edge of both triangles, which is a compatible labelling.
    """
    domain = tuple(float(d) for d in domain)
    n = int(resolution)
    if n < 1:
        raise ValueError("resolution must be >= 1")
    if len(domain) == 2:
        a, b = domain
        if not b > a:
            raise ValueError("degenerate interval")
        x = np.linspace(a, b, n + 1)
        cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        return SimplicialMesh.from_arrays(x[:, None], cells, box=((a,), (b,)))
    if len(domain) != 4:
        raise ValueError("domain must be (a, b) or (x0, x1, y0, y1)")
    x0, x1, y0, y1 = domain
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate box")
    xs, ys = np.linspace(x0, x1, n + 1), np.linspace(y0, y1, n + 1)
    V = np.array([(x, y) for y in ys for x in xs])

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            p00, p10, p01, p11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            cells.append((p00, p11, p10))
            cells.append((p11, p00, p01))
    return SimplicialMesh.from_arrays(V, np.array(cells), box=((x0, y0), (x1, y1)))


def _edges(cell):
    a, b, c = cell
    return ((min(a, b), max(a, b)), (min(b, c), max(b, c)), (min(a, c), max(a, c)))


def _conform(forest, leaves, targets):
    """Bisect leaves with hanging vertices until the mesh is conforming."""
    while True:
        present = set()
        for cid in leaves:
            present.update(_edges(forest.cells[cid]))
        split = []
        for cid in leaves:
            for e in _edges(forest.cells[cid]):
                m = forest.midpoints.get(e)
                if m is not None and (min(e[0], m), max(e[0], m)) in present:
                    split.append(cid)
                    break
        if not split:
            return leaves
        leaves = _bisect_set(forest, leaves, set(split), targets)


def _bisect_set(forest, leaves, which, targets):
    out = []
    for cid in leaves:
        if cid in which:
            ch = forest.bisect(cid)
            out.extend(ch)
            if cid in targets:
                targets.update(ch)
        else:
            out.append(cid)
    return out


def refine(mesh, marks, times=1):
    """Bisect every marked cell `times` times and restore conformity."""
    forest = mesh.forest
    leaves = [int(c) for c in mesh.leaves]
    targets = {int(mesh.leaves[i]) for i in marks}
    for _ in range(int(times)):
        current = targets.intersection(leaves)
        if not current:
            break
        leaves = _bisect_set(forest, leaves, current, targets)
        if mesh.dim == 2:
            leaves = _conform(forest, leaves, targets)
    return SimplicialMesh(forest, np.array(leaves, dtype=np.int64), mesh.box)


def uniform_refine(mesh, times=1):
    return refine(mesh, range(mesh.n_cells), times)


def ancestor_map(fine, coarse):
    """Index into `coarse` of the ancestor of each cell of `fine`."""
    idx = coarse.index_of
    parent = fine.forest.parent
    out = np.empty(fine.n_cells, dtype=np.int64)
    for i, c in enumerate(fine.leaves):
        c = int(c)
        while c not in idx:
            c = parent[c]
            if c < 0:
                raise ValueError("meshes are not nested")
        out[i] = idx[c]
    return out


@dataclass(eq=False)
class SubgridPair:
    coarse: SimplicialMesh
    fine: SimplicialMesh
    depth: int
    parent: np.ndarray = field(repr=False)
    sigma: float = 0.0

    def children_of(self, coarse_cell):
        return np.flatnonzero(self.parent == coarse_cell)

    @cached_property
    def groups(self):
        order = np.argsort(self.parent, kind="stable")
        return np.split(order, np.cumsum(np.bincount(self.parent, minlength=self.coarse.n_cells))[:-1])


def make_subgrid(coarse, depth):
    """Companion mesh with every coarse cell bisected `depth` times.

    Each coarse subtree is refined on its own, so the fine mesh can carry
    hanging vertices across coarse faces when `depth` is odd. It only
    supports the broken test space, which needs no conformity.
    """
    forest = coarse.forest
    leaves, parent = [], []
    for i, c in enumerate(coarse.leaves):
        level = [int(c)]
        for _ in range(int(depth)):
            level = [ch for cid in level for ch in forest.bisect(cid)]
        leaves.extend(level)
        parent.extend([i] * len(level))
    fine = SimplicialMesh(forest, np.array(leaves, dtype=np.int64), coarse.box)
    parent = np.array(parent, dtype=np.int64)
    ratio = fine.diameters / coarse.diameters[parent]
    sigma = float(max(ratio.max(), coarse.diameters.max()))
    return SubgridPair(coarse, fine, int(depth), parent, sigma)


# -- convection-dependent queries --------------------------------------------
@dataclass(eq=False)
class FaceClassification:
    face_type: np.ndarray  # (m, n+1) in {INFLOW, CHARACTERISTIC, OUTFLOW}
    bn: np.ndarray  # (m, n+1) face-averaged b.n
    normals: np.ndarray
    areas: np.ndarray
    boundary: np.ndarray

    def domain_faces(self, kind):
        return [tuple(map(int, f)) for f in np.argwhere(self.boundary & (self.face_type == kind))]

    @property
    def gamma_minus(self):
        return self.domain_faces(INFLOW)

    @property
    def gamma_plus(self):
        return self.domain_faces(OUTFLOW)

    @property
    def gamma_zero(self):
        return self.domain_faces(CHARACTERISTIC)


def face_points(mesh, k, ref_pts):
    """Physical points (m, nq, n) on local face k for a rule on [0, 1]."""
    V = mesh.vertex_coords
    others = [j for j in range(mesh.dim + 1) if j != k]
    if mesh.dim == 1:
        return V[:, others[0], :][:, None, :]
    t = ref_pts.reshape(-1)
    return V[:, others[0], None, :] + t[None, :, None] * (V[:, others[1]] - V[:, others[0]])[:, None, :]


def classify_faces(mesh, b):
    """Inflow/outflow/characteristic status of every cell face.

    `b` is a constant vector or a callable X (N, n) -> (N, n); for callables
    the face average of b.n is used.
    """
    from .quadrature import gauss_legendre

    normals, areas = mesh.face_normals
    m, nf = mesh.n_cells, mesh.dim + 1
    bn = np.zeros((m, nf))
    bnorm = np.zeros((m, nf))
    t, w = gauss_legendre(4)
    for k in range(nf):
        if callable(b):
            P = face_points(mesh, k, t)
            vals = np.asarray(b(P.reshape(-1, mesh.dim))).reshape(m, -1, mesh.dim)
            ww = w if mesh.dim == 2 else np.ones(1)
            avg = np.einsum("q,mqd->md", ww, vals)
        else:
            avg = np.broadcast_to(np.asarray(b, dtype=float), (m, mesh.dim))
        bn[:, k] = np.einsum("md,md->m", avg, normals[:, k])
        bnorm[:, k] = np.linalg.norm(avg, axis=1)
    ftype = np.where(bn < -CHAR_TOL * bnorm, INFLOW, np.where(bn > CHAR_TOL * bnorm, OUTFLOW, CHARACTERISTIC))
    return FaceClassification(ftype, bn, normals, areas, mesh.boundary_mask)


def _sweep_1d(mesh, marks, b):
    x = mesh.vertex_coords[:, :, 0]
    lo, hi = x.min(axis=1), x.max(axis=1)
    if not marks:
        return set()
    if float(np.ravel(b)[0]) > 0:
        start = min(lo[i] for i in marks)
        return set(np.flatnonzero(hi > start + 1e-12 * (hi - lo)).tolist())
    start = max(hi[i] for i in marks)
    return set(np.flatnonzero(lo < start - 1e-12 * (hi - lo)).tolist())


def downwind_closure(mesh, marks, b, sweep_1d=False):
    """Marked cells plus every cell overlapping a forward sweep along b.

    The sweep of a cell is conv(K, K + L b) clipped to the bounding box, with
    L long enough to leave the box. Overlap means positive common area. The
    operation is iterated to its fixed point so the result is closed under
    the same rule. In 1D marks are returned unchanged unless `sweep_1d`.
    """
    marks = {int(i) for i in marks}
    b = np.asarray(b, dtype=float)
    if mesh.dim == 1:
        if not sweep_1d:
            return sorted(marks)
        return sorted(marks | _sweep_1d(mesh, marks, b))
    lo, hi = mesh.bounding_box()
    clip = shapely.box(lo[0], lo[1], hi[0], hi[1])
    L = 2.0 * float(np.linalg.norm(hi - lo)) / float(np.linalg.norm(b))
    V = mesh.vertex_coords
    polys = mesh.polygons()
    area = mesh.measures
    result, frontier = set(marks), sorted(marks)
    while frontier:
        pts = np.concatenate([V[frontier], V[frontier] + L * b], axis=1)
        sweeps = shapely.convex_hull(shapely.multipoints(pts))
        region = shapely.intersection(shapely.union_all(sweeps), clip)
        overlap = shapely.area(shapely.intersection(polys, region))
        hit = set(np.flatnonzero(overlap > 1e-9 * area).tolist())
        frontier = sorted(hit - result)
        result |= hit
    return sorted(result)


@dataclass(frozen=True)
class SkeletonFace:
    vertices: tuple
    cells: tuple  # one or two fine cells
    local: tuple  # local face index in each cell
    normal: np.ndarray  # outward normal w.r.t. cells[0]
    kind: int  # face type seen from cells[0]


def skeleton_faces(pair, b):
    """Non-characteristic faces of the fine mesh with adjacent cells."""
    fine = pair.fine
    fc = classify_faces(fine, b)
    out = []
    for key in sorted(fine.face_map):
        faces = fine.face_map[key]
        c, k = faces[0]
        if fc.face_type[c, k] == CHARACTERISTIC:
            continue
        out.append(SkeletonFace(key, tuple(f[0] for f in faces), tuple(f[1] for f in faces),
                                fc.normals[c, k].copy(), int(fc.face_type[c, k])))
    return out


# -- dump format -------------------------------------------------------------
def dump_mesh(mesh, stream, celldata=None):
    """Write the plain-text mesh format; floats use 17 significant digits."""
    used, inv = np.unique(mesh.cells, return_inverse=True)
    cells = inv.reshape(mesh.cells.shape)
    coords = mesh.forest.coords[used]
    lines = [f"DIM {mesh.dim}", f"VERTICES {len(coords)}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in coords]
    lines.append(f"CELLS {len(cells)}")
    lines += [" ".join(str(int(i)) for i in row) for row in cells]
    for name, vals in (celldata or {}).items():
        lines.append(f"CELLDATA {name}")
        lines += [f"{float(v):.17g}" for v in vals]
    stream.write("\n".join(lines) + "\n")


def load_mesh(stream):
    """Parse the mesh format; returns (vertices, cells, celldata)."""
    toks = [ln.strip() for ln in stream.read().splitlines() if ln.strip()]
    dim = int(toks[0].split()[1])
    nv = int(toks[1].split()[1])
    verts = np.array([[float(x) for x in ln.split()] for ln in toks[2:2 + nv]]).reshape(nv, dim)
    pos = 2 + nv
    nc = int(toks[pos].split()[1])
    cells = np.array([[int(x) for x in ln.split()] for ln in toks[pos + 1:pos + 1 + nc]], dtype=np.int64)
    pos += 1 + nc
    data = {}
    while pos < len(toks):
        name = toks[pos].split(maxsplit=1)[1]
        data[name] = np.array([float(x) for x in toks[pos + 1:pos + 1 + nc]])
        pos += 1 + nc
    return verts, cells, data
