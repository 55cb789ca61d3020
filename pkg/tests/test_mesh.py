import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpg_transport import mesh as M


def test_root_interval():
    m = M.build_root_mesh((0, 1), 2)
    assert m.n_cells == 2
    np.testing.assert_allclose(np.sort(m.vertex_coords[:, :, 0], axis=1), [[0, 0.5], [0.5, 1]])


def test_root_square_counts():
    m1 = M.build_root_mesh((0, 1, 0, 1), 1)
    assert m1.n_cells == 2
    assert m1.measures.sum() == pytest.approx(1.0)
    assert M.build_root_mesh((0, 1, 0, 1), 4).n_cells == 32


@pytest.mark.parametrize("domain", [(1, 1), (0, 1, 2, 2), (0, 1, 0)])
def test_root_rejects_degenerate(domain):
    with pytest.raises(ValueError):
        M.build_root_mesh(domain, 2)


def test_root_rejects_zero_resolution():
    with pytest.raises(ValueError):
        M.build_root_mesh((0, 1), 0)


def test_refine_1d():
    m = M.build_root_mesh((0, 1), 2)
    assert M.refine(m, [0], 1).n_cells == 3
    m3 = M.refine(m, [0], 3)
    assert m3.n_cells == 9
    assert np.sum(M.ancestor_map(m3, m) == 0) == 8


def test_refine_2d_closure():
    m = M.build_root_mesh((0, 1, 0, 1), 1)
    r = M.refine(m, [0], 1)
    assert r.n_cells == 4
    assert r.is_conforming()


def test_subgrid_examples():
    m = M.build_root_mesh((0, 1), 2)
    p = M.make_subgrid(m, 1)
    np.testing.assert_allclose(p.fine.diameters, 0.25)
    np.testing.assert_allclose(p.fine.diameters / m.diameters[p.parent], 0.5)
    p0 = M.make_subgrid(m, 0)
    assert p0.fine.n_cells == m.n_cells
    sq = M.build_root_mesh((0, 1, 0, 1), 2)
    p2 = M.make_subgrid(sq, 2)
    assert p2.fine.n_cells == 4 * sq.n_cells
    np.testing.assert_allclose(np.bincount(p2.parent, weights=p2.fine.measures), sq.measures)


def _triangle():
    return M.SimplicialMesh.from_arrays(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[1, 2, 0]]))


def _face_of(mesh, fc, pts):
    """Type of the face of cell 0 that contains both points."""
    V = mesh.vertex_coords[0]
    for k in range(3):
        others = [V[j] for j in range(3) if j != k]
        if all(any(np.allclose(o, p) for o in others) for p in pts):
            return fc.face_type[0, k]
    raise AssertionError("face not found")


def test_classify_faces_1d():
    m = M.build_root_mesh((0, 1), 1)
    fc = M.classify_faces(m, [1.0])
    V = m.vertex_coords[0, :, 0]
    # local face k is opposite vertex k
    for k in range(2):
        x = V[1 - k]
        assert fc.face_type[0, k] == (M.INFLOW if x == 0 else M.OUTFLOW)


def test_classify_faces_2d():
    m = _triangle()
    fc = M.classify_faces(m, [1.0, 0.0])
    assert _face_of(m, fc, [(0, 0), (0, 1)]) == M.INFLOW
    assert _face_of(m, fc, [(1, 0), (0, 1)]) == M.OUTFLOW
    assert _face_of(m, fc, [(0, 0), (1, 0)]) == M.CHARACTERISTIC
    fc2 = M.classify_faces(m, np.array([1.0, 1.0]) / np.sqrt(2))
    assert _face_of(m, fc2, [(0, 0), (0, 1)]) == M.INFLOW
    assert _face_of(m, fc2, [(0, 0), (1, 0)]) == M.INFLOW
    assert _face_of(m, fc2, [(1, 0), (0, 1)]) == M.OUTFLOW


def test_closure_1d_unchanged():
    m = M.build_root_mesh((0, 1), 4)
    assert M.downwind_closure(m, [1], [1.0]) == [1]
    assert M.downwind_closure(m, [1], [1.0], sweep_1d=True) == [1, 2, 3]


def test_closure_2d_band():
    # two unit-height squares in a row, b = (1, 0)
    V = np.array([[0, 0], [0.5, 0], [1, 0], [0, 1], [0.5, 1], [1, 1]], dtype=float)
    cells = np.array([[0, 4, 1], [4, 0, 3], [1, 5, 2], [5, 1, 4]])
    m = M.SimplicialMesh.from_arrays(V, cells)
    # the sweep of cell 0 is bounded on the left by its own hypotenuse
    assert M.downwind_closure(m, [0], [1.0, 0.0]) == [0, 2, 3]
    assert M.downwind_closure(m, [3], [1.0, 0.0]) == [2, 3]


def test_closure_upstream_excluded():
    m = M.build_root_mesh((0, 1, 0, 1), 4)
    right = [k for k in range(m.n_cells) if m.centroids[k, 0] > 0.75]
    out = M.downwind_closure(m, right[:1], [1.0, 0.0])
    assert all(m.centroids[k, 0] > 0.5 for k in out)


def test_skeleton_faces():
    pair = M.make_subgrid(M.build_root_mesh((0, 1), 1), 1)
    sk = M.skeleton_faces(pair, [1.0])
    pts = sorted(float(pair.fine.forest.coords[f.vertices[0], 0]) for f in sk)
    assert pts == [0.0, 0.5, 1.0]
    sq = M.make_subgrid(M.build_root_mesh((0, 1, 0, 1), 1), 0)
    sk2 = M.skeleton_faces(sq, [1.0, 0.0])
    coords = sq.fine.forest.coords
    segs = [sorted(map(tuple, coords[list(f.vertices)])) for f in sk2]
    assert [(0.0, 0.0), (1.0, 1.0)] in segs
    assert [(0.0, 0.0), (1.0, 0.0)] not in segs
    assert [(0.0, 1.0), (1.0, 1.0)] not in segs


def test_dump_roundtrip():
    m = M.refine(M.build_root_mesh((0, 1, 0, 1), 2), [0, 3], 2)
    buf = io.StringIO()
    M.dump_mesh(m, buf, {"gen": m.generation.astype(float)})
    text = buf.getvalue()
    assert text.startswith("DIM 2\nVERTICES ")
    V, C, data = M.load_mesh(io.StringIO(text))
    np.testing.assert_array_equal(V[C], m.vertex_coords)
    np.testing.assert_array_equal(data["gen"], m.generation)
    buf2 = io.StringIO()
    M.dump_mesh(m, buf2, {"gen": m.generation.astype(float)})
    assert buf2.getvalue() == text


mark_sets = st.lists(st.integers(0, 31), min_size=1, max_size=6, unique=True)


@settings(max_examples=30, deadline=None)
@given(marks=mark_sets, times=st.integers(1, 3), seed=st.integers(0, 1000))
def test_refinement_properties(marks, times, seed):
    m = M.build_root_mesh((0, 1, 0, 1), 4)
    r = M.refine(m, marks, times)
    assert r.is_conforming()
    assert abs(r.measures.sum() - 1.0) <= 1e-12
    anc = M.ancestor_map(r, m)
    refined = set(anc[r.generation > m.generation[anc]].tolist())
    assert set(marks) <= refined
    # cells never touched keep their identity
    untouched = [k for k in range(m.n_cells) if k not in refined]
    assert set(m.leaves[untouched].tolist()) <= set(r.leaves.tolist())
    # a second refinement of the result is still nested
    rng = np.random.default_rng(seed)
    r2 = M.refine(r, rng.choice(r.n_cells, 2, replace=False), 1)
    assert np.all(np.bincount(M.ancestor_map(r2, r), weights=r2.measures, minlength=r.n_cells)
                  == pytest.approx(r.measures))


@settings(max_examples=20, deadline=None)
@given(marks=mark_sets, angle=st.floats(-1.5, 1.5))
def test_classification_and_closure_properties(marks, angle):
    m = M.refine(M.build_root_mesh((0, 1, 0, 1), 4), marks[:2], 1)
    marks = [k for k in marks if k < m.n_cells]
    b = np.array([np.cos(angle), np.sin(angle)])
    fc = M.classify_faces(m, b)
    for faces in m.face_map.values():
        if len(faces) == 2:
            (c0, k0), (c1, k1) = faces
            assert fc.face_type[c0, k0] == -fc.face_type[c1, k1]
    once = M.downwind_closure(m, marks, b)
    assert set(marks) <= set(once)
    assert M.downwind_closure(m, once, b) == once
