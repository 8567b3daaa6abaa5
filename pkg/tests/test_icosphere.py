import numpy as np
import pytest

from sphunet import icosphere as ico


def loop_subdivide(verts, tris):
    """Reference subdivision with a Python dict of edge midpoints."""
    verts = [np.asarray(v, dtype=float) for v in verts]
    mid = {}
    out_tris = []
    for a, b, c in tris:
        m = []
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            if key not in mid:
                p = verts[u] + verts[v]
                mid[key] = p / np.linalg.norm(p)
            m.append(key)
        out_tris.append((a, m[0], m[2]))
        out_tris.append((b, m[1], m[0]))
        out_tris.append((c, m[2], m[1]))
        out_tris.append(tuple(m))
    keys = sorted(mid)
    index = {k: len(verts) + i for i, k in enumerate(keys)}
    new_verts = verts + [mid[k] for k in keys]
    new_tris = [tuple(t if isinstance(t, (int, np.integer)) else index[t] for t in tri) for tri in out_tris]
    return np.array(new_verts), new_tris, np.array(keys)


@pytest.mark.parametrize("level,n", [(0, 12), (1, 42), (2, 162), (3, 642), (4, 2562), (5, 10242)])
def test_vertex_sequence(level, n):
    mesh = ico.generate(level)
    assert mesh.n_vertices == n == ico.vertex_count(level)
    ico.validate(mesh)


def test_vertex_count_closed_form():
    assert ico.vertex_count(0) == 12
    assert ico.vertex_count(5) == 10242
    assert ico.vertex_count(7) == 163842
    for k in range(7):
        assert ico.vertex_count(k + 1) == 4 * ico.vertex_count(k) - 6


def test_level6_triangles():
    mesh = ico.generate(6)
    assert mesh.n_vertices == 40962
    assert mesh.n_triangles == 81920


def test_negative_level_rejected():
    with pytest.raises(ValueError):
        ico.generate(-1)
    with pytest.raises(ValueError):
        ico.vertex_count(-2)


def test_level0_is_canonical_icosahedron():
    mesh = ico.generate(0)
    phi = (1 + 5**0.5) / 2
    expected = np.array([0.0, 1.0, phi]) / np.sqrt(1 + phi**2)
    np.testing.assert_allclose(mesh.vertices[0], expected, atol=1e-15)
    # every edge of the regular icosahedron has the same length
    e = ico.edges(mesh)
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    assert len(e) == 30
    np.testing.assert_allclose(lengths, lengths[0], rtol=1e-14)


def test_triangles_face_outward():
    for level in range(3):
        m = ico.generate(level)
        a, b, c = (m.vertices[m.triangles[:, i]] for i in range(3))
        normal = np.cross(b - a, c - a)
        assert np.all(np.einsum("ij,ij->i", normal, a + b + c) > 0)


def test_subdivision_counts():
    m0, m1 = ico.generate(0), ico.generate(1)
    assert m1.n_vertices - m0.n_vertices == 30
    m2 = ico.generate(2)
    assert m2.n_vertices - m1.n_vertices == 120
    assert len(m2.edge_parents) == 120


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_subdivide_matches_generate(k):
    assert ico.subdivide(ico.generate(k)) == ico.generate(k + 1)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_subdivide_matches_loop_reference(k):
    coarse = ico.generate(k)
    verts, tris, keys = loop_subdivide(coarse.vertices, [tuple(t) for t in coarse.triangles.tolist()])
    fine = ico.generate(k + 1)
    np.testing.assert_allclose(fine.vertices, verts, atol=1e-15)
    np.testing.assert_array_equal(fine.edge_parents, keys)
    assert {tuple(sorted(t)) for t in tris} == {tuple(sorted(t)) for t in fine.triangles.tolist()}


def test_prefix_property_bitwise():
    for k in range(1, 6):
        fine, coarse = ico.generate(k), ico.generate(k - 1)
        assert np.array_equal(fine.vertices[: coarse.n_vertices], coarse.vertices)


def test_new_vertices_are_normalized_midpoints():
    m = ico.generate(3)
    a, b = m.edge_parents.T
    mid = m.vertices[a] + m.vertices[b]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    np.testing.assert_allclose(m.vertices[m.n_coarse :], mid, atol=1e-15)


def test_adjacency_symmetric_and_degrees():
    m = ico.generate(3)
    indptr, nbrs = ico.adjacency(m)
    pairs = {(u, int(v)) for u in range(m.n_vertices) for v in nbrs[indptr[u] : indptr[u + 1]]}
    assert all((v, u) in pairs for u, v in pairs)
    deg = np.diff(indptr)
    assert np.count_nonzero(deg == 5) == 12
    assert np.all((deg == 5) | (deg == 6))


def test_edge_length_uniformity():
    for level in range(1, 6):
        m = ico.generate(level)
        e = ico.edges(m)
        arc = np.arccos(np.clip(np.einsum("ij,ij->i", m.vertices[e[:, 0]], m.vertices[e[:, 1]]), -1, 1))
        assert arc.max() / arc.min() < 1.3


def test_mesh_file_round_trip(tmp_path):
    m = ico.generate(3)
    path = tmp_path / "l3.ico"
    ico.write_mesh(path, m)
    assert ico.read_mesh(path) == m
    raw = path.read_bytes()
    assert raw[:4] == b"ICOS"
    assert len(raw) == 20 + 642 * 24 + 1280 * 12 + 480 * 8


def test_mesh_file_errors(tmp_path):
    path = tmp_path / "bad.ico"
    ico.write_mesh(path, ico.generate(1))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ico.MeshFormatError, match="magic"):
        ico.read_mesh(path)
    path.write_bytes(raw[:-5])
    with pytest.raises(ico.MeshFormatError):
        ico.read_mesh(path)


def test_generation_deterministic():
    # Fresh subdivision chains (bypassing the cache) agree bitwise.
    a = ico.subdivide(ico.subdivide(ico.generate(2)))
    b = ico.subdivide(ico.subdivide(ico.generate(2)))
    assert a == b == ico.generate(4)
