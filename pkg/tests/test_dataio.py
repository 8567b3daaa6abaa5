import json
import os

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from sphunet import dataio as D
from sphunet import icosphere as ico
from sphunet.neighborhood import build_dine_table


def test_parcellation_shapes_and_labels():
    ds = D.synth_parcellation(3, k=36, n_samples=3, seed=1)
    assert ds.task == "parcellation" and ds.n_classes == 36
    for s in ds.samples:
        assert s.features.shape == (642, 3) and s.features.dtype == np.float32
        assert s.target.shape == (642,)
        # every ROI is nonempty
        assert len(np.unique(s.target)) == 36
        assert np.all(np.isfinite(s.features))


def test_single_roi_and_too_many():
    ds = D.synth_parcellation(1, k=1, n_samples=2)
    assert all(np.all(s.target == 0) for s in ds.samples)
    with pytest.raises(ValueError):
        D.synth_parcellation(0, k=13)


def test_voronoi_regions_connected():
    mesh = ico.generate(3)
    seeds = D.farthest_point_seeds(mesh.vertices, 36, 0)
    assert len(set(seeds.tolist())) == 36
    labels = D.voronoi_labels(mesh.vertices, seeds)
    e = ico.edges(mesh)
    for k in range(36):
        members = np.flatnonzero(labels == k)
        keep = np.isin(e[:, 0], members) & np.isin(e[:, 1], members)
        sub = e[keep]
        local = {v: i for i, v in enumerate(members)}
        rows = [local[v] for v in sub[:, 0]]
        cols = [local[v] for v in sub[:, 1]]
        g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(members),) * 2)
        assert connected_components(g, directed=False)[0] == 1


def test_generators_deterministic(tmp_path):
    for gen in (lambda: D.synth_parcellation(2, k=6, n_samples=3, seed=4), lambda: D.synth_regression(2, 3, seed=4)):
        a, b = gen(), gen()
        pa, pb = D.write_dataset(a, tmp_path / "a"), D.write_dataset(b, tmp_path / "b")
        for name in sorted(os.listdir(tmp_path / "a")):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert open(pa).read() == open(pb).read()


def test_regression_target_examples():
    slots = build_dine_table(ico.generate(2)).slots
    t0 = np.full(162, 2.5)
    np.testing.assert_array_equal(D.regression_target(np.zeros(162), t0, slots, np.zeros(162)), t0)
    low = D.regression_target(np.full(162, -50.0), np.full(162, 0.3), slots, np.zeros(162))
    np.testing.assert_array_equal(low, 0.2)


def test_regression_dataset():
    ds = D.synth_regression(3, n_samples=4, seed=0)
    for s in ds.samples:
        assert s.features.shape == (642, 2) and s.target.shape == (642, 1)
        assert s.features[:, 1].min() >= 1.0 - 1e-6 and s.features[:, 1].max() <= 5.0 + 1e-6
        assert abs(float(s.features[:, 0].mean())) < 1.0
        assert s.target.min() >= 0.2
        assert np.mean(np.abs(s.target[:, 0] - s.features[:, 1])) > 0


def test_smooth_preserves_constants():
    slots = build_dine_table(ico.generate(2)).slots
    np.testing.assert_allclose(D.smooth(np.full((162, 2), 3.0), slots, 10), 3.0)


def test_feature_and_label_round_trip(tmp_path):
    f = np.random.default_rng(0).normal(size=(42, 3)).astype(np.float32)
    D.write_features(tmp_path / "f.sfmp", f)
    back = D.read_features(tmp_path / "f.sfmp")
    assert back.tobytes() == f.tobytes() and back.shape == f.shape
    lab = np.arange(42) % 5
    D.write_labels(tmp_path / "l.slbl", lab)
    np.testing.assert_array_equal(D.read_labels(tmp_path / "l.slbl", 5), lab)
    with pytest.raises(D.DataFormatError, match="range"):
        D.read_labels(tmp_path / "l.slbl", 4)


def test_corrupt_files_name_the_file(tmp_path):
    path = tmp_path / "f.sfmp"
    D.write_features(path, np.zeros((12, 2), np.float32))
    raw = path.read_bytes()
    path.write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(D.DataFormatError, match="f.sfmp"):
        D.read_features(path)
    path.write_bytes(raw[:-4])
    with pytest.raises(D.DataFormatError):
        D.read_features(path)
    with pytest.raises(D.DataFormatError):
        D.read_labels(path)


def test_manifest_round_trip_and_validation(tmp_path):
    ds = D.synth_regression(1, n_samples=5, seed=2)
    ds.split([3, 1, 1])
    path = D.write_dataset(ds, tmp_path / "ds")
    back = D.load_dataset(path)
    assert back.folds == ds.folds and back.level == 1
    for a, b in zip(ds.samples, back.samples):
        assert a.features.tobytes() == b.features.tobytes() and a.target.tobytes() == b.target.tobytes()
    os.remove(tmp_path / "ds" / "sub0001.target.sfmp")
    with pytest.raises(D.DataFormatError, match="sub0001.target.sfmp"):
        D.load_dataset(path)
    man = json.loads(open(path).read())
    man["samples"] = man["samples"][2:]
    man["folds"] = {"train": ["sub0002", "sub0003"], "test": ["sub0003"]}
    with open(path, "w") as fh:
        json.dump(man, fh)
    with pytest.raises(D.DataFormatError, match="overlap"):
        D.load_dataset(path)
    man["folds"] = {"train": ["sub0009"]}
    with open(path, "w") as fh:
        json.dump(man, fh)
    with pytest.raises(D.DataFormatError, match="unknown"):
        D.load_dataset(path)
    with pytest.raises(D.DataFormatError):
        D.read_manifest(tmp_path / "nope.json")


def test_split():
    ds = D.synth_regression(0, n_samples=5)
    ds.split([3, 0, 2])
    assert ds.folds == {"train": ["sub0000", "sub0001", "sub0002"], "test": ["sub0003", "sub0004"]}
    with pytest.raises(ValueError):
        ds.split([1, 1, 1])
    with pytest.raises(KeyError):
        ds.fold("val")


def test_vtk_export(tmp_path):
    mesh = ico.generate(0)
    labels = np.arange(12) % 3
    vals = np.linspace(0, 1, 12)
    path = tmp_path / "m.vtk"
    D.export_vtk(path, mesh, {"labels": labels, "values": vals, "pair": np.stack([vals, -vals], axis=1)})
    text = path.read_text()
    assert "POINTS 12 float" in text and "POLYGONS 20 80" in text
    assert "SCALARS labels int 1" in text and "SCALARS values float 1" in text
    pts, polys, arrays = D.read_vtk(path)
    np.testing.assert_allclose(pts, mesh.vertices, atol=1e-8)
    np.testing.assert_array_equal(polys, mesh.triangles)
    np.testing.assert_array_equal(arrays["labels"], labels)
    np.testing.assert_allclose(arrays["values"], vals, rtol=1e-8)
    np.testing.assert_allclose(arrays["pair_1"], -vals, rtol=1e-8)
    with pytest.raises(ValueError):
        D.export_vtk(path, mesh, {"bad": np.zeros(11)})
