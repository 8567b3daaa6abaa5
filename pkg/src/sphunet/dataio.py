"""Synthetic datasets, sample/manifest file formats and legacy VTK export."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .icosphere import IcoSphere, generate
from .neighborhood import build_dine_table
from .symmetry import rotation_permutations

__all__ = [
    "DataFormatError",
    "Sample",
    "Dataset",
    "smooth",
    "farthest_point_seeds",
    "voronoi_labels",
    "synth_parcellation",
    "synth_regression",
    "write_features",
    "read_features",
    "write_labels",
    "read_labels",
    "write_dataset",
    "read_manifest",
    "load_dataset",
    "export_vtk",
    "read_vtk",
]

FEATURE_MAGIC = b"SFMP"
LABEL_MAGIC = b"SLBL"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1

SMOOTHING_ROUNDS = 10
NOISE_FRACTION = 0.2
S_AMPLITUDE = 5.0
S_ROUNDS = 10
T0_ROUNDS = 10
THICKNESS_RANGE = (1.0, 5.0)
THICKNESS_FLOOR = 0.2
REGRESSION_NOISE = 0.05


class DataFormatError(ValueError):
    """A sample, label or manifest file is malformed or missing."""


@dataclass
class Sample:
    """One subject: ``features`` (N, C) float32 and a target.

    The target is an (N,) int label map for parcellation or an (N, 1)
    float32 map for regression.
    """

    features: np.ndarray
    target: np.ndarray
    subject: str

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.target) != self.features.shape[0]:
            raise ValueError(f"sample {self.subject}: feature/target vertex counts differ")


@dataclass
class Dataset:
    task: str
    level: int
    samples: list
    n_classes: int | None = None
    folds: dict = field(default_factory=dict)

    def fold(self, name: str) -> list:
        if name not in self.folds:
            raise KeyError(f"no fold {name!r}; have {sorted(self.folds)}")
        by_id = {s.subject: s for s in self.samples}
        return [by_id[i] for i in self.folds[name]]

    def split(self, counts, names=("train", "val", "test")) -> None:
        """Assign consecutive samples to folds of the given sizes."""
        if sum(counts) != len(self.samples):
            raise ValueError(f"split sizes {counts} do not sum to {len(self.samples)}")
        ids = [s.subject for s in self.samples]
        self.folds, start = {}, 0
        for name, c in zip(names, counts):
            if c:
                self.folds[name] = ids[start : start + c]
            start += c


# ---------------------------------------------------------------------------
# generators


def smooth(field: np.ndarray, slots: np.ndarray, rounds: int) -> np.ndarray:
    """Iterated mean over each vertex's 7 DiNe slots."""
    out = np.asarray(field, dtype=np.float64)
    for _ in range(rounds):
        out = out[slots].mean(axis=1)
    return out


def farthest_point_seeds(vertices: np.ndarray, k: int, first: int) -> np.ndarray:
    """Greedy farthest-point sampling under great-circle distance; ties go to the lowest index."""
    seeds = [first]
    dist = np.arccos(np.clip(vertices @ vertices[first], -1.0, 1.0))
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, np.arccos(np.clip(vertices @ vertices[nxt], -1.0, 1.0)))
    return np.array(seeds)


def voronoi_labels(vertices: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Nearest seed by great-circle distance (largest dot product)."""
    return np.argmax(vertices @ vertices[seeds].T, axis=1)


def _rotate(rng, level, *arrays):
    perms = rotation_permutations(level)
    perm = perms[int(rng.integers(len(perms)))]
    out = []
    for a in arrays:
        r = np.empty_like(a)
        r[perm] = a
        out.append(r)
    return out


def synth_parcellation(level: int, k: int = 36, n_samples: int = 80, seed: int = 0, channels: int = 3) -> Dataset:
    """Smooth noisy prototype fields over a fixed geodesic Voronoi parcellation.

    Seeds come from farthest-point sampling and prototypes from one draw per
    dataset. Each sample adds i.i.d. noise (0.2 of the prototype spread) to
    the smoothed prototype field and is rotated by a random icosahedral
    symmetry, jointly with its labels.
    """
    mesh = generate(level)
    if not 1 <= k <= mesh.n_vertices:
        raise ValueError(f"K={k} must lie in [1, {mesh.n_vertices}]")
    slots = build_dine_table(mesh).slots
    rng = np.random.default_rng(seed)
    seeds = farthest_point_seeds(mesh.vertices, k, int(rng.integers(mesh.n_vertices)))
    labels = voronoi_labels(mesh.vertices, seeds)
    prototypes = rng.normal(size=(k, channels))
    base = smooth(prototypes[labels], slots, SMOOTHING_ROUNDS)
    sigma = NOISE_FRACTION * float(prototypes.std())
    samples = []
    for i in range(n_samples):
        srng = np.random.default_rng([seed, i])
        feats = base + srng.normal(scale=sigma, size=base.shape)
        feats, lab = _rotate(srng, level, feats, labels)
        samples.append(Sample(feats.astype(np.float32), lab.astype(np.int64), f"sub{i:04d}"))
    return Dataset("parcellation", level, samples, n_classes=k)


def _smooth_noise(rng, slots, n, rounds=SMOOTHING_ROUNDS):
    f = smooth(rng.normal(size=n), slots, rounds)
    return (f - f.mean()) / f.std()


def regression_target(s, t0, slots, noise) -> np.ndarray:
    """``t0 + 0.5 tanh(s) + 0.1 (neighbor mean(t0) - t0) + noise``, floored at 0.2."""
    t1 = t0 + 0.5 * np.tanh(s) + 0.1 * (t0[slots].mean(axis=1) - t0) + noise
    return np.maximum(t1, THICKNESS_FLOOR)


def synth_regression(level: int, n_samples: int = 100, seed: int = 0) -> Dataset:
    """Two smooth input maps per subject and a mildly nonlinear follow-up thickness target.

    Channel 0 is a zero-mean "depth" field ``s`` with standard deviation 5,
    channel 1 a "thickness" field ``t0`` rescaled to [1, 5] mm.
    """
    mesh = generate(level)
    slots = build_dine_table(mesh).slots
    n = mesh.n_vertices
    lo, hi = THICKNESS_RANGE
    samples = []
    for i in range(n_samples):
        srng = np.random.default_rng([seed, i])
        s = S_AMPLITUDE * _smooth_noise(srng, slots, n, S_ROUNDS)
        t0 = _smooth_noise(srng, slots, n, T0_ROUNDS)
        t0 = lo + (hi - lo) * (t0 - t0.min()) / (t0.max() - t0.min())
        t1 = regression_target(s, t0, slots, srng.normal(scale=REGRESSION_NOISE, size=n))
        feats = np.stack([s, t0], axis=1).astype(np.float32)
        samples.append(Sample(feats, t1[:, None].astype(np.float32), f"sub{i:04d}"))
    return Dataset("regression", level, samples)


# ---------------------------------------------------------------------------
# files


def write_features(path, values: np.ndarray) -> None:
    """SFMP: magic, u32 version, u32 N, u32 C, N*C f32 little-endian."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim == 1:
        arr = arr[:, None]
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<3I", FEATURE_VERSION, *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(path, magic, header_fmt):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    hsize = 4 + struct.calcsize(header_fmt)
    if raw[:4] != magic:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < hsize:
        raise DataFormatError(f"{path}: truncated header")
    return struct.unpack(header_fmt, raw[4:hsize]), raw[hsize:]


def read_features(path) -> np.ndarray:
    (version, n, c), body = _read_exact(path, FEATURE_MAGIC, "<3I")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if len(body) != 4 * n * c:
        raise DataFormatError(f"{path}: expected {4 * n * c} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(n, c).astype(np.float32)


def write_labels(path, labels: np.ndarray) -> None:
    """SLBL: magic, u32 N, N u32 labels."""
    lab = np.asarray(labels)
    if lab.size and lab.min() < 0:
        raise ValueError("labels must be non-negative")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<I", lab.size))
        fh.write(lab.astype("<u4").tobytes())


def read_labels(path, n_classes: int | None = None) -> np.ndarray:
    (n,), body = _read_exact(path, LABEL_MAGIC, "<I")
    if len(body) != 4 * n:
        raise DataFormatError(f"{path}: expected {4 * n} label bytes, found {len(body)}")
    lab = np.frombuffer(body, dtype="<u4").astype(np.int64)
    if n_classes is not None and lab.size and lab.max() >= n_classes:
        raise DataFormatError(f"{path}: label {lab.max()} out of range for K={n_classes}")
    return lab


def write_dataset(dataset: Dataset, out_dir) -> str:
    """Write one feature and one target file per sample plus ``manifest.json``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for s in dataset.samples:
        feat = f"{s.subject}.features.sfmp"
        write_features(os.path.join(out_dir, feat), s.features)
        if dataset.task == "parcellation":
            tgt = f"{s.subject}.labels.slbl"
            write_labels(os.path.join(out_dir, tgt), s.target)
        else:
            tgt = f"{s.subject}.target.sfmp"
            write_features(os.path.join(out_dir, tgt), s.target)
        entries.append({"id": s.subject, "features": feat, "target": tgt})
    manifest = {
        "version": MANIFEST_VERSION,
        "task": dataset.task,
        "level": dataset.level,
        "n_classes": dataset.n_classes,
        "samples": entries,
        "folds": dataset.folds,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_manifest(path) -> dict:
    """Parse and validate a manifest; every referenced file must exist."""
    try:
        with open(path) as fh:
            man = json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    for key in ("task", "level", "samples"):
        if key not in man:
            raise DataFormatError(f"{path}: manifest lacks {key!r}")
    if man.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise DataFormatError(f"{path}: unsupported manifest version {man['version']}")
    root = os.path.dirname(os.path.abspath(path))
    missing = []
    for e in man["samples"]:
        for key in ("features", "target"):
            full = os.path.join(root, e[key])
            e[key] = full
            if not os.path.exists(full):
                missing.append(full)
    if missing:
        raise DataFormatError(f"{path}: missing files: {', '.join(missing)}")
    ids = [e["id"] for e in man["samples"]]
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate sample ids")
    seen = []
    for name, members in man.get("folds", {}).items():
        unknown = set(members) - set(ids)
        if unknown:
            raise DataFormatError(f"{path}: fold {name!r} names unknown samples {sorted(unknown)[:3]}")
        seen.extend(members)
    if len(seen) != len(set(seen)):
        raise DataFormatError(f"{path}: folds overlap")
    return man


def load_dataset(path) -> Dataset:
    man = read_manifest(path)
    k = man.get("n_classes")
    n_expected = 10 * 4 ** man["level"] + 2
    samples = []
    for e in man["samples"]:
        feats = read_features(e["features"])
        if man["task"] == "parcellation":
            target = read_labels(e["target"], k)
        else:
            target = read_features(e["target"])
        if feats.shape[0] != n_expected or len(target) != n_expected:
            raise DataFormatError(f"{e['features']}: {feats.shape[0]} vertices, level {man['level']} needs {n_expected}")
        samples.append(Sample(feats, target, e["id"]))
    return Dataset(man["task"], man["level"], samples, k, man.get("folds", {}))


# ---------------------------------------------------------------------------
# VTK


def export_vtk(path, mesh: IcoSphere, arrays: dict | None = None, title: str = "sphunet") -> None:
    """Legacy ASCII VTK POLYDATA with one SCALARS block per array.

    Integer arrays are written as ``int``, others as ``float``. A 2-D array
    with C > 1 columns becomes blocks ``name_0`` .. ``name_{C-1}``.
    """
    n = mesh.n_vertices
    blocks = []
    for name, arr in (arrays or {}).items():
        arr = np.asarray(arr)
        if arr.shape[0] != n:
            raise ValueError(f"array {name!r} has {arr.shape[0]} rows, mesh has {n} vertices")
        if arr.ndim == 2 and arr.shape[1] > 1:
            blocks.extend((f"{name}_{c}", arr[:, c]) for c in range(arr.shape[1]))
        else:
            blocks.append((name, arr.reshape(n)))
    tris = mesh.triangles
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET POLYDATA", f"POINTS {n} float"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines.append(f"POLYGONS {len(tris)} {4 * len(tris)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in tris]
    if blocks:
        lines.append(f"POINT_DATA {n}")
    for name, arr in blocks:
        if " " in name:
            raise ValueError(f"array name {name!r} contains a space")
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            lines += [f"SCALARS {name} int 1", "LOOKUP_TABLE default"]
            lines += [str(int(v)) for v in arr]
        else:
            lines += [f"SCALARS {name} float 1", "LOOKUP_TABLE default"]
            lines += [f"{float(v):.9g}" for v in arr]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Minimal reader for files written by :func:`export_vtk`.

    Returns ``(points (N, 3), polygons (T, 3), arrays dict)``.
    """
    with open(path) as fh:
        tokens = fh.read().split("\n")
    it = iter(tokens[4:])
    arrays = {}
    points = polys = None
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "POINTS":
            n = int(parts[1])
            points = np.array([[float(v) for v in next(it).split()] for _ in range(n)])
        elif parts[0] == "POLYGONS":
            t = int(parts[1])
            polys = np.array([[int(v) for v in next(it).split()[1:]] for _ in range(t)])
        elif parts[0] == "SCALARS":
            name, kind = parts[1], parts[2]
            next(it)  # LOOKUP_TABLE
            conv = int if kind == "int" else float
            arrays[name] = np.array([conv(next(it)) for _ in range(points.shape[0])])
    if points is None or polys is None:
        raise DataFormatError(f"{path}: not a POLYDATA file with points and polygons")
    return points, polys, arrays
