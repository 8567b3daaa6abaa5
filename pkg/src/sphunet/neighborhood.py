"""Filter supports on icospheres.

* DiNe table: for every vertex, 7 slots holding the vertex and its direct
  neighbors sorted by tangent-plane angle. Pentagon vertices (5 neighbors)
  repeat the center in slots 0 and 1.
* RePa sampler: a small rectangular grid on each vertex's tangent plane,
  projected back to the sphere and expressed as barycentric weights over
  mesh triangles.
* Edge-parent table: the two coarse endpoints of every new vertex.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .icosphere import IcoSphere, MeshFormatError, adjacency, edges, generate, vertex_count

__all__ = [
    "NeighborTable",
    "RePaSampler",
    "Hierarchy",
    "tangent_frame",
    "tangent_angle",
    "build_dine_table",
    "build_repa_sampler",
    "edge_parent_table",
    "mean_edge_arc",
    "write_table",
    "read_table",
    "write_table_csv",
]

# |center . x| above this switches the reference axis to +y.
AXIS_FALLBACK = 1.0 - 1e-6
# Angles this close below 2*pi wrap to 0 so tiny perturbations cannot reorder slots.
WRAP_TOLERANCE = 1e-6
_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class NeighborTable:
    level: int
    slots: np.ndarray  # (N, 7) int64
    pentagon_flags: np.ndarray  # (N,) bool

    @property
    def n_vertices(self) -> int:
        return len(self.slots)


@dataclass(frozen=True, eq=False)
class RePaSampler:
    level: int
    patch_shape: tuple[int, int]
    spacing: float
    weights: np.ndarray  # (N, rows*cols, 3)
    anchors: np.ndarray  # (N, rows*cols, 3) int64

    @property
    def n_vertices(self) -> int:
        return len(self.weights)

    @property
    def n_points(self) -> int:
        return self.patch_shape[0] * self.patch_shape[1]


def tangent_frame(centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference axis ``e1`` and its counterclockwise perpendicular ``e2``.

    ``e1`` is global +x projected onto the tangent plane, or +y when the
    center is within 1e-6 of the x axis. ``e2 = n x e1`` with ``n`` the
    outward normal, so angles increase counterclockwise seen from outside.
    """
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    ref = np.zeros_like(c)
    near_x = np.abs(c[:, 0]) > AXIS_FALLBACK
    ref[~near_x, 0] = 1.0
    ref[near_x, 1] = 1.0
    e1 = ref - np.einsum("ij,ij->i", ref, c)[:, None] * c
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(c, e1)
    if np.ndim(centers) == 1:
        return e1[0], e2[0]
    return e1, e2


def _angles(centers, neighbors):
    centers = np.atleast_2d(centers)
    neighbors = np.atleast_2d(neighbors)
    e1, e2 = tangent_frame(centers)
    d = neighbors - centers
    ang = np.arctan2(np.einsum("ij,ij->i", d, e2), np.einsum("ij,ij->i", d, e1))
    ang = np.mod(ang, _TWO_PI)
    ang[ang > _TWO_PI - WRAP_TOLERANCE] = 0.0
    return ang


def tangent_angle(center, neighbor) -> float:
    """Counterclockwise angle in [0, 2pi) of ``neighbor - center`` from the reference axis."""
    center = np.asarray(center, dtype=np.float64)
    neighbor = np.asarray(neighbor, dtype=np.float64)
    if np.linalg.norm(np.cross(center, neighbor)) < 1e-12:
        raise ValueError("center and neighbor are equal or antipodal")
    return float(_angles(center, neighbor)[0])


def build_dine_table(mesh: IcoSphere) -> NeighborTable:
    """Ordered 7-slot DiNe support for every vertex of ``mesh``."""
    n = mesh.n_vertices
    indptr, nbrs = adjacency(mesh)
    deg = np.diff(indptr)
    bad = np.flatnonzero((deg != 5) & (deg != 6))
    if len(bad):
        raise ValueError(f"vertex {bad[0]} has degree {deg[bad[0]]}; DiNe needs 5 or 6")
    owner = np.repeat(np.arange(n), deg)
    ang = _angles(mesh.vertices[owner], mesh.vertices[nbrs])
    # Sort by owner, then angle, then neighbor index for ties.
    order = np.lexsort((nbrs, ang, owner))
    nbrs = nbrs[order]
    pent = deg == 5
    slots = np.empty((n, 7), dtype=np.int64)
    slots[:, 0] = np.arange(n)
    rank = np.arange(len(nbrs)) - np.repeat(indptr[:-1], deg)
    col = 1 + rank + np.repeat(pent, deg)
    slots[owner, col] = nbrs
    slots[pent, 1] = np.flatnonzero(pent)
    slots.setflags(write=False)
    pent.setflags(write=False)
    return NeighborTable(level=mesh.level, slots=slots, pentagon_flags=pent)


def edge_parent_table(mesh: IcoSphere) -> np.ndarray:
    """(N - N_prev, 2) coarse parents of the vertices added at ``mesh.level``."""
    if mesh.level < 1:
        raise ValueError("edge parents need a mesh of level >= 1")
    return mesh.edge_parents


def mean_edge_arc(mesh: IcoSphere) -> float:
    """Mean great-circle edge length in radians."""
    e = edges(mesh)
    dots = np.einsum("ij,ij->i", mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]])
    return float(np.mean(np.arccos(np.clip(dots, -1.0, 1.0))))


def _triangle_neighbors(tris: np.ndarray) -> np.ndarray:
    """``tn[t, j]`` is the triangle sharing the edge opposite local vertex ``j`` of ``t``."""
    t = len(tris)
    n = int(tris.max()) + 1
    opp = []
    for j in range(3):
        a, b = tris[:, (j + 1) % 3], tris[:, (j + 2) % 3]
        opp.append(np.minimum(a, b) * n + np.maximum(a, b))
    keys = np.concatenate(opp)
    owner = np.tile(np.arange(t), 3)
    local = np.repeat(np.arange(3), t)
    order = np.argsort(keys, kind="stable")
    keys, owner, local = keys[order], owner[order], local[order]
    # Closed manifold: every edge key appears exactly twice, adjacent after sorting.
    if not np.array_equal(keys[0::2], keys[1::2]):
        raise ValueError("mesh is not a closed manifold")
    tn = np.empty((t, 3), dtype=np.int64)
    tn[owner[0::2], local[0::2]] = owner[1::2]
    tn[owner[1::2], local[1::2]] = owner[0::2]
    return tn


def _locate(mesh: IcoSphere, points: np.ndarray, start: np.ndarray, max_steps: int = 1000):
    """Walk from ``start`` triangles to the triangles containing ``points``.

    Returns (triangle index, barycentric weights) with weights taken along
    the ray from the origin (gnomonic barycentrics).
    """
    tris = mesh.triangles
    tn = _triangle_neighbors(tris)
    cur = start.copy()
    w = np.empty((len(points), 3))
    active = np.arange(len(points))
    for _ in range(max_steps):
        corners = mesh.vertices[tris[cur[active]]]  # (A, 3 corners, 3 coords)
        lam = np.linalg.solve(np.transpose(corners, (0, 2, 1)), points[active][:, :, None])[:, :, 0]
        worst = np.argmin(lam, axis=1)
        inside = lam[np.arange(len(active)), worst] >= -1e-12
        w[active[inside]] = lam[inside]
        out = active[~inside]
        cur[out] = tn[cur[out], worst[~inside]]
        active = out
        if len(active) == 0:
            break
    else:
        raise RuntimeError(f"{len(active)} sample points could not be located in the mesh")
    return cur, w


def build_repa_sampler(mesh: IcoSphere, rows: int = 3, cols: int = 3, spacing: float | None = None) -> RePaSampler:
    """Rectangular tangent-plane patch sampler.

    Grid point ``(r, c)`` sits at arc offsets ``(c - cols//2) * spacing``
    along ``e1`` and ``(r - rows//2) * spacing`` along ``e2`` and is mapped
    to the sphere by the inverse gnomonic projection. ``spacing`` defaults
    to the mean edge arc length of the level.
    """
    if rows < 1 or cols < 1 or rows % 2 == 0 or cols % 2 == 0:
        raise ValueError("rows and cols must be odd and >= 1")
    if spacing is None:
        spacing = mean_edge_arc(mesh)
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    n = mesh.n_vertices
    c = mesh.vertices
    e1, e2 = tangent_frame(c)
    rr, cc = np.meshgrid(np.arange(rows) - rows // 2, np.arange(cols) - cols // 2, indexing="ij")
    u = np.tan(cc.ravel() * spacing)
    v = np.tan(rr.ravel() * spacing)
    pts = c[:, None, :] + u[None, :, None] * e1[:, None, :] + v[None, :, None] * e2[:, None, :]
    pts /= np.linalg.norm(pts, axis=2, keepdims=True)
    p = rows * cols

    # One incident triangle per vertex as the walk's start.
    _, first = np.unique(mesh.triangles.ravel(), return_index=True)
    start = np.repeat(first // 3, p)

    tri, lam = _locate(mesh, pts.reshape(-1, 3), start)
    lam[lam < 1e-12] = 0.0
    lam /= lam.sum(axis=1, keepdims=True)
    weights = lam.reshape(n, p, 3)
    anchors = mesh.triangles[tri].reshape(n, p, 3)
    weights.setflags(write=False)
    anchors.setflags(write=False)
    return RePaSampler(level=mesh.level, patch_shape=(rows, cols), spacing=float(spacing), weights=weights, anchors=anchors)


class Hierarchy:
    """Lazily built meshes, DiNe tables, edge parents and RePa samplers per level."""

    def __init__(self, repa_shape: tuple[int, int] = (3, 3)):
        self.repa_shape = repa_shape
        self._tables: dict[int, NeighborTable] = {}
        self._samplers: dict[int, RePaSampler] = {}

    def mesh(self, level: int) -> IcoSphere:
        return generate(level)

    def table(self, level: int) -> NeighborTable:
        if level not in self._tables:
            self._tables[level] = build_dine_table(generate(level))
        return self._tables[level]

    def parents(self, level: int) -> np.ndarray:
        return edge_parent_table(generate(level))

    def sampler(self, level: int) -> RePaSampler:
        if level not in self._samplers:
            self._samplers[level] = build_repa_sampler(generate(level), *self.repa_shape)
        return self._samplers[level]

    @cached_property
    def _levels(self):
        return {vertex_count(k): k for k in range(12)}

    def level_of(self, n_vertices: int) -> int:
        try:
            return self._levels[n_vertices]
        except KeyError:
            raise ValueError(f"{n_vertices} is not an icosphere vertex count") from None


_TABLE_MAGIC = b"DINE"


def write_table(path, table: NeighborTable) -> None:
    """Binary table: magic ``DINE``, u32 N, then N x 7 u32 slot indices."""
    with open(path, "wb") as fh:
        fh.write(_TABLE_MAGIC + struct.pack("<I", table.n_vertices))
        fh.write(np.ascontiguousarray(table.slots, dtype="<u4").tobytes())


def read_table(path) -> NeighborTable:
    raw = Path(path).read_bytes()
    if raw[:4] != _TABLE_MAGIC:
        raise MeshFormatError(f"{path}: bad magic {raw[:4]!r}, expected {_TABLE_MAGIC!r}")
    (n,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + n * 28:
        raise MeshFormatError(f"{path}: expected {8 + n * 28} bytes, found {len(raw)}")
    slots = np.frombuffer(raw, dtype="<u4", offset=8).reshape(n, 7).astype(np.int64)
    if slots.max() >= n:
        raise MeshFormatError(f"{path}: slot index out of range")
    level = int(round(np.log(max(n - 2, 10) / 10) / np.log(4)))
    if vertex_count(level) != n:
        raise MeshFormatError(f"{path}: {n} is not an icosphere vertex count")
    pent = slots[:, 1] == np.arange(n)
    return NeighborTable(level=level, slots=slots, pentagon_flags=pent)


def write_table_csv(path, table: NeighborTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex"] + [f"slot{i}" for i in range(7)] + ["pentagon"])
        for v, row in enumerate(table.slots):
            w.writerow([v, *row.tolist(), int(table.pentagon_flags[v])])
