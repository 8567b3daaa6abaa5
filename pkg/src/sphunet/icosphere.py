"""Icosahedral sphere meshes and their subdivision hierarchy.

Level 0 is the regular icosahedron; each further level splits every
triangle into four by inserting the normalized midpoint of each edge.
New vertices are appended after the coarse ones, so the first
``vertex_count(k - 1)`` rows of a level-``k`` mesh are exactly the
level ``k - 1`` mesh. Pooling and upsampling rely on this prefix order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "IcoSphere",
    "MeshFormatError",
    "generate",
    "subdivide",
    "vertex_count",
    "triangle_count",
    "edges",
    "adjacency",
    "validate",
    "write_mesh",
    "read_mesh",
]

PHI = (1.0 + np.sqrt(5.0)) / 2.0

# Fixed order: (0,±1,±φ), (±1,±φ,0), (±φ,0,±1).
_ICOSAHEDRON = np.array(
    [
        [0.0, 1.0, PHI],
        [0.0, -1.0, PHI],
        [0.0, 1.0, -PHI],
        [0.0, -1.0, -PHI],
        [1.0, PHI, 0.0],
        [-1.0, PHI, 0.0],
        [1.0, -PHI, 0.0],
        [-1.0, -PHI, 0.0],
        [PHI, 0.0, 1.0],
        [PHI, 0.0, -1.0],
        [-PHI, 0.0, 1.0],
        [-PHI, 0.0, -1.0],
    ]
)

_MAGIC = b"ICOS"
_VERSION = 1


class MeshFormatError(ValueError):
    """Raised when a mesh file is malformed."""


@dataclass(frozen=True, eq=False)
class IcoSphere:
    """One resolution of the icosahedral hierarchy.

    Attributes
    ----------
    level : int
        Subdivision index, 0 for the icosahedron.
    vertices : (N, 3) float64 array of unit vectors.
    triangles : (T, 3) int64 array, outward (counterclockwise) oriented.
    edge_parents : (N - N_prev, 2) int64 array. Row ``i`` holds the two
        coarse endpoints of the edge bisected by vertex ``N_prev + i``.
        Empty at level 0.
    """

    level: int
    vertices: np.ndarray
    triangles: np.ndarray
    edge_parents: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_coarse(self) -> int:
        """Vertex count of the parent level (equal to N at level 0)."""
        return self.n_vertices - len(self.edge_parents)

    def __eq__(self, other):
        if not isinstance(other, IcoSphere):
            return NotImplemented
        return (
            self.level == other.level
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.edge_parents, other.edge_parents)
        )

    __hash__ = object.__hash__


def vertex_count(level: int) -> int:
    """Closed form ``10 * 4**level + 2``."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    return 10 * 4**level + 2


def triangle_count(level: int) -> int:
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    return 20 * 4**level


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _icosahedron() -> IcoSphere:
    verts = _ICOSAHEDRON / np.linalg.norm(_ICOSAHEDRON, axis=1, keepdims=True)
    # Faces are the mutually adjacent triples; all edges have length 2 before scaling.
    d2 = ((_ICOSAHEDRON[:, None, :] - _ICOSAHEDRON[None, :, :]) ** 2).sum(-1)
    adj = np.isclose(d2, 4.0)
    faces = []
    for a in range(12):
        for b in range(a + 1, 12):
            if not adj[a, b]:
                continue
            for c in range(b + 1, 12):
                if adj[a, c] and adj[b, c]:
                    faces.append((a, b, c))
    faces = np.array(faces, dtype=np.int64)
    # Orient outward: normal must point away from the origin.
    va, vb, vc = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(vb - va, vc - va), va + vb + vc) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return IcoSphere(
        level=0,
        vertices=_frozen(verts),
        triangles=_frozen(faces),
        edge_parents=_frozen(np.zeros((0, 2), dtype=np.int64)),
    )


def edges(mesh: IcoSphere) -> np.ndarray:
    """Unique undirected edges as ``(min, max)`` rows in ascending order."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    n = mesh.n_vertices
    keys = np.unique(e[:, 0] * n + e[:, 1])
    return np.stack([keys // n, keys % n], axis=1)


def subdivide(mesh: IcoSphere) -> IcoSphere:
    """Split every triangle into four, appending one vertex per edge.

    New vertices are the normalized edge midpoints, ordered by ascending
    ``(min, max)`` edge key.
    """
    n = mesh.n_vertices
    e = edges(mesh)
    mid = mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    verts = np.concatenate([mesh.vertices, mid])

    keys = e[:, 0] * n + e[:, 1]

    def midpoint(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return n + np.searchsorted(keys, lo * n + hi)

    a, b, c = mesh.triangles.T
    ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
    tris = np.stack(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return IcoSphere(
        level=mesh.level + 1,
        vertices=_frozen(verts),
        triangles=_frozen(tris),
        edge_parents=_frozen(e.copy()),
    )


@lru_cache(maxsize=None)
def generate(level: int) -> IcoSphere:
    """Icosphere at the given subdivision level (cached, read-only arrays)."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if level == 0:
        return _icosahedron()
    return subdivide(generate(level - 1))


def adjacency(mesh: IcoSphere) -> tuple[np.ndarray, np.ndarray]:
    """CSR adjacency ``(indptr, indices)`` with each neighbor list sorted."""
    e = edges(mesh)
    both = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.zeros(mesh.n_vertices + 1, dtype=np.int64)
    np.cumsum(np.bincount(both[:, 0], minlength=mesh.n_vertices), out=indptr[1:])
    return indptr, both[:, 1].copy()


def validate(mesh: IcoSphere) -> None:
    """Check IcoSphere invariants, raising ``ValueError`` on the first failure."""
    n = mesh.n_vertices
    if n != vertex_count(mesh.level):
        raise ValueError(f"vertex count {n} != {vertex_count(mesh.level)}")
    if mesh.n_triangles != triangle_count(mesh.level):
        raise ValueError(f"triangle count {mesh.n_triangles} != {triangle_count(mesh.level)}")
    norms = np.linalg.norm(mesh.vertices, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-12:
        raise ValueError("vertex off the unit sphere")
    e = edges(mesh)
    if n - len(e) + mesh.n_triangles != 2:
        raise ValueError("Euler characteristic != 2")
    deg = np.bincount(e.ravel(), minlength=n)
    if np.count_nonzero(deg == 5) != 12 or np.count_nonzero(deg == 5) + np.count_nonzero(deg == 6) != n:
        raise ValueError("degree distribution is not 12 x 5 plus 6 elsewhere")
    if mesh.level > 0:
        n_prev = vertex_count(mesh.level - 1)
        if len(mesh.edge_parents) != n - n_prev or np.any(mesh.edge_parents >= n_prev):
            raise ValueError("edge_parents inconsistent with the prefix order")


def write_mesh(path, mesh: IcoSphere) -> None:
    """Binary little-endian mesh file (magic ``ICOS``, version 1)."""
    header = _MAGIC + struct.pack("<4I", _VERSION, mesh.level, mesh.n_vertices, mesh.n_triangles)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mesh.triangles, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(mesh.edge_parents, dtype="<u4").tobytes())


def read_mesh(path) -> IcoSphere:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise MeshFormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    if len(raw) < 20:
        raise MeshFormatError(f"{path}: truncated header")
    version, level, n, t = struct.unpack_from("<4I", raw, 4)
    if version != _VERSION:
        raise MeshFormatError(f"{path}: unsupported version {version}")
    n_new = n - vertex_count(level - 1) if level > 0 else 0
    expected = 20 + n * 24 + t * 12 + n_new * 8
    if len(raw) != expected:
        raise MeshFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = 20
    verts = np.frombuffer(raw, dtype="<f8", count=n * 3, offset=off).reshape(n, 3)
    off += n * 24
    tris = np.frombuffer(raw, dtype="<u4", count=t * 3, offset=off).reshape(t, 3)
    off += t * 12
    parents = np.frombuffer(raw, dtype="<u4", count=n_new * 2, offset=off).reshape(n_new, 2)
    if tris.size and tris.max() >= n:
        raise MeshFormatError(f"{path}: triangle index out of range")
    return IcoSphere(
        level=level,
        vertices=_frozen(verts.astype(np.float64)),
        triangles=_frozen(tris.astype(np.int64)),
        edge_parents=_frozen(parents.astype(np.int64)),
    )
