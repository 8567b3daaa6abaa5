"""The 60 rotations of the icosahedron and the vertex permutations they induce."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .icosphere import adjacency, generate

__all__ = ["icosahedral_rotations", "vertex_permutation", "rotation_permutations"]

MATCH_TOLERANCE = 1e-9


def _frame(a, b):
    """Right-handed orthonormal frame built from two non-collinear vectors."""
    e1 = a / np.linalg.norm(a)
    e2 = b - (b @ e1) * e1
    e2 /= np.linalg.norm(e2)
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


@lru_cache(maxsize=None)
def icosahedral_rotations() -> np.ndarray:
    """All 60 orientation-preserving symmetries as a (60, 3, 3) array.

    Index 0 is the identity. A symmetry is fixed by the image of vertex 0
    (12 choices) and of one of its neighbors (5 choices).
    """
    ico = generate(0)
    v = ico.vertices
    indptr, nbrs = adjacency(ico)
    src = _frame(v[0], v[nbrs[indptr[0]]])
    rots = []
    for a in range(12):
        for b in nbrs[indptr[a] : indptr[a + 1]]:
            rots.append(_frame(v[a], v[b]) @ src.T)
    rots = np.array(rots)
    # Put the identity first.
    ident = int(np.argmin(np.abs(rots - np.eye(3)).sum(axis=(1, 2))))
    rots[[0, ident]] = rots[[ident, 0]]
    rots[0] = np.eye(3)
    rots.setflags(write=False)
    return rots


def vertex_permutation(vertices: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` with ``rotation @ vertices[i] == vertices[perm[i]]``.

    Raises ``ValueError`` if some rotated vertex has no mesh vertex within
    ``MATCH_TOLERANCE``; that means the rotation is not a mesh symmetry.
    """
    rotated = vertices @ rotation.T
    dist, perm = cKDTree(vertices).query(rotated)
    if np.max(dist) > MATCH_TOLERANCE:
        raise ValueError(f"rotation is not a mesh symmetry (mismatch {np.max(dist):.3g})")
    if len(np.unique(perm)) != len(perm):
        raise ValueError("rotation matched two vertices to the same target")
    return perm


@lru_cache(maxsize=None)
def rotation_permutations(level: int) -> np.ndarray:
    """(60, N) array of the vertex permutations at ``level``."""
    verts = generate(level).vertices
    perms = np.stack([vertex_permutation(verts, r) for r in icosahedral_rotations()])
    perms.setflags(write=False)
    return perms
