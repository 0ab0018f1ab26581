"""Exact nearest-neighbor queries and mesh normal utilities.

The accelerated path (a k-d tree) must reproduce brute force bit-exactly:
candidate distances are recomputed with the same numpy expression the brute
force uses, and ties resolve to the lowest reference index.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_CHUNK = 256


def _exact_d2(query, ref_pts):
    """Squared distances computed the same way in every code path."""
    return ((query[:, None, :] - ref_pts[None, :, :]) ** 2).sum(axis=-1)


def brute_force_nearest(query, ref):
    """Reference implementation: argmin over all pairs (lowest index wins ties)."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    idx = np.empty(len(query), dtype=np.int64)
    d2 = np.empty(len(query))
    for start in range(0, len(query), _CHUNK):
        sl = slice(start, start + _CHUNK)
        dist = _exact_d2(query[sl], ref)
        idx[sl] = np.argmin(dist, axis=1)
        d2[sl] = dist[np.arange(dist.shape[0]), idx[sl]]
    return idx, d2


def nearest_neighbors(query, ref, tree: cKDTree | None = None):
    """Nearest reference point per query, identical to brute_force_nearest.

    A k-d tree proposes candidates; exact distances are then recomputed so the
    returned values and tie-breaks match the brute force path bit for bit.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(ref) == 0:
        raise ValueError("empty reference set")
    k = min(4, len(ref))
    if tree is None:
        tree = cKDTree(ref)
    _, cand = tree.query(query, k=k)
    cand = np.atleast_2d(cand)
    if cand.shape[0] != len(query):
        cand = cand.reshape(len(query), -1)
    cand_d2 = ((query[:, None, :] - ref[cand]) ** 2).sum(axis=-1)
    best = cand_d2.min(axis=1)
    # Lowest index among exact ties; if every candidate ties, the true lowest
    # index might sit outside the candidate set, so fall back to brute force.
    ties = cand_d2 == best[:, None]
    masked = np.where(ties, cand, np.iinfo(np.int64).max)
    idx = masked.min(axis=1)
    ambiguous = ties.all(axis=1) if k > 1 else np.zeros(len(query), dtype=bool)
    if ambiguous.any():
        bi, bd = brute_force_nearest(query[ambiguous], ref)
        idx[ambiguous] = bi
        best[ambiguous] = bd
    return idx, best


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals (unit length)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    u = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    v = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    fn = np.cross(u, v)  # magnitude 2*area weights the accumulation
    out = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(out, faces[:, c], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-30)
