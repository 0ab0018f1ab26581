"""Geometry metrics: symmetric Chamfer distance and penetration statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spatial import brute_force_nearest, nearest_neighbors, vertex_normals


def chamfer(a, b, brute: bool = False) -> float:
    """Symmetric Chamfer distance in m^2.

    Mean squared nearest-neighbor distance from a to b plus the same from b
    to a. The accelerated path recomputes candidate distances exactly, so it
    equals the brute-force path bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires non-empty point sets")
    nn = brute_force_nearest if brute else nearest_neighbors
    _, d_ab = nn(a, b)
    _, d_ba = nn(b, a)
    return float(np.mean(d_ab) + np.mean(d_ba))


def chamfer_with_grad(pred, target):
    """Chamfer value plus its gradient with respect to the first point set.

    Correspondences are held fixed within the evaluation, matching the
    piecewise-smooth structure of the metric.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    idx_pt, d_pt = nearest_neighbors(pred, target)
    idx_tp, d_tp = nearest_neighbors(target, pred)
    value = float(np.mean(d_pt) + np.mean(d_tp))
    grad = (2.0 / len(pred)) * (pred - target[idx_pt])
    np.add.at(grad, idx_tp, (2.0 / len(target)) * (pred[idx_tp] - target))
    return value, grad


@dataclass(frozen=True)
class PenetrationStats:
    count: int
    max_depth: float
    mean_depth: float   # mean over penetrating vertices; 0 when none

    def as_dict(self) -> dict:
        return {"count": self.count, "max_depth": self.max_depth,
                "mean_depth": self.mean_depth}


def penetration_stats(points, ref_vertices, ref_normals, delta: float) -> PenetrationStats:
    """Penetration of ``points`` past the offset surface of a reference mesh.

    Clearance is measured along the nearest reference vertex's normal; depth
    is max(0, delta - clearance).
    """
    points = np.asarray(points, dtype=np.float64)
    idx, _ = nearest_neighbors(points, ref_vertices)
    clearance = np.einsum("vi,vi->v", ref_normals[idx], points - ref_vertices[idx])
    depth = np.maximum(delta - clearance, 0.0)
    pen = depth > 0
    count = int(pen.sum())
    if count == 0:
        return PenetrationStats(0, 0.0, 0.0)
    return PenetrationStats(count, float(depth.max()), float(depth[pen].mean()))


def mesh_penetration_stats(points, ref_mesh_vertices, ref_faces, delta: float) -> PenetrationStats:
    """Convenience wrapper computing area-weighted reference normals."""
    normals = vertex_normals(ref_mesh_vertices, ref_faces)
    return penetration_stats(points, ref_mesh_vertices, normals, delta)
