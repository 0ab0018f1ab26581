"""Articulated body model and linear-blend-skinning machinery."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .mesh import TriMesh, load_obj

TWO_PI = 2.0 * np.pi


class SkinningError(ValueError):
    """Invalid skeleton, pose, or weight data."""


@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy in topological order (parent precedes child)."""

    names: tuple
    parents: np.ndarray   # parent index per joint, -1 for the root
    offsets: np.ndarray   # rest-pose local offsets (J, 3)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if len(self.names) != len(parents) or offsets.shape != (len(parents), 3):
            raise SkinningError("names, parents, offsets must agree in joint count")
        if (parents == -1).sum() != 1:
            raise SkinningError("skeleton must have exactly one root")
        for j, p in enumerate(parents):
            if p >= j:
                raise SkinningError(f"joint {j} has parent {p}; parents must precede children")
        if not np.isfinite(offsets).all():
            raise SkinningError("non-finite joint offsets")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def rest_joint_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j, p in enumerate(self.parents):
            pos[j] = self.offsets[j] + (pos[p] if p >= 0 else 0.0)
        return pos


@dataclass(frozen=True)
class Pose:
    """Per-joint axis-angle rotations plus a root translation.

    Rotation vectors are canonicalized at construction so their norms stay
    below 2*pi.
    """

    rotvecs: np.ndarray       # (J, 3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rv = np.atleast_2d(np.asarray(self.rotvecs, dtype=np.float64))
        t = np.asarray(self.translation, dtype=np.float64)
        if rv.shape[1] != 3 or t.shape != (3,):
            raise SkinningError("rotvecs must be (J, 3) and translation (3,)")
        if not (np.isfinite(rv).all() and np.isfinite(t).all()):
            raise SkinningError("non-finite pose values")
        norms = np.linalg.norm(rv, axis=1)
        big = norms >= TWO_PI
        if big.any():
            rv = rv.copy()
            wrapped = np.mod(norms[big], TWO_PI)
            rv[big] = rv[big] * (wrapped / norms[big])[:, None]
        object.__setattr__(self, "rotvecs", rv)
        object.__setattr__(self, "translation", t)

    @property
    def n_joints(self) -> int:
        return len(self.rotvecs)

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)))


@dataclass(frozen=True)
class SkinnedBody:
    """Body mesh, skeleton, and per-vertex skinning weights."""

    mesh: TriMesh
    skeleton: Skeleton
    weights: np.ndarray       # dense (V, J); rows non-negative, sum to 1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.mesh.n_vertices, self.skeleton.n_joints):
            raise SkinningError(f"weights shape {w.shape} does not match "
                                f"({self.mesh.n_vertices}, {self.skeleton.n_joints})")
        if (w < -1e-12).any():
            raise SkinningError("negative skinning weight")
        sums = w.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise SkinningError(f"weights of vertex {bad} sum to {sums[bad]:.8f}, expected 1")
        object.__setattr__(self, "weights", w)

    def posed_vertices(self, pose: Pose) -> np.ndarray:
        return lbs(self.mesh.vertices, self.weights, skinning_transforms(self.skeleton, pose))


def joint_transforms(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Global 4x4 rigid transform per joint (forward kinematics).

    The root transform includes the pose translation; at the identity pose
    each transform is the pure translation to the joint's rest position.
    """
    if pose.n_joints != skeleton.n_joints:
        raise SkinningError(f"pose has {pose.n_joints} joints, skeleton has {skeleton.n_joints}")
    rots = Rotation.from_rotvec(pose.rotvecs).as_matrix()
    out = np.empty((skeleton.n_joints, 4, 4))
    for j, p in enumerate(skeleton.parents):
        local = np.eye(4)
        local[:3, :3] = rots[j]
        local[:3, 3] = skeleton.offsets[j]
        if p < 0:
            local[:3, 3] = local[:3, 3] + pose.translation
            out[j] = local
        else:
            out[j] = out[p] @ local
    return out


def skinning_transforms(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Rest-relative transforms T_j = G_j(pose) @ G_j(rest)^-1.

    These are the transforms LBS consumes: at the identity pose with zero
    translation every T_j is the identity.
    """
    posed = joint_transforms(skeleton, pose)
    rest_pos = skeleton.rest_joint_positions()
    inv_rest = np.tile(np.eye(4), (skeleton.n_joints, 1, 1))
    inv_rest[:, :3, 3] = -rest_pos
    return posed @ inv_rest


def lbs(vertices, weights, transforms) -> np.ndarray:
    """Linear blend skinning: each vertex is the weight-blended image under
    the per-joint rigid transforms."""
    vertices = np.asarray(vertices, dtype=np.float64)
    rot = transforms[:, :3, :3]
    trans = transforms[:, :3, 3]
    per_joint = np.einsum("jab,vb->jva", rot, vertices) + trans[:, None, :]
    return np.einsum("vj,jva->va", weights, per_joint)


def blend_maps(weights, transforms):
    """Per-vertex affine map (M_v, c_v) with lbs(x)_v = M_v x_v + c_v.

    Used to pull energy gradients on posed positions back to canonical
    displacements.
    """
    m = np.einsum("vj,jab->vab", weights, transforms[:, :3, :3])
    c = weights @ transforms[:, :3, 3]
    return m, c


def transfer_skinning_weights(garment: TriMesh, body: SkinnedBody) -> np.ndarray:
    """Copy each garment vertex's weights from its nearest body vertex.

    Ties resolve to the lowest body-vertex index (argmin over the exact
    squared distances).
    """
    if body.mesh.n_vertices == 0:
        raise SkinningError("empty body mesh")
    from .spatial import nearest_neighbors
    idx, _ = nearest_neighbors(garment.vertices, body.mesh.vertices)
    return body.weights[idx]


def pose_garment(template: TriMesh, dv, body: SkinnedBody, pose: Pose, garment_weights) -> np.ndarray:
    """Add canonical displacements, then skin with the garment weights."""
    dv = np.asarray(dv, dtype=np.float64)
    if dv.shape != template.vertices.shape:
        raise SkinningError(f"dV shape {dv.shape} does not match template {template.vertices.shape}")
    transforms = skinning_transforms(body.skeleton, pose)
    return lbs(template.vertices + dv, garment_weights, transforms)


# ---------------------------------------------------------------------------
# Body asset and pose-sequence files


def load_body(path) -> SkinnedBody:
    """Body asset: JSON with skeleton, sparse weights, and an OBJ reference."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("mesh_obj", "skeleton", "weights"):
        if key not in doc:
            raise SkinningError(f"body asset missing field '{key}'")
    mesh = load_obj(path.parent / doc["mesh_obj"])
    joints = doc["skeleton"]
    names = [j["name"] for j in joints]
    parents = [-1 if j["parent"] is None else int(j["parent"]) for j in joints]
    offsets = [j["offset"] for j in joints]
    skeleton = Skeleton(tuple(names), np.asarray(parents), np.asarray(offsets, dtype=np.float64))
    weights = np.zeros((mesh.n_vertices, skeleton.n_joints))
    sparse = doc["weights"]
    if len(sparse) != mesh.n_vertices:
        raise SkinningError(f"weights for {len(sparse)} vertices, mesh has {mesh.n_vertices}")
    for v, entries in enumerate(sparse):
        for j, w in entries:
            weights[v, int(j)] += float(w)
    return SkinnedBody(mesh=mesh, skeleton=skeleton, weights=weights)


def save_body(path, body: SkinnedBody, mesh_obj_name: str) -> None:
    sparse = []
    for row in body.weights:
        nz = np.flatnonzero(row > 0)
        sparse.append([[int(j), float(row[j])] for j in nz])
    doc = {
        "mesh_obj": mesh_obj_name,
        "skeleton": [
            {"name": n, "parent": None if p < 0 else int(p), "offset": [float(x) for x in off]}
            for n, p, off in zip(body.skeleton.names, body.skeleton.parents, body.skeleton.offsets)
        ],
        "weights": sparse,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_pose_csv(path, skeleton: Skeleton) -> list:
    """Pose sequence: one row per frame, root translation then 3 per joint."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["root_tx", "root_ty", "root_tz"]
        for name in skeleton.names:
            expected += [f"{name}_rx", f"{name}_ry", f"{name}_rz"]
        if header != expected:
            raise SkinningError(f"pose file header {header[:4]}... does not match skeleton "
                                f"(expected {expected[:4]}...)")
        poses = []
        for row in reader:
            if not row:
                continue
            vals = np.asarray([float(x) for x in row])
            if len(vals) != 3 + 3 * skeleton.n_joints:
                raise SkinningError(f"pose row has {len(vals)} values, expected "
                                    f"{3 + 3 * skeleton.n_joints}")
            poses.append(Pose(vals[3:].reshape(-1, 3), vals[:3]))
    return poses


def save_pose_csv(path, poses, skeleton: Skeleton) -> None:
    header = ["root_tx", "root_ty", "root_tz"]
    for name in skeleton.names:
        header += [f"{name}_rx", f"{name}_ry", f"{name}_rz"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for pose in poses:
            row = list(pose.translation) + list(pose.rotvecs.ravel())
            writer.writerow([repr(float(x)) for x in row])
