"""Procedural test scenes: a tapered body of revolution with a small spine
skeleton, tube garments that drape against it under gravity, and seeded pose
samplers.

The body widens toward the base, so a tube garment slides down until hoop
tension balances gravity; the equilibrium geometry depends on the fabric
parameters, which is exactly what the recovery experiments need.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh
from .skinning import Pose, SkinnedBody, Skeleton


def _smoothstep(x, lo, hi):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def body_radius(z, r_top=0.05, r_bot=0.21, height=1.0, power=1.3):
    return r_top + (r_bot - r_top) * ((height - z) / height) ** power


def make_body(n_theta: int = 24, n_z: int = 120, r_top=0.05, r_bot=0.21,
              height: float = 1.0) -> SkinnedBody:
    """Closed surface of revolution with a 3-joint spine skeleton.

    The skinning-weight ramps sit below z=0.28 and above z=0.74 so the band
    where tube garments come to rest moves rigidly with the middle joint;
    the collision field there keeps the continuity of the unposed surface
    of revolution.
    """
    zs = np.linspace(0.0, height, n_z)
    verts = []
    for z in zs:
        r = body_radius(z, r_top, r_bot, height)
        for i in range(n_theta):
            a = 2.0 * np.pi * i / n_theta
            verts.append([r * np.cos(a), r * np.sin(a), z])
    faces = []
    for j in range(n_z - 1):
        for i in range(n_theta):
            a = j * n_theta + i
            b = j * n_theta + (i + 1) % n_theta
            c = (j + 1) * n_theta + (i + 1) % n_theta
            d = (j + 1) * n_theta + i
            faces.append([a, b, c])
            faces.append([a, c, d])
    top_apex = len(verts)
    verts.append([0.0, 0.0, height])
    bot_apex = len(verts)
    verts.append([0.0, 0.0, 0.0])
    top0 = (n_z - 1) * n_theta
    for i in range(n_theta):
        faces.append([top0 + i, top0 + (i + 1) % n_theta, top_apex])
        faces.append([(i + 1) % n_theta, i, bot_apex])
    mesh = TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))

    skeleton = Skeleton(("root", "spine1", "spine2"),
                        np.asarray([-1, 0, 1]),
                        np.asarray([[0.0, 0.0, 0.0],
                                    [0.0, 0.0, 0.25],
                                    [0.0, 0.0, 0.55]]))
    z_arr = mesh.vertices[:, 2]
    s1 = _smoothstep(z_arr, 0.16, 0.28)
    s2 = _smoothstep(z_arr, 0.74, 0.86)
    weights = np.stack([(1 - s1) * (1 - s2), s1 * (1 - s2), s2], axis=1)
    return SkinnedBody(mesh=mesh, skeleton=skeleton, weights=weights)


def make_tube(n_theta: int = 32, n_z: int = 30, radius: float = 0.105,
              z_lo: float = 0.585, z_hi: float = 0.82) -> TriMesh:
    """Open garment tube around the body axis, normals outward."""
    verts = []
    for z in np.linspace(z_lo, z_hi, n_z):
        for i in range(n_theta):
            a = 2.0 * np.pi * i / n_theta
            verts.append([radius * np.cos(a), radius * np.sin(a), z])
    faces = []
    for j in range(n_z - 1):
        for i in range(n_theta):
            a = j * n_theta + i
            b = j * n_theta + (i + 1) % n_theta
            c = (j + 1) * n_theta + (i + 1) % n_theta
            d = (j + 1) * n_theta + i
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))


def sample_pose(rng, n_joints: int = 3, amplitude: float = 0.25) -> Pose:
    """Random spine bend; the root stays fixed so gravity keeps its meaning."""
    rv = np.zeros((n_joints, 3))
    for j, scale in ((1, 1.0), (2, 0.8)):
        axis = rng.standard_normal(3)
        axis[2] *= 0.2
        axis /= np.linalg.norm(axis)
        rv[j] = axis * rng.uniform(0.2, 1.0) * amplitude * scale
    return Pose(rv)


def sample_poses(rng, count: int, n_joints: int = 3, amplitude: float = 0.25) -> list:
    return [sample_pose(rng, n_joints, amplitude) for _ in range(count)]


def sample_pose_sequence(rng, length: int, n_joints: int = 3,
                         amplitude: float = 0.25) -> list:
    """Smooth random walk in joint-rotation space (for dynamic windows)."""
    rv = np.zeros((n_joints, 3))
    for j in (1, 2):
        axis = rng.standard_normal(3)
        axis[2] *= 0.2
        rv[j] = axis / np.linalg.norm(axis) * rng.uniform(0.1, 0.6) * amplitude
    seq = []
    for _ in range(length):
        step = rng.standard_normal((n_joints, 3)) * amplitude * 0.08
        step[0] = 0.0
        rv = np.clip(rv + step, -amplitude, amplitude)
        seq.append(Pose(rv.copy()))
    return seq


def standard_garment(resolution: str = "full") -> TriMesh:
    """The bundled drape tube: 960 vertices at full resolution."""
    if resolution == "full":
        return make_tube(n_theta=32, n_z=30)
    if resolution == "coarse":
        return make_tube(n_theta=24, n_z=14)
    if resolution == "tiny":
        return make_tube(n_theta=16, n_z=8)
    raise ValueError(f"unknown resolution '{resolution}'")


def lower_garment(resolution: str = "coarse") -> TriMesh:
    """Snug tube for the two-garment scenario; its rest radius is below the
    body radius over part of its span, so it holds by hoop tension."""
    if resolution == "coarse":
        return make_tube(n_theta=24, n_z=14, radius=0.115, z_lo=0.30, z_hi=0.64)
    if resolution == "tiny":
        return make_tube(n_theta=16, n_z=8, radius=0.115, z_lo=0.30, z_hi=0.64)
    raise ValueError(f"unknown resolution '{resolution}'")


def upper_garment(resolution: str = "coarse") -> TriMesh:
    """Looser tube that comes to rest overlapping the lower garment's span."""
    if resolution == "coarse":
        return make_tube(n_theta=24, n_z=14, radius=0.135, z_lo=0.42, z_hi=0.68)
    if resolution == "tiny":
        return make_tube(n_theta=16, n_z=8, radius=0.135, z_lo=0.42, z_hi=0.68)
    raise ValueError(f"unknown resolution '{resolution}'")
