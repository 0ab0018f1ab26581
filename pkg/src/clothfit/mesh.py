"""Triangle meshes, rest-state precomputation, and per-face strain measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_FACE_AREA = 1e-12
MAX_FRAME_CONDITION = 1e8


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


@dataclass(frozen=True)
class TriMesh:
    """Manifold triangle mesh with a derived, deduplicated edge list.

    ``edges`` holds unique vertex pairs (low index first); ``edge_faces``
    holds the one or two adjacent face indices per edge (-1 padding for
    boundary edges). Validation is strict: meshes are rejected, never
    repaired.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray = field(init=False)
    edge_faces: np.ndarray = field(init=False)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {faces.shape}")
        if not np.isfinite(verts).all():
            raise MeshError("non-finite vertex coordinates")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            bad = int(np.argmax((faces < 0).any(axis=1) | (faces >= len(verts)).any(axis=1)))
            raise MeshError(f"face {bad} references a vertex outside [0, {len(verts)})")
        for f in range(len(faces)):
            a, b, c = faces[f]
            if a == b or b == c or a == c:
                raise MeshError(f"degenerate face {f}: repeated vertex index")
        areas = _face_areas(verts, faces)
        small = np.flatnonzero(areas <= MIN_FACE_AREA)
        if small.size:
            raise MeshError(f"degenerate face {int(small[0])}: rest area {areas[small[0]]:.3e} m^2")
        edges, edge_faces = _build_edges(faces)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_faces", edge_faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def interior_edge_mask(self) -> np.ndarray:
        return self.edge_faces[:, 1] >= 0


def _face_areas(verts, faces):
    u = verts[faces[:, 1]] - verts[faces[:, 0]]
    v = verts[faces[:, 2]] - verts[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(u, v), axis=1)


def _build_edges(faces):
    """Unique undirected edges and their adjacent faces; rejects non-manifold edges."""
    raw = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    raw_sorted = np.sort(raw, axis=1)
    face_of = np.tile(np.arange(len(faces)), 3)
    edges, inverse, counts = np.unique(raw_sorted, axis=0, return_inverse=True, return_counts=True)
    over = np.flatnonzero(counts > 2)
    if over.size:
        i, j = edges[over[0]]
        raise MeshError(f"non-manifold edge ({int(i)}, {int(j)}): {int(counts[over[0]])} adjacent faces")
    edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    slot = np.zeros(len(edges), dtype=np.int64)
    for k in order:
        e = inverse[k]
        edge_faces[e, slot[e]] = face_of[k]
        slot[e] += 1
    return edges, edge_faces


@dataclass(frozen=True)
class RestState:
    """Precomputed rest quantities consumed by every energy term.

    Per face: inverse material-frame matrix (2x2), rest area (m^2), and the
    warp-axis angle inside the face frame. Per interior edge: the bending
    stencil (edge endpoints plus the two opposite vertices), rest dihedral
    angle, rest edge length and adjacent-area sum. Per vertex: lumped mass.
    """

    mesh: TriMesh
    density: float
    thickness: float
    warp_direction: np.ndarray
    dm_inv: np.ndarray          # (F, 2, 2)
    face_areas: np.ndarray      # (F,)
    warp_angles: np.ndarray     # (F,)
    bend_stencil: np.ndarray    # (Ei, 4): i, j, opposite in face A, opposite in face B
    bend_rest_angle: np.ndarray  # (Ei,)
    bend_length: np.ndarray      # (Ei,)
    bend_area_sum: np.ndarray    # (Ei,)
    masses: np.ndarray           # (V,)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices


def build_rest_state(template: TriMesh, density: float, thickness: float,
                     warp_direction=(1.0, 0.0, 0.0)) -> RestState:
    """Precompute frames, areas, dihedral stencils, and lumped masses.

    ``density`` is an area density (kg/m^2); each face spreads density*area
    equally over its three vertices. ``thickness`` only enters the strain
    energy volume, never the mass.
    """
    if density <= 0 or thickness <= 0:
        raise MeshError(f"density and thickness must be positive, got {density}, {thickness}")
    warp = np.asarray(warp_direction, dtype=np.float64)
    n = np.linalg.norm(warp)
    if not np.isfinite(n) or n < 1e-12:
        raise MeshError("warp_direction must be a nonzero finite vector")
    warp = warp / n

    verts, faces = template.vertices, template.faces
    u1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    u2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    normals = np.cross(u1, u2)
    areas = 0.5 * np.linalg.norm(normals, axis=1)
    n_hat = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    # First frame axis: warp projected into the face plane; fall back to the
    # first edge direction when the projection degenerates.
    proj = warp[None, :] - (n_hat @ warp)[:, None] * n_hat
    proj_norm = np.linalg.norm(proj, axis=1)
    fallback = proj_norm < 1e-8
    e1 = np.where(fallback[:, None], u1 / np.linalg.norm(u1, axis=1, keepdims=True),
                  proj / np.maximum(proj_norm, 1e-30)[:, None])
    e2 = np.cross(n_hat, e1)
    warp_angles = np.where(fallback, 0.0,
                           np.arctan2(np.einsum("fi,fi->f", proj, e2),
                                      np.einsum("fi,fi->f", proj, e1)))

    dm = np.empty((len(faces), 2, 2))
    dm[:, 0, 0] = np.einsum("fi,fi->f", u1, e1)
    dm[:, 0, 1] = np.einsum("fi,fi->f", u2, e1)
    dm[:, 1, 0] = np.einsum("fi,fi->f", u1, e2)
    dm[:, 1, 1] = np.einsum("fi,fi->f", u2, e2)
    conds = np.linalg.cond(dm)
    bad = np.flatnonzero(~np.isfinite(conds) | (conds >= MAX_FRAME_CONDITION))
    if bad.size:
        raise MeshError(f"ill-conditioned material frame on face {int(bad[0])} "
                        f"(condition number {conds[bad[0]]:.3e})")
    dm_inv = np.linalg.inv(dm)

    stencil, rest_angle, length, area_sum = _bend_precompute(verts, faces, template, areas)

    masses = np.zeros(template.n_vertices)
    np.add.at(masses, faces.ravel(), np.repeat(density * areas / 3.0, 3))

    return RestState(mesh=template, density=float(density), thickness=float(thickness),
                     warp_direction=warp, dm_inv=dm_inv, face_areas=areas,
                     warp_angles=warp_angles, bend_stencil=stencil,
                     bend_rest_angle=rest_angle, bend_length=length,
                     bend_area_sum=area_sum, masses=masses)


def _bend_precompute(verts, faces, mesh, areas):
    interior = np.flatnonzero(mesh.interior_edge_mask())
    stencil = np.empty((len(interior), 4), dtype=np.int64)
    for row, e in enumerate(interior):
        i, j = mesh.edges[e]
        fa, fb = mesh.edge_faces[e]
        tri_a = faces[fa]
        # Orient (i, j) as the edge appears in face A so the dihedral sign is
        # consistent between rest and posed evaluations.
        for k in range(3):
            if tri_a[k] == j and tri_a[(k + 1) % 3] == i:
                i, j = j, i
                break
        opp_a = int(tri_a[~np.isin(tri_a, (i, j))][0])
        tri_b = faces[fb]
        opp_b = int(tri_b[~np.isin(tri_b, (i, j))][0])
        stencil[row] = (i, j, opp_a, opp_b)
    length = np.linalg.norm(verts[stencil[:, 1]] - verts[stencil[:, 0]], axis=1) \
        if len(stencil) else np.zeros(0)
    area_sum = (areas[mesh.edge_faces[interior, 0]] + areas[mesh.edge_faces[interior, 1]]) \
        if len(stencil) else np.zeros(0)
    rest_angle = dihedral_angles(verts, stencil) if len(stencil) else np.zeros(0)
    return stencil, rest_angle, length, area_sum


def dihedral_angles(positions, stencil):
    """Signed dihedral angle per bending stencil, zero for coplanar faces."""
    x0 = positions[stencil[:, 0]]
    x1 = positions[stencil[:, 1]]
    e = x1 - x0
    na = np.cross(e, positions[stencil[:, 2]] - x0)
    nb = np.cross(x0 - x1, positions[stencil[:, 3]] - x1)
    e_len2 = np.einsum("ei,ei->e", e, e)
    na2 = np.maximum(np.einsum("ei,ei->e", na, na), 1e-60)
    nb2 = np.maximum(np.einsum("ei,ei->e", nb, nb), 1e-60)
    inv_scale = 1.0 / np.sqrt(na2 * nb2 * np.maximum(e_len2, 1e-60))
    sine = np.einsum("ei,ei->e", e, np.cross(na, nb)) * inv_scale
    cosine = np.einsum("ei,ei->e", na, nb) / np.sqrt(na2 * nb2)
    return np.arctan2(sine, cosine)


def deformation_gradients(positions, rest: RestState) -> np.ndarray:
    """Reduced 2x2 deformation gradient per face.

    The deformed edge matrix is expressed in an orthonormal frame of the
    deformed face, so F^T F equals the Gram matrix of the 3D construction.
    """
    faces = rest.mesh.faces
    u1 = positions[faces[:, 1]] - positions[faces[:, 0]]
    u2 = positions[faces[:, 2]] - positions[faces[:, 0]]
    n = np.cross(u1, u2)
    n_hat = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
    f1 = u1 / np.maximum(np.linalg.norm(u1, axis=1, keepdims=True), 1e-30)
    f2 = np.cross(n_hat, f1)
    ds = np.empty((len(faces), 2, 2))
    ds[:, 0, 0] = np.einsum("fi,fi->f", u1, f1)
    ds[:, 0, 1] = np.einsum("fi,fi->f", u2, f1)
    ds[:, 1, 0] = np.einsum("fi,fi->f", u1, f2)
    ds[:, 1, 1] = np.einsum("fi,fi->f", u2, f2)
    return ds @ rest.dm_inv


def deformation_gradient(face: int, positions, rest: RestState) -> np.ndarray:
    """Reduced 2x2 deformation gradient of a single face."""
    if not 0 <= face < rest.mesh.n_faces:
        raise MeshError(f"face {face} outside [0, {rest.mesh.n_faces})")
    return deformation_gradients(np.asarray(positions, dtype=np.float64), rest)[face]


def green_strains(f_grads: np.ndarray) -> np.ndarray:
    """G = (F^T F - I) / 2, batched over leading axes."""
    ftf = np.einsum("...ki,...kj->...ij", f_grads, f_grads)
    return 0.5 * (ftf - np.eye(2))


def green_strain(f_grad) -> np.ndarray:
    return green_strains(np.asarray(f_grad, dtype=np.float64))


def face_grams(positions, rest: RestState) -> np.ndarray:
    """F^T F per face directly from 3D edge vectors (no frame needed)."""
    faces = rest.mesh.faces
    u1 = positions[faces[:, 1]] - positions[faces[:, 0]]
    u2 = positions[faces[:, 2]] - positions[faces[:, 0]]
    c = np.empty((len(faces), 2, 2))
    c[:, 0, 0] = np.einsum("fi,fi->f", u1, u1)
    c[:, 0, 1] = np.einsum("fi,fi->f", u1, u2)
    c[:, 1, 0] = c[:, 0, 1]
    c[:, 1, 1] = np.einsum("fi,fi->f", u2, u2)
    return np.einsum("fki,fkl,flj->fij", rest.dm_inv, c, rest.dm_inv)


# ---------------------------------------------------------------------------
# Wavefront OBJ input/output (triangles only; polygons are rejected)


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"{path}:{lineno}: face with {len(idx)} vertices; "
                                    "only triangles are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    if not verts:
        raise MeshError(f"{path}: no vertices found")
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, vertices, faces=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        if faces is not None:
            for f in np.asarray(faces, dtype=np.int64):
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_points(path) -> np.ndarray:
    """Point cloud from an OBJ vertex list (faces, if any, are ignored)."""
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts and parts[0] == "v":
                pts.append([float(x) for x in parts[1:4]])
    if not pts:
        raise MeshError(f"{path}: no points found")
    return np.asarray(pts, dtype=np.float64)
