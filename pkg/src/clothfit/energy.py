"""Physics energy terms for a draped garment and their analytic gradients,
both with respect to vertex positions and with respect to the fabric
parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .materials import MaterialParams, stiffness_eval
from .mesh import RestState
from .spatial import nearest_neighbors

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


class EnergyError(RuntimeError):
    """Non-finite energy; carries the name of the offending term."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} energy: {value}")
        self.term = term


@dataclass(frozen=True)
class EnergyBreakdown:
    """Per-term energies in joules. ``collision`` is the unweighted penalty
    sum; ``total`` applies the collision weight."""

    strain: float
    bend: float
    gravity: float
    collision: float
    dynamic: float
    total: float

    def as_row(self) -> dict:
        return {"E_strain": self.strain, "E_bend": self.bend, "E_gravity": self.gravity,
                "E_collision": self.collision, "E_dyn": self.dynamic, "total": self.total}


@dataclass
class SimContext:
    """Everything an energy evaluation needs besides the garment positions.

    Absent history frames put the context in static mode (the dynamic term
    is dropped). The posed body is fixed per context; its nearest-vertex
    lookup structure is built once and reused across evaluations, while the
    garment-to-body correspondences themselves are recomputed per call.
    """

    rest: RestState
    material: MaterialParams
    gravity: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_GRAVITY))
    dt: float = 1.0 / 30.0
    delta_body: float = 2e-3
    lambda_collision: float = 25.0
    body_vertices: np.ndarray | None = None
    body_normals: np.ndarray | None = None
    prev_positions: np.ndarray | None = None
    prev_prev_positions: np.ndarray | None = None
    body_tree: cKDTree | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.delta_body < 0:
            raise ValueError(f"delta_body must be non-negative, got {self.delta_body}")
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        if (self.body_vertices is None) != (self.body_normals is None):
            raise ValueError("body_vertices and body_normals must be supplied together")
        if (self.prev_positions is None) != (self.prev_prev_positions is None):
            raise ValueError("dynamic mode needs both history frames")
        if self.body_vertices is not None and self.body_tree is None:
            self.body_tree = cKDTree(self.body_vertices)

    @property
    def static_mode(self) -> bool:
        return self.prev_positions is None

    def with_body(self, body_vertices, body_normals) -> "SimContext":
        return SimContext(rest=self.rest, material=self.material, gravity=self.gravity,
                          dt=self.dt, delta_body=self.delta_body,
                          lambda_collision=self.lambda_collision,
                          body_vertices=body_vertices, body_normals=body_normals,
                          prev_positions=self.prev_positions,
                          prev_prev_positions=self.prev_prev_positions)

    def with_material(self, material: MaterialParams) -> "SimContext":
        return SimContext(rest=self.rest, material=material, gravity=self.gravity,
                          dt=self.dt, delta_body=self.delta_body,
                          lambda_collision=self.lambda_collision,
                          body_vertices=self.body_vertices, body_normals=self.body_normals,
                          prev_positions=self.prev_positions,
                          prev_prev_positions=self.prev_prev_positions,
                          body_tree=self.body_tree)

    def with_history(self, prev, prev_prev) -> "SimContext":
        ctx = SimContext(rest=self.rest, material=self.material, gravity=self.gravity,
                         dt=self.dt, delta_body=self.delta_body,
                         lambda_collision=self.lambda_collision,
                         body_vertices=self.body_vertices, body_normals=self.body_normals,
                         prev_positions=prev, prev_prev_positions=prev_prev,
                         body_tree=self.body_tree)
        return ctx


def _sym_from_vec(components):
    """(..., 3) components (g11, g22, g12) to symmetric (..., 2, 2) matrices
    such that A : dG reproduces the scalar chain rule on the shared
    off-diagonal."""
    a = np.zeros(components.shape[:-1] + (2, 2))
    a[..., 0, 0] = components[..., 0]
    a[..., 1, 1] = components[..., 1]
    a[..., 0, 1] = 0.5 * components[..., 2]
    a[..., 1, 0] = 0.5 * components[..., 2]
    return a


def _strain_state(positions, ctx: SimContext):
    rest = ctx.rest
    faces = rest.mesh.faces
    u1 = positions[faces[:, 1]] - positions[faces[:, 0]]
    u2 = positions[faces[:, 2]] - positions[faces[:, 0]]
    e3 = np.stack([u1, u2], axis=-1)                      # (F, 3, 2)
    t1 = e3 @ rest.dm_inv                                 # (F, 3, 2)
    ftf = t1.transpose(0, 2, 1) @ t1
    g = 0.5 * (ftf - np.eye(2))
    g11, g22, g12 = g[:, 0, 0], g[:, 1, 1], g[:, 0, 1]
    stiff = stiffness_eval(ctx.material, g11, g22, g12, rest.warp_angles)
    tr = g11 + g22
    tr2 = g11 * g11 + g22 * g22 + 2.0 * g12 * g12
    vol = rest.face_areas * ctx.material.thickness
    return g, stiff, tr, tr2, vol, t1


def _scatter_face_grad(grad, faces, h):
    """Accumulate per-face (3, 2) edge-matrix gradients onto vertices in
    fixed face order."""
    np.add.at(grad, faces[:, 1], h[..., 0])
    np.add.at(grad, faces[:, 2], h[..., 1])
    np.add.at(grad, faces[:, 0], -(h[..., 0] + h[..., 1]))


def strain_energy(positions, ctx: SimContext):
    """Anisotropic StVK membrane energy with strain-dependent Lame values.

    Returns (E, dE/dx, dE/dlambda_grid, dE/dmu_grid). The position gradient
    includes the chain through the strain dependence of the stiffness
    lookup.
    """
    g, stiff, tr, tr2, vol, t1 = _strain_state(positions, ctx)
    rest = ctx.rest
    energy = float(np.sum(vol * (0.5 * stiff.lam * tr * tr + stiff.mu * tr2)))

    a_lam = _sym_from_vec(stiff.dlam.T)
    a_mu = _sym_from_vec(stiff.dmu.T)
    stress = (stiff.lam * tr)[:, None, None] * np.eye(2) \
        + 2.0 * stiff.mu[:, None, None] * g \
        + (0.5 * tr * tr)[:, None, None] * a_lam \
        + tr2[:, None, None] * a_mu
    h = vol[:, None, None] * (t1 @ stress @ rest.dm_inv.transpose(0, 2, 1))
    grad = np.zeros_like(positions)
    _scatter_face_grad(grad, rest.mesh.faces, h)

    d_lam = np.zeros(ctx.material.n_grid)
    d_mu = np.zeros(ctx.material.n_grid)
    np.add.at(d_lam, stiff.node_idx, (0.5 * vol * tr * tr)[:, None] * stiff.node_w)
    np.add.at(d_mu, stiff.node_idx, (vol * tr2)[:, None] * stiff.node_w)
    shape = ctx.material.grid_shape
    return energy, grad, d_lam.reshape(shape), d_mu.reshape(shape)


def _bend_state(positions, rest: RestState):
    st = rest.bend_stencil
    x0, x1 = positions[st[:, 0]], positions[st[:, 1]]
    x2, x3 = positions[st[:, 2]], positions[st[:, 3]]
    e = x1 - x0
    e_len2 = np.einsum("ei,ei->e", e, e)
    e_len = np.sqrt(e_len2)
    na = np.cross(e, x2 - x0)
    nb = np.cross(x0 - x1, x3 - x1)
    na2 = np.maximum(np.einsum("ei,ei->e", na, na), 1e-60)
    nb2 = np.maximum(np.einsum("ei,ei->e", nb, nb), 1e-60)
    inv_scale = 1.0 / np.sqrt(na2 * nb2 * np.maximum(e_len2, 1e-60))
    sine = np.einsum("ei,ei->e", e, np.cross(na, nb)) * inv_scale
    cosine = np.einsum("ei,ei->e", na, nb) / np.sqrt(na2 * nb2)
    tau = np.arctan2(sine, cosine)
    return st, x0, x2, x3, e, e_len, e_len2, na, nb, na2, nb2, tau


def bending_energy(positions, ctx: SimContext):
    """Dihedral bending energy l^2 k / (8A) (tau - tau_rest)^2 summed over
    interior edges.

    Returns (E, dE/dx, dE/dk_bending); the energy is linear in k_bending.
    """
    rest = ctx.rest
    if len(rest.bend_stencil) == 0:
        return 0.0, np.zeros_like(positions), 0.0
    st, x0, x2, x3, e, e_len, e_len2, na, nb, na2, nb2, tau = _bend_state(positions, rest)
    coeff = rest.bend_length ** 2 / (8.0 * rest.bend_area_sum)
    diff = tau - rest.bend_rest_angle
    unit_energy = float(np.sum(coeff * diff * diff))
    k = ctx.material.k_bending
    energy = k * unit_energy

    # Dihedral-angle gradient (edge endpoints get the barycentric split of
    # the two opposite-vertex terms; the four gradients sum to zero).
    t2 = np.einsum("ei,ei->e", x2 - x0, e) / e_len2
    t3 = np.einsum("ei,ei->e", x3 - x0, e) / e_len2
    ga = -(e_len / na2)[:, None] * na
    gb = -(e_len / nb2)[:, None] * nb
    scale = (2.0 * k * coeff * diff)[:, None]
    grad = np.zeros_like(positions)
    np.add.at(grad, st[:, 2], scale * ga)
    np.add.at(grad, st[:, 3], scale * gb)
    np.add.at(grad, st[:, 0], scale * (-(1.0 - t2)[:, None] * ga - (1.0 - t3)[:, None] * gb))
    np.add.at(grad, st[:, 1], scale * (-t2[:, None] * ga - t3[:, None] * gb))
    return energy, grad, unit_energy


def gravity_energy(positions, ctx: SimContext):
    """Gravitational potential -sum(m_v g . x_v)."""
    m = ctx.rest.masses
    energy = -float(np.sum(m * (positions @ ctx.gravity)))
    grad = -m[:, None] * ctx.gravity[None, :]
    return energy, grad


def body_collision_energy(positions, ctx: SimContext):
    """Cubic penalty on penetration past the body offset surface.

    Zero (with zero gradient) whenever every garment vertex sits at least
    delta_body outside the body along the local normal; C1 at activation.
    Correspondences are the nearest posed body vertex, recomputed per call.
    """
    if ctx.body_vertices is None:
        return 0.0, np.zeros_like(positions)
    idx, _ = nearest_neighbors(positions, ctx.body_vertices, tree=ctx.body_tree)
    b = ctx.body_vertices[idx]
    n = ctx.body_normals[idx]
    depth = ctx.delta_body - np.einsum("vi,vi->v", n, positions - b)
    act = depth > 0
    energy = float(np.sum(depth[act] ** 3))
    grad = np.zeros_like(positions)
    grad[act] = -3.0 * (depth[act] ** 2)[:, None] * n[act]
    return energy, grad


def dynamic_energy(positions, ctx: SimContext):
    """Implicit-Euler inertial term against the history-extrapolated state."""
    if ctx.static_mode:
        return 0.0, np.zeros_like(positions)
    target = 2.0 * ctx.prev_positions - ctx.prev_prev_positions
    diff = positions - target
    m = ctx.rest.masses
    inv = 1.0 / (2.0 * ctx.dt * ctx.dt)
    energy = float(np.sum(m * np.einsum("vi,vi->v", diff, diff)) * inv)
    grad = (2.0 * inv) * m[:, None] * diff
    return energy, grad


def total_physics(positions, ctx: SimContext):
    """All five terms with the collision weight applied.

    Returns (EnergyBreakdown, dE/dx, (dE/dlambda_grid, dE/dmu_grid, dE/dk)).
    Summation order is fixed for bit-level determinism.
    """
    e_s, g_s, d_lam, d_mu = strain_energy(positions, ctx)
    e_b, g_b, unit_bend = bending_energy(positions, ctx)
    e_g, g_g = gravity_energy(positions, ctx)
    e_c, g_c = body_collision_energy(positions, ctx)
    e_d, g_d = dynamic_energy(positions, ctx)
    lam_c = ctx.lambda_collision
    total = e_s + e_b + e_g + lam_c * e_c + e_d
    breakdown = EnergyBreakdown(strain=e_s, bend=e_b, gravity=e_g, collision=e_c,
                                dynamic=e_d, total=total)
    grad = g_s + g_b + g_g + lam_c * g_c + g_d
    return breakdown, grad, (d_lam, d_mu, unit_bend)


def check_finite(breakdown: EnergyBreakdown) -> None:
    for term in ("strain", "bend", "gravity", "collision", "dynamic"):
        v = getattr(breakdown, term)
        if not np.isfinite(v):
            raise EnergyError(term, v)


def theta_vector(material: MaterialParams) -> np.ndarray:
    """Stacked raw parameter vector [lambda grid, mu grid, k_bending]."""
    return np.concatenate([material.lambda_samples.ravel(),
                           material.mu_samples.ravel(),
                           [material.k_bending]])


def material_from_theta(material: MaterialParams, theta: np.ndarray) -> MaterialParams:
    n = material.n_grid
    return material.with_values(lambda_samples=theta[:n].reshape(material.grid_shape),
                                mu_samples=theta[n:2 * n].reshape(material.grid_shape),
                                k_bending=float(theta[2 * n]))


def gradient_theta_decomposition(positions, ctx: SimContext,
                                 include_collision: bool = True,
                                 include_dynamics: bool = True):
    """Affine decomposition of the position gradient in the raw parameters.

    Returns (g0, J) with dE/dx = g0 + sum_t theta_t J[t], theta ordered as
    in ``theta_vector``. The strain and bending gradients are exactly linear
    in the parameters; gravity, collision, and dynamics form the constant
    part.
    """
    rest = ctx.rest
    faces = rest.mesh.faces
    n_grid = ctx.material.n_grid
    n_col = 2 * n_grid + 1
    n_v = rest.n_vertices
    jac = np.zeros((n_col, n_v, 3))

    g, stiff, tr, tr2, vol, t1 = _strain_state(positions, ctx)
    # Per face and stencil node: d(effective node weight)/dG as symmetric
    # matrices.
    dw = np.moveaxis(stiff.dnode_w, 0, -1)                 # (F, 8, 3)
    a_w = _sym_from_vec(dw)                                # (F, 8, 2, 2)
    eye = np.eye(2)
    s_lam = stiff.node_w[..., None, None] * tr[:, None, None, None] * eye \
        + (0.5 * tr * tr)[:, None, None, None] * a_w
    s_mu = 2.0 * stiff.node_w[..., None, None] * g[:, None, :, :] \
        + tr2[:, None, None, None] * a_w
    left = (vol[:, None, None] * t1)[:, None, :, :]        # (F, 1, 3, 2)
    right = rest.dm_inv.transpose(0, 2, 1)[:, None, :, :]  # (F, 1, 2, 2)
    h_lam = left @ s_lam @ right
    h_mu = left @ s_mu @ right

    flat = jac.reshape(n_col * n_v, 3)
    for h, block in ((h_lam, 0), (h_mu, n_grid)):
        col = block + stiff.node_idx                       # (F, 8)
        np.add.at(flat, (col * n_v + faces[:, 1][:, None]).ravel(), h[..., 0].reshape(-1, 3))
        np.add.at(flat, (col * n_v + faces[:, 2][:, None]).ravel(), h[..., 1].reshape(-1, 3))
        np.add.at(flat, (col * n_v + faces[:, 0][:, None]).ravel(),
                  -(h[..., 0] + h[..., 1]).reshape(-1, 3))

    unit_ctx = ctx.with_material(ctx.material.with_values(k_bending=1.0))
    _, bend_grad_unit, _ = bending_energy(positions, unit_ctx)
    jac[2 * n_grid] = bend_grad_unit

    _, g_grav = gravity_energy(positions, ctx)
    g0 = g_grav
    if include_collision:
        _, g_coll = body_collision_energy(positions, ctx)
        g0 = g0 + ctx.lambda_collision * g_coll
    if include_dynamics:
        _, g_dyn = dynamic_energy(positions, ctx)
        g0 = g0 + g_dyn
    return g0, jac
