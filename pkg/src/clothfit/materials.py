"""Fabric parameters: strain-dependent Lame samples on an (s, phi) lattice
plus a bending stiffness, with the interpolation machinery used by the
strain energy and the material fit."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_STRAIN_LEVELS = (0.0, 0.05, 0.10, 0.20)
DEFAULT_ANGLE_LEVELS_DEG = (0.0, 45.0, 90.0)


class MaterialError(ValueError):
    """Invalid material parameter data."""


@dataclass(frozen=True)
class MaterialParams:
    """Optimizable fabric parameter set.

    ``lambda_samples`` and ``mu_samples`` are (S, P) grids over strain
    magnitude levels x warp-angle levels. ``k_bending`` is the bending
    stiffness; ``scale_k`` anchors its log-space reparameterization.
    ``density`` (kg/m^2) and ``thickness`` (m) are fixed constants, never
    optimized.
    """

    strain_levels: np.ndarray
    angle_levels: np.ndarray      # radians, ascending
    lambda_samples: np.ndarray    # (S, P)
    mu_samples: np.ndarray        # (S, P)
    k_bending: float
    density: float
    thickness: float
    scale_k: float

    def __post_init__(self):
        s = np.asarray(self.strain_levels, dtype=np.float64)
        a = np.asarray(self.angle_levels, dtype=np.float64)
        lam = np.asarray(self.lambda_samples, dtype=np.float64)
        mu = np.asarray(self.mu_samples, dtype=np.float64)
        if s.ndim != 1 or len(s) < 2 or (np.diff(s) <= 0).any():
            raise MaterialError("strain_levels must be ascending with at least 2 entries")
        if a.ndim != 1 or len(a) < 2 or (np.diff(a) <= 0).any():
            raise MaterialError("angle_levels must be ascending with at least 2 entries")
        shape = (len(s), len(a))
        if lam.shape != shape or mu.shape != shape:
            raise MaterialError(f"sample grids must have shape {shape}, "
                                f"got {lam.shape} and {mu.shape}")
        if (lam < 0).any() or (mu < 0).any():
            raise MaterialError("lambda and mu samples must be non-negative")
        if not self.k_bending > 0:
            raise MaterialError(f"k_bending must be positive, got {self.k_bending}")
        if not self.density > 0 or not self.thickness > 0:
            raise MaterialError("density and thickness must be positive")
        if not self.scale_k > 0:
            raise MaterialError("scale_k must be positive")
        object.__setattr__(self, "strain_levels", s)
        object.__setattr__(self, "angle_levels", a)
        object.__setattr__(self, "lambda_samples", lam)
        object.__setattr__(self, "mu_samples", mu)

    @property
    def grid_shape(self):
        return self.lambda_samples.shape

    @property
    def n_grid(self) -> int:
        return self.lambda_samples.size

    @property
    def k_raw(self) -> float:
        return float(np.log(self.k_bending / self.scale_k))

    def with_values(self, lambda_samples=None, mu_samples=None, k_bending=None) -> "MaterialParams":
        """New instance with replaced sample values; grid shape is immutable."""
        kwargs = {}
        if lambda_samples is not None:
            lam = np.asarray(lambda_samples, dtype=np.float64)
            if lam.shape != self.grid_shape:
                raise MaterialError("grid shape is immutable across optimization")
            kwargs["lambda_samples"] = lam
        if mu_samples is not None:
            mu = np.asarray(mu_samples, dtype=np.float64)
            if mu.shape != self.grid_shape:
                raise MaterialError("grid shape is immutable across optimization")
            kwargs["mu_samples"] = mu
        if k_bending is not None:
            kwargs["k_bending"] = float(k_bending)
        return replace(self, **kwargs)


def reparam_bending(k_raw: float, scale_k: float) -> float:
    """k_bending = exp(k_raw) * scale_k; positive for every real k_raw."""
    return float(np.exp(k_raw) * scale_k)


def calibrate_scale_k(material: MaterialParams) -> MaterialParams:
    """Set scale_k to the current k_bending so k_raw starts at zero.

    A unit step in k_raw then scales bending by e, commensurate with a unit
    step in a normalized stretch sample (which scales that sample's
    contribution by 2x from its initial value).
    """
    return replace(material, scale_k=float(material.k_bending))


def principal_strain_coords(g, warp_angle: float = 0.0):
    """Dominant principal strain magnitude and its warp-relative angle.

    Returns (s, phi) with s = |eigenvalue of largest magnitude| and phi the
    angle between the corresponding eigenvector and the warp axis, folded
    into [0, pi/2]. The zero tensor maps to (0, 0) by convention.
    """
    g = np.asarray(g, dtype=np.float64)
    coords = _principal_coords_batch(g[None, 0, 0], g[None, 1, 1], g[None, 0, 1],
                                     np.asarray([warp_angle]))
    return float(coords[0][0]), float(coords[1][0])


def _principal_coords_batch(g11, g22, g12, warp_angles):
    """Vectorized (s, phi) plus derivatives w.r.t. (g11, g22, g12).

    Derivatives are zeroed on the measure-zero set where the eigenvectors
    are undefined (isotropic strain); the interpolated energy remains
    continuous there.
    """
    m = 0.5 * (g11 + g22)
    d = 0.5 * (g11 - g22)
    r = np.hypot(d, g12)
    lam_plus = m + r
    lam_minus = m - r
    dom_plus = np.abs(lam_plus) >= np.abs(lam_minus)
    lam_dom = np.where(dom_plus, lam_plus, lam_minus)
    s = np.abs(lam_dom)

    tiny = r < 1e-14
    safe_r = np.where(tiny, 1.0, r)
    sgn_r = np.where(dom_plus, 1.0, -1.0)
    dr = np.stack([0.5 * d / safe_r, -0.5 * d / safe_r, g12 / safe_r], axis=0)
    dr[:, tiny] = 0.0
    dlam = np.stack([np.full_like(m, 0.5), np.full_like(m, 0.5), np.zeros_like(m)], axis=0) \
        + sgn_r[None, :] * dr
    ds = np.sign(lam_dom)[None, :] * dlam

    alpha = 0.5 * np.arctan2(g12, d)
    alpha_dom = alpha + np.where(dom_plus, 0.0, 0.5 * np.pi)
    r2 = np.where(tiny, 1.0, r * r)
    dalpha = np.stack([-g12 / (4.0 * r2), g12 / (4.0 * r2), d / (2.0 * r2)], axis=0)
    dalpha[:, tiny] = 0.0

    psi = np.mod(alpha_dom - warp_angles, np.pi)
    fold = psi > 0.5 * np.pi
    phi = np.where(fold, np.pi - psi, psi)
    dphi = np.where(fold, -1.0, 1.0)[None, :] * dalpha
    phi = np.where(tiny, 0.0, phi)
    dphi[:, tiny] = 0.0
    return s, phi, ds, dphi


@dataclass(frozen=True)
class LameInterp:
    """Bilinear lookup result with everything downstream consumers need:
    values, (s, phi) derivatives, and the 4-node stencil for grid-linearity."""

    lam: np.ndarray
    mu: np.ndarray
    dlam_ds: np.ndarray
    dlam_dphi: np.ndarray
    dmu_ds: np.ndarray
    dmu_dphi: np.ndarray
    node_idx: np.ndarray      # (N, 4) flat indices into the (S, P) grid
    node_w: np.ndarray        # (N, 4) bilinear weights
    dnode_w_ds: np.ndarray    # (N, 4)
    dnode_w_dphi: np.ndarray  # (N, 4)


def lame_interp(material: MaterialParams, s, phi) -> LameInterp:
    """Cellwise interpolation of the stiffness grids at (s, phi).

    Within each lattice cell the weights follow a monotone smoothstep of the
    bilinear parameters; values at nodes and cell midpoints equal the plain
    bilinear ones, while the zero slope at the nodes makes the lookup C1
    across cell boundaries, angle folds, and the constant-extrapolation
    clamp past the last strain level.
    """
    s = np.asarray(s, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    levels = material.strain_levels
    angles = material.angle_levels
    n_p = len(angles)

    i_s = np.clip(np.searchsorted(levels, s, side="right") - 1, 0, len(levels) - 2)
    i_p = np.clip(np.searchsorted(angles, phi, side="right") - 1, 0, n_p - 2)
    s0, s1 = levels[i_s], levels[i_s + 1]
    p0, p1 = angles[i_p], angles[i_p + 1]
    ts_raw = np.clip((s - s0) / (s1 - s0), 0.0, 1.0)
    tp_raw = np.clip((phi - p0) / (p1 - p0), 0.0, 1.0)
    ts = ts_raw * ts_raw * (3.0 - 2.0 * ts_raw)
    tp = tp_raw * tp_raw * (3.0 - 2.0 * tp_raw)
    dts = 6.0 * ts_raw * (1.0 - ts_raw) / (s1 - s0)
    dtp = 6.0 * tp_raw * (1.0 - tp_raw) / (p1 - p0)

    shape = s.shape + (4,)
    w = np.empty(shape)
    rs, rp = 1.0 - ts, 1.0 - tp
    w[..., 0] = rs * rp
    w[..., 1] = rs * tp
    w[..., 2] = ts * rp
    w[..., 3] = ts * tp
    dw_ds = np.empty(shape)
    dw_ds[..., 0] = -rp * dts
    dw_ds[..., 1] = -tp * dts
    dw_ds[..., 2] = rp * dts
    dw_ds[..., 3] = tp * dts
    dw_dphi = np.empty(shape)
    dw_dphi[..., 0] = -rs * dtp
    dw_dphi[..., 1] = rs * dtp
    dw_dphi[..., 2] = -ts * dtp
    dw_dphi[..., 3] = ts * dtp
    node_idx = np.empty(shape, dtype=np.int64)
    base = i_s * n_p + i_p
    node_idx[..., 0] = base
    node_idx[..., 1] = base + 1
    node_idx[..., 2] = base + n_p
    node_idx[..., 3] = base + n_p + 1

    lam_nodes = material.lambda_samples.ravel()[node_idx]
    mu_nodes = material.mu_samples.ravel()[node_idx]
    return LameInterp(
        lam=(w * lam_nodes).sum(axis=-1),
        mu=(w * mu_nodes).sum(axis=-1),
        dlam_ds=(dw_ds * lam_nodes).sum(axis=-1),
        dlam_dphi=(dw_dphi * lam_nodes).sum(axis=-1),
        dmu_ds=(dw_ds * mu_nodes).sum(axis=-1),
        dmu_dphi=(dw_dphi * mu_nodes).sum(axis=-1),
        node_idx=node_idx, node_w=w, dnode_w_ds=dw_ds, dnode_w_dphi=dw_dphi,
    )


@dataclass(frozen=True)
class StiffnessEval:
    """Per-face stiffness values as an explicit linear combination of grid
    samples: lam = sum_n node_w[n] * lambda_samples[node_idx[n]], with the
    full derivative of the effective node weights w.r.t. the strain
    components (g11, g22, g12)."""

    lam: np.ndarray           # (N,)
    mu: np.ndarray            # (N,)
    dlam: np.ndarray          # (3, N)
    dmu: np.ndarray           # (3, N)
    node_idx: np.ndarray      # (N, 8)
    node_w: np.ndarray        # (N, 8)
    dnode_w: np.ndarray       # (3, N, 8)


DOMINANCE_BLEND_BAND = 0.02


def stiffness_eval(material: MaterialParams, g11, g22, g12, warp_angles,
                   blend_band: float = DOMINANCE_BLEND_BAND) -> StiffnessEval:
    """Stiffness lookup that stays continuous across the principal-strain
    dominance switch.

    Away from the tie manifold (|tr G| > blend_band * eigenvalue spread)
    this reproduces the plain dominant-branch lookup exactly; inside the
    band the two branch lookups are blended with a C1 weight so the strain
    energy has no jump when the dominant eigenvalue changes.
    """
    g11 = np.asarray(g11, dtype=np.float64)
    n = len(g11)
    m = 0.5 * (g11 + g22)
    d = 0.5 * (g11 - g22)
    r = np.hypot(d, g12)
    tiny = r < 1e-14
    safe_r = np.where(tiny, 1.0, r)

    dm = np.zeros((3, n))
    dm[0] = 0.5
    dm[1] = 0.5
    dr = np.empty((3, n))
    dr[0] = 0.5 * d / safe_r
    dr[1] = -dr[0]
    dr[2] = g12 / safe_r
    dr[:, tiny] = 0.0

    lam_p = m + r
    lam_m = m - r
    s_p = np.abs(lam_p)
    s_m = np.abs(lam_m)
    ds_p = np.sign(lam_p)[None, :] * (dm + dr)
    ds_m = np.sign(lam_m)[None, :] * (dm - dr)

    alpha = 0.5 * np.arctan2(g12, d)
    r2 = np.where(tiny, 1.0, r * r)
    dalpha = np.empty((3, n))
    dalpha[0] = -g12 / (4.0 * r2)
    dalpha[1] = -dalpha[0]
    dalpha[2] = d / (2.0 * r2)
    dalpha[:, tiny] = 0.0

    def folded(angle):
        psi = np.mod(angle - warp_angles, np.pi)
        flip = psi > 0.5 * np.pi
        phi = np.where(flip, np.pi - psi, psi)
        dphi = np.where(flip, -1.0, 1.0)[None, :] * dalpha
        phi = np.where(tiny, 0.0, phi)
        dphi[:, tiny] = 0.0
        return phi, dphi

    phi_p, dphi_p = folded(alpha)
    phi_m, dphi_m = folded(alpha + 0.5 * np.pi)

    # C1 dominance blend: w = 1 keeps the + branch, w = 0 the - branch.
    u = np.clip(m / (blend_band * safe_r), -1.0, 1.0)
    u = np.where(tiny, np.where(m >= 0, 1.0, -1.0), u)
    w = 0.5 * (1.0 + 0.5 * u * (3.0 - u * u))
    inner = (np.abs(u) < 1.0) & ~tiny
    dudg = (dm * r - m[None, :] * dr) / (blend_band * r2)
    dw = np.where(inner[None, :], 0.25 * (3.0 - 3.0 * u * u) * dudg, 0.0)

    both = lame_interp(material, np.concatenate([s_p, s_m]),
                       np.concatenate([phi_p, phi_m]))
    ipw, imw = both.node_w[:n], both.node_w[n:]
    ip_ds, im_ds = both.dnode_w_ds[:n], both.dnode_w_ds[n:]
    ip_dp, im_dp = both.dnode_w_dphi[:n], both.dnode_w_dphi[n:]
    dwp = ip_ds[None] * ds_p[:, :, None] + ip_dp[None] * dphi_p[:, :, None]
    dwm = im_ds[None] * ds_m[:, :, None] + im_dp[None] * dphi_m[:, :, None]

    node_idx = np.concatenate([both.node_idx[:n], both.node_idx[n:]], axis=-1)
    node_w = np.concatenate([w[:, None] * ipw, (1.0 - w)[:, None] * imw], axis=-1)
    dnode_w = np.concatenate([dw[:, :, None] * ipw[None] + w[None, :, None] * dwp,
                              -dw[:, :, None] * imw[None]
                              + (1.0 - w)[None, :, None] * dwm], axis=-1)

    lam_nodes = material.lambda_samples.ravel()[node_idx]
    mu_nodes = material.mu_samples.ravel()[node_idx]
    return StiffnessEval(
        lam=(node_w * lam_nodes).sum(axis=-1),
        mu=(node_w * mu_nodes).sum(axis=-1),
        dlam=(dnode_w * lam_nodes[None]).sum(axis=-1),
        dmu=(dnode_w * mu_nodes[None]).sum(axis=-1),
        node_idx=node_idx, node_w=node_w, dnode_w=dnode_w,
    )


def lame_lookup(material: MaterialParams, g, warp_angle: float = 0.0):
    """(lambda, mu) at the principal-strain coordinates of a strain tensor."""
    g = np.asarray(g, dtype=np.float64)
    ev = stiffness_eval(material, g[None, 0, 0], g[None, 1, 1], g[None, 0, 1],
                        np.asarray([warp_angle]))
    return float(ev.lam[0]), float(ev.mu[0])


# ---------------------------------------------------------------------------
# File format

_REQUIRED_FIELDS = ("grid_strain_levels", "grid_angle_levels_deg", "lambda_samples",
                    "mu_samples", "k_bending", "density", "thickness", "scale_k")


def load_material(path) -> MaterialParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    missing = [f for f in _REQUIRED_FIELDS if f not in doc]
    if missing:
        raise MaterialError(f"material file missing field(s): {', '.join(missing)}")
    unknown = [k for k in doc if k not in _REQUIRED_FIELDS and k != "name"]
    if unknown:
        raise MaterialError(f"material file has unknown field(s): {', '.join(unknown)}")
    return MaterialParams(
        strain_levels=np.asarray(doc["grid_strain_levels"], dtype=np.float64),
        angle_levels=np.deg2rad(np.asarray(doc["grid_angle_levels_deg"], dtype=np.float64)),
        lambda_samples=np.asarray(doc["lambda_samples"], dtype=np.float64),
        mu_samples=np.asarray(doc["mu_samples"], dtype=np.float64),
        k_bending=float(doc["k_bending"]),
        density=float(doc["density"]),
        thickness=float(doc["thickness"]),
        scale_k=float(doc["scale_k"]),
    )


def save_material(path, material: MaterialParams, name: str | None = None) -> None:
    doc = {
        "grid_strain_levels": [float(x) for x in material.strain_levels],
        "grid_angle_levels_deg": [float(x) for x in np.rad2deg(material.angle_levels)],
        "lambda_samples": [[float(x) for x in row] for row in material.lambda_samples],
        "mu_samples": [[float(x) for x in row] for row in material.mu_samples],
        "k_bending": float(material.k_bending),
        "density": float(material.density),
        "thickness": float(material.thickness),
        "scale_k": float(material.scale_k),
    }
    if name is not None:
        doc["name"] = name
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def make_material(base_lambda, base_mu, k_bending, density=0.15, thickness=4.7e-4,
                  strain_levels=DEFAULT_STRAIN_LEVELS, angle_levels_deg=DEFAULT_ANGLE_LEVELS_DEG,
                  anisotropy=0.25, hardening=0.6) -> MaterialParams:
    """Synthetic preset: stiffness grows with strain level and varies with
    the warp angle. Magnitudes are plausible, not measured data."""
    s = np.asarray(strain_levels, dtype=np.float64)
    a = np.deg2rad(np.asarray(angle_levels_deg, dtype=np.float64))
    s_fac = 1.0 + hardening * (s / max(s[-1], 1e-12))[:, None]
    a_fac = 1.0 + anisotropy * np.cos(2.0 * a)[None, :]
    return MaterialParams(
        strain_levels=s, angle_levels=a,
        lambda_samples=base_lambda * s_fac * a_fac,
        mu_samples=base_mu * s_fac * (2.0 - a_fac * 0.5),
        k_bending=float(k_bending), density=float(density), thickness=float(thickness),
        scale_k=float(k_bending),
    )


PRESETS = {
    "light_knit": dict(base_lambda=900.0, base_mu=380.0, k_bending=2e-5,
                       density=0.06, thickness=2.5e-3),
    "denim_like": dict(base_lambda=5000.0, base_mu=2100.0, k_bending=8e-4,
                       density=0.35, thickness=2.8e-3),
    "stiff_woven": dict(base_lambda=4800.0, base_mu=2000.0, k_bending=4e-4,
                        density=0.12, thickness=2.0e-3),
}


def preset(name: str) -> MaterialParams:
    if name not in PRESETS:
        raise MaterialError(f"unknown preset '{name}'; available: {sorted(PRESETS)}")
    return make_material(**PRESETS[name])
