"""Pose-conditioned garment deformation: free-variable and windowed-regressor
models, the quasi-static solver, combined physics+3D training with the 1:4
schedule, and inter-garment collision fine-tuning."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .energy import SimContext, check_finite, total_physics
from .metrics import chamfer_with_grad
from .mesh import TriMesh
from .skinning import Pose, SkinnedBody, blend_maps, skinning_transforms
from .spatial import nearest_neighbors, vertex_normals


class TrainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Deformation models


def encode_window(poses, n_joints: int) -> np.ndarray:
    """Pose-window features: flattened per-joint rotation matrices, root
    translation excluded."""
    feats = []
    for pose in poses:
        if pose.n_joints != n_joints:
            raise TrainError(f"pose has {pose.n_joints} joints, expected {n_joints}")
        feats.append(Rotation.from_rotvec(pose.rotvecs).as_matrix().ravel())
    return np.concatenate(feats)


class FreeVariable:
    """Independent trainable displacement field per registered pose."""

    variant = "free"

    def __init__(self, n_vertices: int, n_joints: int = 0, window: int = 1):
        self.n_vertices = n_vertices
        self.n_joints = n_joints
        self.window = window
        self.slots: dict = {}

    def dv(self, key) -> np.ndarray:
        if key not in self.slots:
            self.slots[key] = np.zeros((self.n_vertices, 3))
        return self.slots[key]

    def set_dv(self, key, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (self.n_vertices, 3):
            raise TrainError(f"dV shape {value.shape}, expected {(self.n_vertices, 3)}")
        if not np.isfinite(value).all():
            raise TrainError("non-finite dV update")
        self.slots[key] = value

    def parameter_vector(self) -> np.ndarray:
        keys = sorted(self.slots)
        if not keys:
            return np.zeros(0)
        return np.concatenate([self.slots[k].ravel() for k in keys])


class WindowRegressor:
    """Feedforward map from a window of poses to per-vertex displacements.

    Hidden layers use tanh; the output layer starts at zero so the untrained
    model reproduces the template.
    """

    variant = "window"

    def __init__(self, n_joints: int, n_vertices: int, window: int = 1,
                 hidden=(256, 256), seed: int = 0):
        self.n_joints = n_joints
        self.n_vertices = n_vertices
        self.window = window
        self.hidden = tuple(hidden)
        dims = [9 * n_joints * window, *self.hidden, 3 * n_vertices]
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            if i == len(dims) - 2:
                w = np.zeros((d_in, d_out))
            else:
                w = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / (d_in + d_out))
            self.weights.append(w)
            self.biases.append(np.zeros(d_out))

    def dv(self, window_poses) -> np.ndarray:
        return self.forward(encode_window(window_poses[-self.window:], self.n_joints))[0]

    def forward(self, features):
        acts = [features]
        h = features
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == len(self.weights) - 1 else np.tanh(z)
            acts.append(h)
        return h.reshape(self.n_vertices, 3), acts

    def backward(self, acts, d_dv):
        """Parameter gradients for a single sample; d_dv is (V, 3)."""
        delta = d_dv.ravel()
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = np.outer(acts[i], delta)
            grads_b[i] = delta
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grads_w, grads_b

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights]
                              + [b.ravel() for b in self.biases])

    def check_finite(self) -> None:
        for arr in (*self.weights, *self.biases):
            if not np.isfinite(arr).all():
                raise TrainError("non-finite model parameters after update")


class Adam:
    """Adam with cosine step decay; fully deterministic given the call order."""

    def __init__(self, arrays, step_size: float, total_steps: int | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.total_steps = total_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads) -> None:
        self.t += 1
        lr = self.step_size
        if self.total_steps:
            frac = min(self.t / self.total_steps, 1.0)
            lr = self.step_size * 0.5 * (1.0 + np.cos(np.pi * frac))
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# Posing setups


@dataclass
class PoseItem:
    """One training item: a pose window plus cached posing data.

    ``poses`` holds window frames (plus two leading history frames in
    dynamic mode); ``maps`` are the per-frame LBS blend maps; ``ctx`` has
    the body posed at the final frame. ``points`` is the scan cloud for
    supervised items.
    """

    poses: list
    maps: list
    ctx: SimContext
    points: np.ndarray | None = None
    key: tuple = ()


def make_pose_item(poses, base_ctx: SimContext, body: SkinnedBody, garment_weights,
                   points=None, key=()) -> PoseItem:
    poses = list(poses)
    maps = []
    for pose in poses:
        transforms = skinning_transforms(body.skeleton, pose)
        maps.append(blend_maps(garment_weights, transforms))
    posed_body = body.posed_vertices(poses[-1])
    normals = vertex_normals(posed_body, body.mesh.faces)
    ctx = base_ctx.with_body(posed_body, normals)
    return PoseItem(poses=poses, maps=maps, ctx=ctx, points=points, key=tuple(key))


def apply_maps(maps, template_vertices, dv):
    m, c = maps
    return np.einsum("vab,vb->va", m, template_vertices + dv) + c


def model_dv(model, item: "PoseItem"):
    """Displacement a model predicts for a pose item, whichever variant."""
    if model.variant == "window":
        return model.dv(item.poses)
    return model.dv(item.key)


def pullback(maps, grad_x):
    m, _ = maps
    return np.einsum("vab,va->vb", m, grad_x)


# ---------------------------------------------------------------------------
# Quasi-static solver


@dataclass
class SolveResult:
    dv: np.ndarray
    energy: float
    grad_inf: float
    converged: bool
    n_iter: int
    warning: str | None = None
    history: list = field(default_factory=list)


def quasi_static_solve(maps, ctx: SimContext, init_dv=None, tol: float = 1e-6,
                       maxiter: int = 3000, record_history: bool = False) -> SolveResult:
    """Minimize the physics energy over canonical displacements.

    Gradient-based descent with line search (L-BFGS); success means the
    max-norm of the pulled-back gradient fell below ``tol`` (newtons).
    """
    template = ctx.rest.mesh.vertices
    if init_dv is None:
        init_dv = np.zeros_like(template)
    history: list = []

    def objective(flat):
        dv = flat.reshape(-1, 3)
        x = apply_maps(maps, template, dv)
        breakdown, grad_x, _ = total_physics(x, ctx)
        check_finite(breakdown)
        if record_history:
            history.append(breakdown.total)
        return breakdown.total, pullback(maps, grad_x).ravel()

    flat = np.asarray(init_dv, dtype=np.float64).ravel().copy()
    total_iter = 0
    # A couple of fresh-memory restarts help L-BFGS across the piecewise
    # boundaries of the collision term.
    for attempt in range(3):
        remaining = maxiter - total_iter
        if remaining <= 0:
            break
        res = minimize(objective, flat, jac=True, method="L-BFGS-B",
                       options=dict(maxiter=remaining, maxfun=4 * remaining,
                                    maxcor=30, ftol=1e-18, gtol=tol))
        flat = res.x
        total_iter += res.nit
        grad_inf = float(np.abs(res.jac).max())
        if grad_inf < tol:
            break
        if res.nit == 0 and attempt > 0:
            break
    energy, grad = objective(flat)
    grad_inf = float(np.abs(grad).max())
    converged = grad_inf < tol
    warning = None if converged else f"gradient max-norm {grad_inf:.3e} above tol {tol:.1e} " \
                                     f"after {total_iter} iterations"
    return SolveResult(dv=flat.reshape(-1, 3), energy=energy, grad_inf=grad_inf,
                       converged=converged, n_iter=total_iter, warning=warning,
                       history=history)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    lambda_3d: float = 1e3
    schedule: tuple = (1, 4)        # random : scan epochs, repeated
    epochs: int = 40
    step_size: float = 2e-3
    grad_tol: float = 1e-6
    seed: int = 0
    mode: str = "static"            # "static" or "dynamic"
    batch_size: int = 8
    inner_iters: int = 150          # free-variable refinement per pose per epoch
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.lambda_3d < 0:
            raise TrainError("lambda_3d must be non-negative")
        if self.mode not in ("static", "dynamic"):
            raise TrainError(f"unknown mode '{self.mode}'")
        r, s = self.schedule
        if r < 0 or s < 0 or r + s == 0:
            raise TrainError(f"invalid schedule {self.schedule}")


HISTORY_COLUMNS = ("epoch", "phase", "E_strain", "E_bend", "E_gravity",
                   "E_collision", "E_dyn", "E_3d", "total")


def _phase_sequence(cfg: TrainConfig, have_random: bool, have_scan: bool):
    r, s = cfg.schedule
    pattern = ["random"] * (r if have_random else 0) + ["scan"] * (s if have_scan else 0)
    if not pattern:
        return []
    return [pattern[i % len(pattern)] for i in range(cfg.epochs)]


def _item_loss(model, item: PoseItem, template, cfg: TrainConfig, lambda_3d: float,
               want_model_grad: bool):
    """Energy terms and (optionally) model-parameter gradients for one item.

    In dynamic mode the two leading frames supply the inertial history; the
    gradient flows only through the final frame's displacement.
    """
    k = model.window
    dynamic = cfg.mode == "dynamic" and len(item.poses) >= k + 2
    ctx = item.ctx

    if model.variant == "window":
        hist = None
        if dynamic:
            prevs = []
            for off in (0, 1):
                dv_h = model.dv(item.poses[off:off + k])
                prevs.append(apply_maps(item.maps[off + k - 1], template, dv_h))
            ctx = ctx.with_history(prevs[1], prevs[0])
        feats = encode_window(item.poses[-k:], model.n_joints)
        dv, cache = model.forward(feats)
    else:
        dv = model.dv(item.key)
        cache = None

    maps = item.maps[-1]
    x = apply_maps(maps, template, dv)
    breakdown, grad_x, _ = total_physics(x, ctx)
    check_finite(breakdown)
    e3d = 0.0
    if item.points is not None and lambda_3d > 0:
        e3d, g3d = chamfer_with_grad(x, item.points)
        grad_x = grad_x + lambda_3d * g3d
    total = breakdown.total + lambda_3d * e3d
    grad_dv = pullback(maps, grad_x)
    param_grads = None
    if want_model_grad and model.variant == "window":
        param_grads = model.backward(cache, grad_dv)
    return breakdown, e3d, total, grad_dv, param_grads


def _refine_free_slot(model: FreeVariable, item: PoseItem, template, cfg: TrainConfig,
                      lambda_3d: float):
    """Line-search descent on one free-variable slot (shares the solver
    contract with quasi_static_solve)."""
    ctx = item.ctx
    maps = item.maps[-1]

    def objective(flat):
        dv = flat.reshape(-1, 3)
        x = apply_maps(maps, template, dv)
        breakdown, grad_x, _ = total_physics(x, ctx)
        check_finite(breakdown)
        total = breakdown.total
        if item.points is not None and lambda_3d > 0:
            e3d, g3d = chamfer_with_grad(x, item.points)
            total += lambda_3d * e3d
            grad_x = grad_x + lambda_3d * g3d
        return total, pullback(maps, grad_x).ravel()

    res = minimize(objective, model.dv(item.key).ravel(), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=cfg.inner_iters, maxfun=4 * cfg.inner_iters,
                                maxcor=30, ftol=1e-18, gtol=cfg.grad_tol))
    model.set_dv(item.key, res.x.reshape(-1, 3))


@dataclass
class TrainResult:
    model: object
    history: list       # rows matching HISTORY_COLUMNS


def train(model, scan_items, random_items, cfg: TrainConfig, template: TriMesh) -> TrainResult:
    """Alternate unsupervised physics epochs on random poses with combined
    physics + Chamfer epochs on scan poses (default 1 : 4).

    Deterministic under a fixed seed; raises on divergence or non-finite
    parameters.
    """
    phases = _phase_sequence(cfg, have_random=len(random_items) > 0,
                             have_scan=len(scan_items) > 0)
    if not phases:
        return TrainResult(model=model, history=[])
    rng = np.random.default_rng(cfg.seed)
    tmpl = template.vertices

    optimizer = None
    if model.variant == "window":
        arrays = model.weights + model.biases
        n_scan_batches = max(1, -(-len(scan_items) // cfg.batch_size))
        n_rand_batches = max(1, -(-len(random_items) // cfg.batch_size)) if random_items else 0
        per_epoch = max(n_scan_batches, n_rand_batches)
        optimizer = Adam(arrays, cfg.step_size, total_steps=cfg.epochs * per_epoch)

    history = []
    initial_total = None
    for epoch, phase in enumerate(phases):
        items = scan_items if phase == "scan" else random_items
        lambda_3d = cfg.lambda_3d if phase == "scan" else 0.0
        sums = np.zeros(6)  # strain, bend, gravity, collision, dyn, e3d
        total_sum = 0.0

        if model.variant == "window":
            order = rng.permutation(len(items))
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                acc_w = [np.zeros_like(w) for w in model.weights]
                acc_b = [np.zeros_like(b) for b in model.biases]
                for i in batch:
                    breakdown, e3d, total, _, (gw, gb) = _item_loss(
                        model, items[i], tmpl, cfg, lambda_3d, want_model_grad=True)
                    for a, g in zip(acc_w, gw):
                        a += g
                    for a, g in zip(acc_b, gb):
                        a += g
                    sums += (breakdown.strain, breakdown.bend, breakdown.gravity,
                             breakdown.collision, breakdown.dynamic, e3d)
                    total_sum += total
                inv = 1.0 / len(batch)
                optimizer.step(model.weights + model.biases,
                               [g * inv for g in acc_w] + [g * inv for g in acc_b])
                model.check_finite()
        else:
            for item in items:
                _refine_free_slot(model, item, tmpl, cfg, lambda_3d)
                breakdown, e3d, total, _, _ = _item_loss(
                    model, item, tmpl, cfg, lambda_3d, want_model_grad=False)
                sums += (breakdown.strain, breakdown.bend, breakdown.gravity,
                         breakdown.collision, breakdown.dynamic, e3d)
                total_sum += total

        n = max(len(items), 1)
        mean_total = total_sum / n
        history.append({"epoch": epoch, "phase": phase,
                        "E_strain": sums[0] / n, "E_bend": sums[1] / n,
                        "E_gravity": sums[2] / n, "E_collision": sums[3] / n,
                        "E_dyn": sums[4] / n, "E_3d": sums[5] / n, "total": mean_total})
        if initial_total is None:
            initial_total = abs(mean_total) + 1e-12
        elif abs(mean_total) > cfg.divergence_factor * initial_total:
            raise TrainError(f"training diverged at epoch {epoch}: mean loss {mean_total:.3e} "
                             f"vs initial {initial_total:.3e}")
    return TrainResult(model=model, history=history)


# ---------------------------------------------------------------------------
# Inter-garment collision fine-tuning


def proximity_mask(upper_template: TriMesh, lower_template: TriMesh,
                   threshold: float = 0.10) -> np.ndarray:
    """Upper-garment vertices within ``threshold`` of the lower garment in
    the rest pose; only these ever contribute collision energy."""
    _, d2 = nearest_neighbors(upper_template.vertices, lower_template.vertices)
    return d2 < threshold * threshold


def garment_collision_energy(x_upper, x_lower, lower_faces, mask, delta: float):
    """Cubic penalty keeping masked upper vertices outside the lower
    garment's offset surface along the lower vertex normals."""
    grad_u = np.zeros_like(x_upper)
    grad_l = np.zeros_like(x_lower)
    pts = x_upper[mask]
    if len(pts) == 0:
        return 0.0, grad_u, grad_l
    normals = vertex_normals(x_lower, lower_faces)
    idx, _ = nearest_neighbors(pts, x_lower)
    n = normals[idx]
    depth = delta - np.einsum("vi,vi->v", n, pts - x_lower[idx])
    act = depth > 0
    energy = float(np.sum(depth[act] ** 3))
    g = 3.0 * (depth[act] ** 2)[:, None] * n[act]
    gm = np.zeros_like(pts)
    gm[act] = -g
    grad_u[mask] = gm
    np.add.at(grad_l, idx[act], g)
    return energy, grad_u, grad_l


@dataclass
class GarmentSide:
    """One garment's model and posing assets inside the fine-tuning loop."""

    model: object
    template: TriMesh
    scan_items: list
    random_items: list


def finetune_collision(upper: GarmentSide, lower: GarmentSide, cfg: TrainConfig,
                       lambda_colli: float = 25.0, delta_garment: float = 2e-3,
                       mask_threshold: float = 0.10, epochs: int = 10) -> list:
    """Joint fine-tune of both garments with the inter-garment penalty.

    Alternates random-pose and scan-pose epochs (wrapping the requested
    count, default 10). Scan epochs add the Chamfer terms of both garments.
    Returns the loss history; models are updated in place.
    """
    mask = proximity_mask(upper.template, lower.template, mask_threshold)
    rng = np.random.default_rng(cfg.seed)
    history = []

    models = (upper.model, lower.model)
    if all(m.variant == "window" for m in models):
        arrays = []
        for m in models:
            arrays += m.weights + m.biases
        n_items = max(len(upper.scan_items), len(upper.random_items), 1)
        optimizer = Adam(arrays, cfg.step_size,
                         total_steps=epochs * max(1, -(-n_items // cfg.batch_size)))
    else:
        optimizer = None

    for epoch in range(epochs):
        phase = "random" if (epoch % 2 == 0 and upper.random_items) else "scan"
        items_u = upper.random_items if phase == "random" else upper.scan_items
        items_l = lower.random_items if phase == "random" else lower.scan_items
        lambda_3d = cfg.lambda_3d if phase == "scan" else 0.0
        n = min(len(items_u), len(items_l))
        sums = {"E_phys_upper": 0.0, "E_phys_lower": 0.0, "E_colli": 0.0, "E_3d": 0.0}

        if optimizer is not None:
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                acc = [np.zeros_like(a) for a in arrays]
                for i in batch:
                    vals, grads = _pair_loss(upper, lower, items_u[i], items_l[i], mask,
                                             lambda_colli, delta_garment, lambda_3d, cfg)
                    for a, g in zip(acc, grads):
                        a += g
                    for key in sums:
                        sums[key] += vals[key]
                inv = 1.0 / len(batch)
                optimizer.step(arrays, [g * inv for g in acc])
                for m in models:
                    m.check_finite()
        else:
            for i in range(n):
                _pair_solve_free(upper, lower, items_u[i], items_l[i], mask,
                                 lambda_colli, delta_garment, lambda_3d, cfg, sums)

        row = {"epoch": epoch, "phase": phase}
        row.update({k: v / max(n, 1) for k, v in sums.items()})
        history.append(row)
    return history


def _pair_loss(upper, lower, item_u, item_l, mask, lambda_colli, delta, lambda_3d, cfg):
    dv_u, cache_u = upper.model.forward(
        encode_window(item_u.poses[-upper.model.window:], upper.model.n_joints))
    dv_l, cache_l = lower.model.forward(
        encode_window(item_l.poses[-lower.model.window:], lower.model.n_joints))
    x_u = apply_maps(item_u.maps[-1], upper.template.vertices, dv_u)
    x_l = apply_maps(item_l.maps[-1], lower.template.vertices, dv_l)
    bd_u, gx_u, _ = total_physics(x_u, item_u.ctx)
    bd_l, gx_l, _ = total_physics(x_l, item_l.ctx)
    check_finite(bd_u)
    check_finite(bd_l)
    e_c, gc_u, gc_l = garment_collision_energy(x_u, x_l, lower.template.faces, mask, delta)
    gx_u = gx_u + lambda_colli * gc_u
    gx_l = gx_l + lambda_colli * gc_l
    e3d = 0.0
    if lambda_3d > 0 and item_u.points is not None:
        e_u, g_u = chamfer_with_grad(x_u, item_u.points)
        e_l, g_l = chamfer_with_grad(x_l, item_l.points)
        e3d = e_u + e_l
        gx_u = gx_u + lambda_3d * g_u
        gx_l = gx_l + lambda_3d * g_l
    gw_u, gb_u = upper.model.backward(cache_u, pullback(item_u.maps[-1], gx_u))
    gw_l, gb_l = lower.model.backward(cache_l, pullback(item_l.maps[-1], gx_l))
    vals = {"E_phys_upper": bd_u.total, "E_phys_lower": bd_l.total,
            "E_colli": e_c, "E_3d": e3d}
    return vals, gw_u + gb_u + gw_l + gb_l


def _pair_solve_free(upper, lower, item_u, item_l, mask, lambda_colli, delta,
                     lambda_3d, cfg, sums):
    n_u = upper.template.n_vertices

    def objective(flat):
        dv_u = flat[:3 * n_u].reshape(-1, 3)
        dv_l = flat[3 * n_u:].reshape(-1, 3)
        x_u = apply_maps(item_u.maps[-1], upper.template.vertices, dv_u)
        x_l = apply_maps(item_l.maps[-1], lower.template.vertices, dv_l)
        bd_u, gx_u, _ = total_physics(x_u, item_u.ctx)
        bd_l, gx_l, _ = total_physics(x_l, item_l.ctx)
        e_c, gc_u, gc_l = garment_collision_energy(x_u, x_l, lower.template.faces, mask, delta)
        total = bd_u.total + bd_l.total + lambda_colli * e_c
        gx_u = gx_u + lambda_colli * gc_u
        gx_l = gx_l + lambda_colli * gc_l
        if lambda_3d > 0 and item_u.points is not None:
            e_u, g_u = chamfer_with_grad(x_u, item_u.points)
            e_l, g_l = chamfer_with_grad(x_l, item_l.points)
            total += lambda_3d * (e_u + e_l)
            gx_u = gx_u + lambda_3d * g_u
            gx_l = gx_l + lambda_3d * g_l
        return total, np.concatenate([pullback(item_u.maps[-1], gx_u).ravel(),
                                      pullback(item_l.maps[-1], gx_l).ravel()])

    init = np.concatenate([upper.model.dv(item_u.key).ravel(),
                           lower.model.dv(item_l.key).ravel()])
    res = minimize(objective, init, jac=True, method="L-BFGS-B",
                   options=dict(maxiter=cfg.inner_iters, maxfun=4 * cfg.inner_iters,
                                maxcor=30, ftol=1e-18, gtol=cfg.grad_tol))
    upper.model.set_dv(item_u.key, res.x[:3 * n_u].reshape(-1, 3))
    lower.model.set_dv(item_l.key, res.x[3 * n_u:].reshape(-1, 3))
    x_u = apply_maps(item_u.maps[-1], upper.template.vertices, upper.model.dv(item_u.key))
    x_l = apply_maps(item_l.maps[-1], lower.template.vertices, lower.model.dv(item_l.key))
    bd_u, _, _ = total_physics(x_u, item_u.ctx)
    bd_l, _, _ = total_physics(x_l, item_l.ctx)
    e_c, _, _ = garment_collision_energy(x_u, x_l, lower.template.faces, mask, delta)
    sums["E_phys_upper"] += bd_u.total
    sums["E_phys_lower"] += bd_l.total
    sums["E_colli"] += e_c
    if lambda_3d > 0 and item_u.points is not None:
        sums["E_3d"] += chamfer_with_grad(x_u, item_u.points)[0] \
            + chamfer_with_grad(x_l, item_l.points)[0]


# ---------------------------------------------------------------------------
# Checkpoints (deterministic bytes: fixed zip timestamps, stored entries)

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0))
    return buf.getvalue()


def save_checkpoint(path, model, seed: int = 0, epoch: int = 0) -> None:
    meta = {"variant": model.variant, "n_vertices": model.n_vertices,
            "n_joints": model.n_joints, "window": model.window,
            "seed": seed, "epoch": epoch}
    arrays = {}
    if model.variant == "window":
        meta["hidden"] = list(model.hidden)
        for i, w in enumerate(model.weights):
            arrays[f"w{i}"] = w
        for i, b in enumerate(model.biases):
            arrays[f"b{i}"] = b
    else:
        meta["keys"] = [list(k) for k in sorted(model.slots)]
        for i, k in enumerate(sorted(model.slots)):
            arrays[f"slot{i}"] = model.slots[k]
    with zipfile.ZipFile(path, "w") as zf:
        _write_zip_entry(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name in sorted(arrays):
            _write_zip_entry(zf, name + ".npy", _npy_bytes(arrays[name]))


def load_checkpoint(path):
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))

        def arr(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name + ".npy")))

        if meta["variant"] == "window":
            model = WindowRegressor(meta["n_joints"], meta["n_vertices"],
                                    window=meta["window"], hidden=tuple(meta["hidden"]))
            model.weights = [arr(f"w{i}") for i in range(len(model.weights))]
            model.biases = [arr(f"b{i}") for i in range(len(model.biases))]
        else:
            model = FreeVariable(meta["n_vertices"], meta["n_joints"], meta["window"])
            for i, key in enumerate(meta["keys"]):
                model.slots[tuple(key)] = arr(f"slot{i}")
    return model, meta
