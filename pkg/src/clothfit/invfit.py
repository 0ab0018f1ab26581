"""Fabric parameter estimation from observed garment configurations.

The physics-energy gradient at the observed configurations is affine in the
raw parameters, so its squared norm is an exact quadratic in the normalized
parameter vector; the fit step is a damped linear least-squares solve with a
non-negativity projection, and degeneracies show up as rank deficiency
instead of spurious fits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .deform import PoseItem, TrainConfig, apply_maps, model_dv, train
from .energy import gradient_theta_decomposition, material_from_theta, theta_vector
from .materials import MaterialParams
from .metrics import chamfer

GRAVITY_REFERENCE = 9.81


@dataclass
class FitConfig:
    reg_stretch: float = 1e-3       # per-group step regularizer, normalized coords
    reg_bending: float = 1e-2
    include_collision: bool = True
    include_dynamics: bool = True
    rank_rcond: float = 1e-6
    observe_rel_tol: float = 1e-4   # column norm below this fraction of max = unobserved
    n_outer: int = 3
    min_scale_floor: float = 1e-12


@dataclass
class FitState:
    """One material-fit problem: frozen garment configurations per scan pose
    plus the current parameters and the fit trail."""

    material: MaterialParams
    frozen: list                    # posed garment positions per scan pose
    contexts: list                  # matching SimContext per pose
    iteration: int = 0
    history: list = field(default_factory=list)


@dataclass
class FitSystem:
    """Stacked affine model of the position gradient, in normalized
    parameter coordinates: residual rows = (b + A theta_hat) / sqrt(rows)."""

    a: np.ndarray               # (rows, n_params) normalized columns
    b: np.ndarray               # (rows,)
    scales: np.ndarray          # raw = scales * theta_hat
    norm: float                 # force-scale normalization of the residual
    n_poses: int
    n_grid: int


def _char_force(material: MaterialParams, rest) -> float:
    """Characteristic per-vertex force used to normalize the gradient term;
    taken from the mass scale so it stays positive when gravity is off."""
    return float(rest.masses.mean() * GRAVITY_REFERENCE)


def build_fit_system(material: MaterialParams, frozen, contexts,
                     cfg: FitConfig) -> FitSystem:
    """Assemble the affine gradient model over all frozen configurations."""
    if len(frozen) != len(contexts) or not frozen:
        raise ValueError("frozen configurations and contexts must match and be non-empty")
    theta_raw = theta_vector(material)
    floor = max(float(theta_raw.max()) * 1e-8, cfg.min_scale_floor)
    scales = np.maximum(theta_raw, floor)

    rows_a, rows_b = [], []
    for x, ctx in zip(frozen, contexts):
        g0, jac = gradient_theta_decomposition(
            x, ctx.with_material(material),
            include_collision=cfg.include_collision,
            include_dynamics=cfg.include_dynamics)
        rows_a.append(jac.reshape(len(jac), -1).T * scales[None, :])
        rows_b.append(g0.ravel())
    a = np.concatenate(rows_a, axis=0)
    b = np.concatenate(rows_b)
    rest = contexts[0].rest
    f_c = _char_force(material, rest)
    norm = len(frozen) * 3.0 * rest.n_vertices * f_c * f_c
    return FitSystem(a=a, b=b, scales=scales, norm=norm,
                     n_poses=len(frozen), n_grid=material.n_grid)


def _reg_weights(system: FitSystem, cfg: FitConfig) -> np.ndarray:
    w = np.full(len(system.scales), cfg.reg_stretch)
    w[-1] = cfg.reg_bending
    return w


def param_loss(system: FitSystem, theta_hat, theta_prev_hat, cfg: FitConfig):
    """Mean squared gradient norm (normalized) plus the step regularizer,
    with its analytic gradient in normalized coordinates."""
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    r = system.b + system.a @ theta_hat
    grad_term = float(r @ r) / system.norm
    delta = theta_hat - theta_prev_hat
    w = _reg_weights(system, cfg)
    value = grad_term + float(w @ (delta * delta))
    grad = 2.0 * (system.a.T @ r) / system.norm + 2.0 * w * delta
    return value, grad


def param_loss_for_material(material_eval: MaterialParams, system: FitSystem,
                            material_prev: MaterialParams, cfg: FitConfig):
    """param_loss evaluated at an arbitrary material (raw values converted
    into the system's normalized coordinates)."""
    th = theta_vector(material_eval) / system.scales
    th_prev = theta_vector(material_prev) / system.scales
    return param_loss(system, th, th_prev, cfg)


@dataclass
class FitReport:
    e_param_before: float
    e_param_after: float
    grad_term_before: float
    grad_term_after: float
    singular_values: list
    rank: int
    n_params: int
    degenerate: bool
    unobserved: list            # [(kind, strain_index, angle_index), ...]
    theta_before: list
    theta_after: list
    delta_norm: float
    anchor_ratio: float         # |constant part| relative to |A @ 1|; ~0 = scale-free

    def as_dict(self) -> dict:
        return {
            "e_param_before": self.e_param_before,
            "e_param_after": self.e_param_after,
            "grad_term_before": self.grad_term_before,
            "grad_term_after": self.grad_term_after,
            "singular_values": self.singular_values,
            "rank": self.rank,
            "n_params": self.n_params,
            "degenerate": self.degenerate,
            "unobserved": self.unobserved,
            "theta_before": self.theta_before,
            "theta_after": self.theta_after,
            "delta_norm": self.delta_norm,
            "anchor_ratio": self.anchor_ratio,
        }


def _grid_coords(flat_index: int, material: MaterialParams):
    n_p = len(material.angle_levels)
    n = material.n_grid
    if flat_index < n:
        kind, idx = "lambda", flat_index
    elif flat_index < 2 * n:
        kind, idx = "mu", flat_index - n
    else:
        return ("k_bending", -1, -1)
    return (kind, idx // n_p, idx % n_p)


def fit_materials(state: FitState, cfg: FitConfig):
    """One damped least-squares parameter update.

    Minimizes the normalized quadratic plus the per-group step regularizer
    over non-negative normalized parameters; reports rank diagnostics and
    the unobserved grid nodes that only the regularizer constrains.
    """
    material = state.material
    system = build_fit_system(material, state.frozen, state.contexts, cfg)
    n_params = len(system.scales)
    theta_prev = np.ones(n_params)

    col_norms = np.linalg.norm(system.a, axis=0)
    max_col = col_norms.max()
    observed = col_norms > cfg.observe_rel_tol * max_col if max_col > 0 \
        else np.zeros(n_params, dtype=bool)
    unobserved = [_grid_coords(i, material) for i in np.flatnonzero(~observed)]

    if max_col > 0:
        sv = np.linalg.svd(system.a[:, observed], compute_uv=False) if observed.any() \
            else np.zeros(0)
    else:
        sv = np.zeros(0)
    rank = int((sv > cfg.rank_rcond * sv[0]).sum()) if len(sv) and sv[0] > 0 else 0
    degenerate = rank < int(observed.sum()) or not observed.any()
    a_ones = system.a @ theta_prev
    anchor = float(np.linalg.norm(system.b) / max(np.linalg.norm(a_ones), 1e-300))

    # Damped LS over theta_hat >= 0: rows [A; sqrt(reg)] in the normalized
    # residual scaling, solved with bound constraints.
    w = _reg_weights(system, cfg)
    scale = 1.0 / np.sqrt(system.norm)
    a_stack = np.concatenate([system.a * scale, np.diag(np.sqrt(w))], axis=0)
    b_stack = np.concatenate([-system.b * scale, np.sqrt(w) * theta_prev])
    res = lsq_linear(a_stack, b_stack, bounds=(0.0, np.inf), method="bvls")
    theta_hat = res.x

    e_before, _ = param_loss(system, theta_prev, theta_prev, cfg)
    e_after, _ = param_loss(system, theta_hat, theta_prev, cfg)
    grad_before = float((system.b + system.a @ theta_prev) @ (system.b + system.a @ theta_prev)) / system.norm
    r_after = system.b + system.a @ theta_hat
    grad_after = float(r_after @ r_after) / system.norm

    theta_new = np.maximum(theta_hat, 0.0) * system.scales
    # k_bending must stay strictly positive for the log reparameterization.
    if theta_new[-1] <= 0:
        theta_new[-1] = max(material.k_bending * 1e-8, 1e-300)
    new_material = material_from_theta(material, theta_new)

    report = FitReport(
        e_param_before=e_before, e_param_after=e_after,
        grad_term_before=grad_before, grad_term_after=grad_after,
        singular_values=[float(s) for s in sv], rank=rank, n_params=int(observed.sum()),
        degenerate=bool(degenerate), unobserved=unobserved,
        theta_before=[float(v) for v in theta_vector(material)],
        theta_after=[float(v) for v in theta_vector(new_material)],
        delta_norm=float(np.linalg.norm(theta_hat - theta_prev)),
        anchor_ratio=anchor,
    )
    state.history.append({"iteration": state.iteration,
                          "e_param": e_after, "grad_term": grad_after,
                          "degenerate": bool(degenerate)})
    return new_material, report


def observed_mask(report: FitReport, material: MaterialParams) -> np.ndarray:
    """Boolean mask over the raw parameter vector marking observed entries."""
    mask = np.ones(2 * material.n_grid + 1, dtype=bool)
    n_p = len(material.angle_levels)
    for kind, i, j in report.unobserved:
        if kind == "lambda":
            mask[i * n_p + j] = False
        elif kind == "mu":
            mask[material.n_grid + i * n_p + j] = False
        else:
            mask[-1] = False
    return mask


@dataclass
class AlternationResult:
    model: object
    material: MaterialParams
    reports: list
    grad_terms: list            # gradient term after each outer fit
    test_chamfer: list          # test-split Chamfer after each outer iteration
    train_histories: list


def alternate(model, material: MaterialParams, train_items: list, test_items: list,
              random_items: list, train_cfg: TrainConfig, fit_cfg: FitConfig,
              template) -> AlternationResult:
    """Iterate: freeze model outputs on scan poses -> fit parameters ->
    retrain the model under the updated physics."""
    reports, grad_terms, test_cd, histories = [], [], [], []

    def items_with(material_new, items):
        return [PoseItem(poses=it.poses, maps=it.maps,
                         ctx=it.ctx.with_material(material_new),
                         points=it.points, key=it.key) for it in items]

    current_items = train_items
    current_test = test_items
    current_random = random_items
    for outer in range(fit_cfg.n_outer):
        frozen = [apply_maps(it.maps[-1], template.vertices, model_dv(model, it))
                  for it in current_items]
        state = FitState(material=material, frozen=frozen,
                         contexts=[it.ctx for it in current_items], iteration=outer)
        material, report = fit_materials(state, fit_cfg)
        reports.append(report)
        grad_terms.append(report.grad_term_after)

        current_items = items_with(material, train_items)
        current_test = items_with(material, test_items)
        current_random = items_with(material, random_items)
        result = train(model, current_items, current_random, train_cfg, template)
        histories.append(result.history)
        test_cd.append(evaluate_chamfer(model, current_test, template))
    return AlternationResult(model=model, material=material, reports=reports,
                             grad_terms=grad_terms, test_chamfer=test_cd,
                             train_histories=histories)


def evaluate_chamfer(model, items, template) -> float:
    """Mean Chamfer distance between model outputs and scan clouds."""
    vals = []
    for it in items:
        x = apply_maps(it.maps[-1], template.vertices, model_dv(model, it))
        vals.append(chamfer(x, it.points))
    return float(np.mean(vals))


def write_fit_report(path, reports: list) -> None:
    doc = {"iterations": [r.as_dict() for r in reports]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
