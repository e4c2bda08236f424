"""Inference-time grasp refinement in the latent space of a UV-map decoder.

The objective over a latent code ``z`` is

    0.5 * ||z||^2 + w * mean_i ||p_i(z) - q_i||

where ``p_i`` are decoded hand vertices strictly inside the object, ``q_i``
their nearest object vertices and ``w`` the penetration weight (0 gives the
hand-only variant).  The gradient treats the inside set and the nearest
assignment as fixed at the current iterate, so the objective is smooth
piecewise and the gradient is exact away from membership changes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .contact import (
    MASK_DILATION,
    ContactMask,
    contact_vertices,
    rasterize_contact_mask,
    restrict_penetration_candidates,
)
from .errors import NonFiniteObjective
from .geometry import (
    Mesh,
    _require_watertight,
    nearest_vertex_distances,
    points_in_mesh,
)
from .latent import LinearDecoder, object_descriptor
from .losses import _candidate_flags, inference_prior_penalty
from .metrics import penetration_depth, solid_intersection_volume
from .uvmap import UVCoordinateMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    """Gradient-descent settings for latent refinement.

    ``lr`` and ``tol`` default to tiny values suited to a trained network's
    latent space; linear models with whitened codes want a much larger step.
    """

    lr: float = 1e-6
    tol: float = 1e-6
    max_iter: int = 10_000
    restrict: bool = True
    penetration_weight: float = 1.0
    hand_only: bool = False
    max_halvings: int = 20
    mask_dilation: int = MASK_DILATION

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if not self.tol > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iter < 0 or self.max_halvings < 0 or self.mask_dilation < 0:
            raise ValueError("iteration, halving and dilation counts must be >= 0")
        if self.penetration_weight < 0:
            raise ValueError("penetration weight must be >= 0")

    @property
    def weight(self) -> float:
        return 0.0 if self.hand_only else self.penetration_weight

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PenetrationState:
    """Inside set and nearest assignment of a decoded hand."""

    vertices: np.ndarray  # (V, 3) decoded hand
    inside: np.ndarray  # indices of penetrating candidate vertices
    distance: np.ndarray  # (len(inside),) nearest-object-vertex distance, meters
    nearest: np.ndarray  # (len(inside), 3) nearest object vertex positions

    @property
    def loss(self) -> float:
        return float(self.distance.mean()) if len(self.inside) else 0.0

    @property
    def depth_mm(self) -> float:
        return float(self.distance.max() * 1e3) if len(self.inside) else 0.0


def penetration_state(vertices: np.ndarray, obj: Mesh, candidates=None) -> PenetrationState:
    flags = _candidate_flags(candidates, len(vertices))
    idx = np.flatnonzero(flags)
    if len(idx):
        idx = idx[points_in_mesh(vertices[idx], obj)]
    if len(idx) == 0:
        return PenetrationState(vertices, idx, np.zeros(0), np.zeros((0, 3)))
    dist, near = nearest_vertex_distances(vertices[idx], obj)
    return PenetrationState(vertices, idx, dist, obj.vertices[near])


def _objective_from_state(z: np.ndarray, state: PenetrationState, weight: float) -> float:
    value = inference_prior_penalty(z) + (weight * state.loss if weight else 0.0)
    if not np.isfinite(value):
        raise NonFiniteObjective(f"objective is {value}")
    return value


def objective(z, decoder: LinearDecoder, obj: Mesh, config: OptimizerConfig = OptimizerConfig(), candidates=None) -> float:
    """Prior penalty plus weighted penetration loss of the decoded hand."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    weight = config.weight
    if weight == 0:
        return _objective_from_state(z, PenetrationState(None, np.zeros(0, np.int64), np.zeros(0), None), 0.0)
    _require_watertight(obj)
    return _objective_from_state(z, penetration_state(decoder.vertices(z), obj, candidates), weight)


def _gradient_from_state(z: np.ndarray, state: PenetrationState, decoder: LinearDecoder, weight: float) -> np.ndarray:
    grad = z.copy()
    if weight and len(state.inside):
        diff = state.vertices[state.inside] - state.nearest
        unit = diff / np.maximum(state.distance, 1e-300)[:, None]
        jac = decoder.vertex_jacobian(z)[state.inside]  # (n, 3, k)
        grad += weight * np.einsum("nc,nck->k", unit, jac) / len(state.inside)
    return grad


def objective_and_gradient(z, decoder: LinearDecoder, obj: Mesh, config: OptimizerConfig = OptimizerConfig(), candidates=None):
    """Objective value and its analytic gradient with the inside set frozen at ``z``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    weight = config.weight
    if weight:
        _require_watertight(obj)
        state = penetration_state(decoder.vertices(z), obj, candidates)
    else:
        state = PenetrationState(None, np.zeros(0, np.int64), np.zeros(0), None)
    value = _objective_from_state(z, state, weight)
    return value, _gradient_from_state(z, state, decoder, weight)


@dataclass(eq=False)
class OptimizationResult:
    z: np.ndarray
    trace: list[float]  # accepted objective values, starting with the initial one
    pd_trace_mm: list[float]  # penetration depth over the candidates at each accepted iterate
    iterations: int
    stop_reason: str

    def trace_rows(self):
        return [(i, f, pd) for i, (f, pd) in enumerate(zip(self.trace, self.pd_trace_mm))]


def optimize(init, decoder: LinearDecoder, obj: Mesh, config: OptimizerConfig = OptimizerConfig(), candidates=None) -> OptimizationResult:
    """Gradient descent from ``init`` with step halving on objective increase.

    Each iteration tries ``z - lr * g``; while the objective rises the step
    is halved (at most ``max_halvings`` times, after which the loop stops).
    The loop also stops once an accepted step changes the objective by less
    than ``tol`` or after ``max_iter`` iterations.
    """
    z = np.asarray(init, dtype=np.float64).reshape(-1).copy()
    if not np.all(np.isfinite(z)):
        raise NonFiniteObjective("initial code has non-finite entries")
    weight = config.weight
    if weight:
        _require_watertight(obj)

    def evaluate(code):
        if weight:
            st = penetration_state(decoder.vertices(code), obj, candidates)
        else:
            st = PenetrationState(None, np.zeros(0, np.int64), np.zeros(0), None)
        return _objective_from_state(code, st, weight), st

    value, state = evaluate(z)
    trace, pd_trace = [value], [state.depth_mm]
    stop = "max_iter"
    it = 0
    while it < config.max_iter:
        grad = _gradient_from_state(z, state, decoder, weight)
        step = config.lr
        for _ in range(config.max_halvings + 1):
            trial = z - step * grad
            trial_value, trial_state = evaluate(trial)
            if trial_value <= value:
                break
            step *= 0.5
        else:
            stop = "step_halving"
            break
        it += 1
        change = value - trial_value
        z, value, state = trial, trial_value, trial_state
        trace.append(value)
        pd_trace.append(state.depth_mm)
        if change < config.tol:
            stop = "converged"
            break
    log.info("optimize: %d iterations, objective %.6g -> %.6g (%s)", it, trace[0], trace[-1], stop)
    return OptimizationResult(z, trace, pd_trace, it, stop)


@dataclass
class RefinementReport:
    objective_initial: float
    objective_final: float
    pd_mm_initial: float
    pd_mm_final: float
    siv_cm3_initial: float | None
    siv_cm3_final: float | None
    iterations: int
    stop_reason: str
    latent_shift: float
    candidate_count: int
    mode: str
    trace: list[float] = field(default_factory=list)
    pd_trace_mm: list[float] = field(default_factory=list)
    z_initial: list[float] = field(default_factory=list)
    z_final: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def penetration_candidates(decoder: LinearDecoder, z, obj: Mesh, config: OptimizerConfig, contact_mask: ContactMask | None = None):
    """Candidate hand vertices for the penetration term, or ``None`` for a full scan.

    Without a given mask, the contact mask of the decoded starting hand is
    used.
    """
    if not config.restrict:
        return None
    template = decoder.template
    if contact_mask is None:
        hand0 = decoder.mesh(z)
        contact_mask = rasterize_contact_mask(contact_vertices(hand0, obj), template, decoder.model.resolution)
    return restrict_penetration_candidates(contact_mask, template, config.mask_dilation)


def refine_grasp(
    uv_map: UVCoordinateMap,
    decoder: LinearDecoder,
    obj: Mesh,
    config: OptimizerConfig = OptimizerConfig(),
    contact_mask: ContactMask | None = None,
    siv_resolution: int | None = 80,
):
    """Encode a predicted map, refine its code against the object, decode and rebuild the mesh.

    Returns ``(mesh, refined_map, report)``.  PD in the report is measured
    over all hand vertices; SIV is skipped when ``siv_resolution`` is
    ``None``.
    """
    context = object_descriptor(obj)
    z0 = decoder.encode(uv_map, context)
    candidates = penetration_candidates(decoder, z0, obj, config, contact_mask)
    result = optimize(z0, decoder, obj, config, candidates)
    hand0 = decoder.mesh(z0)
    hand = decoder.mesh(result.z)
    refined = decoder.decode(result.z, context)
    siv0 = siv1 = None
    if siv_resolution is not None:
        siv0 = solid_intersection_volume(hand0, obj, siv_resolution)
        siv1 = solid_intersection_volume(hand, obj, siv_resolution)
    report = RefinementReport(
        objective_initial=result.trace[0],
        objective_final=result.trace[-1],
        pd_mm_initial=penetration_depth(hand0, obj),
        pd_mm_final=penetration_depth(hand, obj),
        siv_cm3_initial=siv0,
        siv_cm3_final=siv1,
        iterations=result.iterations,
        stop_reason=result.stop_reason,
        latent_shift=float(np.linalg.norm(result.z - z0)),
        candidate_count=hand.n_vertices if candidates is None else len(candidates),
        mode="hand_only" if config.hand_only else "hand_object",
        trace=list(result.trace),
        pd_trace_mm=list(result.pd_trace_mm),
        z_initial=z0.tolist(),
        z_final=result.z.tolist(),
    )
    return hand, refined, report
