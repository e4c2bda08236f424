"""Hand accuracy and hand-object interaction metrics.

Units follow common reporting practice: joint and vertex errors in cm,
penetration depth in mm, intersection volume in cm^3.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CountMismatch, DimensionMismatch, EmptyMesh, InvalidMesh
from .geometry import (
    Mesh,
    _require_watertight,
    inside_grid,
    nearest_vertex_distances,
    points_in_mesh,
)

SIV_RESOLUTION = 80
SIV_MODES = ("center", "vertex")


def _check_counts(pred: Mesh, gt: Mesh) -> None:
    if pred.n_vertices != gt.n_vertices:
        raise CountMismatch(f"vertex counts differ: {pred.n_vertices} vs {gt.n_vertices}")


def procrustes_align(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Similarity transform of ``source`` that best matches ``target`` (least squares)."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    xs, xt = source - mu_s, target - mu_t
    u, sig, vt = np.linalg.svd(xs.T @ xt)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    rot = u @ fix @ vt
    norm = (xs**2).sum()
    scale = (sig * np.diag(fix)).sum() / norm if norm > 0 else 1.0
    return scale * xs @ rot + mu_t


def _mean_error_cm(pred: np.ndarray, gt: np.ndarray, align: bool) -> float:
    if align:
        pred = procrustes_align(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=1).mean() * 100.0)


def mpvpe(pred: Mesh, gt: Mesh, align: bool = False) -> float:
    """Mean per-vertex position error in cm (optionally after Procrustes alignment)."""
    _check_counts(pred, gt)
    if pred.n_vertices == 0:
        raise EmptyMesh("cannot compare empty meshes")
    return _mean_error_cm(pred.vertices, gt.vertices, align)


@dataclass(frozen=True, eq=False)
class JointRegressor:
    """Linear map from vertex positions to joints; each row is a convex combination."""

    weights: np.ndarray  # (J, V)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] == 0:
            raise DimensionMismatch("regressor must be a non-empty (joints, vertices) matrix")
        if np.any(w < 0):
            raise InvalidMesh("regressor weights must be non-negative")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-6, rtol=0.0):
            raise InvalidMesh("regressor rows must sum to 1")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_joints(self) -> int:
        return self.weights.shape[0]

    def joints(self, mesh: Mesh) -> np.ndarray:
        if mesh.n_vertices != self.weights.shape[1]:
            raise CountMismatch(f"regressor expects {self.weights.shape[1]} vertices, mesh has {mesh.n_vertices}")
        return self.weights @ mesh.vertices

    def save(self, path) -> None:
        np.savetxt(path, self.weights, fmt="%.17g")

    @classmethod
    def load(cls, path) -> JointRegressor:
        return cls(np.atleast_2d(np.loadtxt(path, dtype=np.float64)))


def landmark_regressor(mesh: Mesh, n_joints: int = 21, neighbours: int = 4) -> JointRegressor:
    """Joints as averages of small vertex neighbourhoods around spread-out landmarks.

    Landmarks are a farthest-point sample of the welded vertex positions,
    starting from the vertex closest to the centroid.
    """
    pts = mesh.vertices
    if len(pts) == 0:
        raise EmptyMesh("mesh has no vertices")
    _, first = np.unique(mesh.weld_map, return_index=True)
    cand = np.sort(first)
    n_joints = min(n_joints, len(cand))
    picks = farthest_point_sample(pts[cand], n_joints)
    weights = np.zeros((n_joints, len(pts)))
    k = min(neighbours, len(cand))
    for row, p in enumerate(picks):
        d = np.linalg.norm(pts[cand] - pts[cand[p]], axis=1)
        near = cand[np.argsort(d, kind="stable")[:k]]
        weights[row, near] = 1.0 / k
    return JointRegressor(weights)


def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    """Deterministic farthest-point sample; starts nearest the centroid."""
    points = np.asarray(points, dtype=np.float64)
    start = int(np.argmin(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    while len(chosen) < min(n, len(points)):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


def mpjpe(pred: Mesh, gt: Mesh, reg: JointRegressor, align: bool = False) -> float:
    """Mean per-joint position error in cm."""
    _check_counts(pred, gt)
    return _mean_error_cm(reg.joints(pred), reg.joints(gt), align)


def inside_vertices(hand: Mesh, obj: Mesh) -> np.ndarray:
    """Indices of hand vertices strictly inside the (watertight) object."""
    _require_watertight(obj)
    if hand.n_vertices == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(points_in_mesh(hand.vertices, obj))


def penetration_depth(hand: Mesh, obj: Mesh) -> float:
    """Largest nearest-object-vertex distance among inside hand vertices, in mm."""
    inside = inside_vertices(hand, obj)
    if len(inside) == 0:
        return 0.0
    dist, _ = nearest_vertex_distances(hand.vertices[inside], obj)
    return float(dist.max() * 1e3)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Voxelization of an axis-aligned box; ``occupancy`` is indexed (x, y, z)."""

    lo: np.ndarray
    hi: np.ndarray
    resolution: tuple[int, int, int]
    occupancy: np.ndarray

    @property
    def voxel_volume(self) -> float:
        return float(np.prod((self.hi - self.lo) / np.asarray(self.resolution)))

    def centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return voxel_centers(self.lo, self.hi, self.resolution)

    def volume(self) -> float:
        return float(self.occupancy.sum()) * self.voxel_volume


def voxel_centers(lo, hi, resolution):
    return tuple(lo[k] + (np.arange(resolution[k]) + 0.5) * (hi[k] - lo[k]) / resolution[k] for k in range(3))


def intersection_grid(hand: Mesh, obj: Mesh, resolution: int = SIV_RESOLUTION, mode: str = "center") -> VoxelGrid:
    """Voxels of the object's bounding box that count toward the intersection volume.

    ``center``: the voxel center is inside both solids.
    ``vertex``: the voxel center is inside the object and some hand vertex
    falls in the voxel.
    """
    if mode not in SIV_MODES:
        raise ValueError(f"mode must be one of {SIV_MODES}, got {mode!r}")
    if resolution < 1:
        raise ValueError("voxel resolution must be >= 1")
    _require_watertight(obj)
    if mode == "center":
        _require_watertight(hand)
    lo, hi = obj.bounds()
    res = (resolution,) * 3
    xs, ys, zs = voxel_centers(lo, hi, res)
    in_obj = inside_grid(obj, xs, ys, zs)
    if mode == "center":
        hlo, hhi = hand.bounds()
        occ = np.zeros_like(in_obj)
        # only scan the part of the grid overlapping the hand's bounding box
        sel = [np.flatnonzero((a >= hlo[k]) & (a <= hhi[k])) for k, a in enumerate((xs, ys, zs))]
        if all(len(s) for s in sel):
            sub = inside_grid(hand, xs[sel[0]], ys[sel[1]], zs[sel[2]])
            occ[np.ix_(*sel)] = sub
        occ &= in_obj
    else:
        size = (hi - lo) / resolution
        cell = np.floor((hand.vertices - lo) / size).astype(np.int64)
        ok = np.all((cell >= 0) & (cell < resolution), axis=1)
        has = np.zeros_like(in_obj)
        has[tuple(cell[ok].T)] = True
        occ = has & in_obj
    return VoxelGrid(lo, hi, res, occ)


def solid_intersection_volume(hand: Mesh, obj: Mesh, resolution: int = SIV_RESOLUTION, mode: str = "center") -> float:
    """Hand-object intersection volume on a voxelization of the object's bounding box, in cm^3."""
    return intersection_grid(hand, obj, resolution, mode).volume() * 1e6


@dataclass
class MetricReport:
    mpjpe_cm: float | None = None
    mpvpe_cm: float | None = None
    pd_mm: float | None = None
    siv_cm3: float | None = None
    contact_iou: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "".join(f"{k}={'nan' if v is None else repr(v)}\n" for k, v in self.to_dict().items())
