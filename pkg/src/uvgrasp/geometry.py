"""Meshes, pinhole projection, nearest-vertex queries and point-in-mesh tests.

All lengths are meters.  Positions live in the camera frame (+z looks into
the scene).  Image coordinates are pixels with pixel centers on integers.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import EmptyMesh, InvalidMesh, NonPositiveDepth, NotWatertight

# barycentric slack for "ray grazes an edge or vertex"
RAY_EPS = 1e-9
MAX_RAY_RETRIES = 8
_RETRY_ROTATIONS = Rotation.random(MAX_RAY_RETRIES, random_state=20231).as_matrix()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Indexed triangle mesh with one UV template coordinate per vertex.

    Seams are expressed by duplicating a vertex position with different UVs.
    Topology checks (watertightness, welding) therefore work on *welded*
    vertices, i.e. vertices merged by exactly equal positions.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_template: np.ndarray
    watertight: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        uv = np.asarray(self.uv_template, dtype=np.float64).reshape(-1, 2)
        if uv.shape[0] != v.shape[0]:
            raise InvalidMesh(
                f"uv_template has {uv.shape[0]} entries for {v.shape[0]} vertices"
            )
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise InvalidMesh("face index out of range")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(uv)):
            raise InvalidMesh("non-finite vertex or uv coordinate")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "uv_template", _frozen(uv))
        object.__setattr__(self, "watertight", bool(self.watertight))
        if self.watertight and not self.is_closed():
            raise NotWatertight("mesh flagged watertight has open or non-manifold edges")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @functools.cached_property
    def weld_map(self) -> np.ndarray:
        """Welded vertex id for every vertex (ids follow np.unique row order)."""
        if self.n_vertices == 0:
            return np.zeros(0, dtype=np.int64)
        _, inverse = np.unique(self.vertices, axis=0, return_inverse=True)
        return _frozen(inverse.reshape(-1).astype(np.int64))

    @property
    def n_positions(self) -> int:
        """Number of distinct vertex positions (vertex count after welding)."""
        return int(self.weld_map.max()) + 1 if self.n_vertices else 0

    def is_closed(self) -> bool:
        """True when every welded edge is used by exactly two faces."""
        if self.n_faces == 0:
            return False
        w = self.weld_map[self.faces]
        if np.any((w[:, 0] == w[:, 1]) | (w[:, 1] == w[:, 2]) | (w[:, 0] == w[:, 2])):
            return False
        edges = np.concatenate([w[:, [0, 1]], w[:, [1, 2]], w[:, [2, 0]]])
        edges.sort(axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def with_vertices(self, vertices: np.ndarray) -> Mesh:
        return Mesh(vertices, self.faces, self.uv_template, self.watertight)

    def transformed(self, rotation=None, translation=None) -> Mesh:
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return self.with_vertices(v)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_vertices == 0:
            raise EmptyMesh("mesh has no vertices")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @functools.cached_property
    def nearest_index(self) -> NearestVertexIndex:
        return NearestVertexIndex(self.vertices)

    @functools.cached_property
    def parity_index(self) -> RayParityIndex:
        return RayParityIndex(self)


def mesh_volume(mesh: Mesh) -> float:
    """Enclosed volume by the divergence theorem (absolute value, m^3)."""
    tri = mesh.vertices[mesh.faces]
    signed = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    return abs(float(signed))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def from_text(cls, text: str) -> CameraIntrinsics:
        """Parse the six-number camera format ``fx fy cx cy W H``."""
        parts = text.split()
        if len(parts) != 6:
            raise ValueError(f"camera file needs 6 numbers (fx fy cx cy W H), got {len(parts)}")
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        w, h = (int(float(p)) for p in parts[4:])
        return cls(fx, fy, cx, cy, w, h)

    def to_text(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n"

    @classmethod
    def load(cls, path) -> CameraIntrinsics:
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def project(points, c: CameraIntrinsics) -> np.ndarray:
    """Map camera-frame points (..., 3) to (u, v, d) with d the depth z."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    out = np.empty_like(p)
    out[..., 0] = c.fx * p[..., 0] / z + c.cx
    out[..., 1] = c.fy * p[..., 1] / z + c.cy
    out[..., 2] = z
    return out


def unproject(uvd, c: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project`."""
    q = np.asarray(uvd, dtype=np.float64)
    d = q[..., 2]
    if np.any(~(d > 0)):
        raise NonPositiveDepth("cannot unproject a sample with d <= 0")
    out = np.empty_like(q)
    out[..., 0] = (q[..., 0] - c.cx) * d / c.fx
    out[..., 1] = (q[..., 1] - c.cy) * d / c.fy
    out[..., 2] = d
    return out


class NearestVertexIndex:
    """Exact Euclidean nearest-vertex queries; ties go to the lowest index."""

    _K = 4

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] == 0:
            raise EmptyMesh("nearest-vertex index needs at least one vertex")
        self._tree = cKDTree(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = self.points.shape[0]
        k = min(self._K, n)
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        # recompute exactly so ties are judged on one formula
        dist = np.linalg.norm(self.points[idx] - q[:, None, :], axis=2)
        best = dist.min(axis=1)
        tied = dist == best[:, None]
        masked = np.where(tied, idx, n)
        out_idx = masked.min(axis=1)
        if k < n:
            crowded = np.flatnonzero(tied.all(axis=1))
            for r in crowded:
                cand = np.asarray(self._tree.query_ball_point(q[r], best[r] * (1 + 1e-9) + 1e-300))
                cd = np.linalg.norm(self.points[cand] - q[r], axis=1)
                out_idx[r] = cand[cd == cd.min()].min()
                best[r] = cd.min()
        return best, out_idx


def nearest_vertex_distance(p, target: Mesh) -> tuple[float, int]:
    """Distance from one point to the closest vertex of ``target`` and its index."""
    if target.n_vertices == 0:
        raise EmptyMesh("target mesh has no vertices")
    d, i = target.nearest_index.query(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return float(d[0]), int(i[0])


def nearest_vertex_distances(points, target: Mesh) -> tuple[np.ndarray, np.ndarray]:
    if target.n_vertices == 0:
        raise EmptyMesh("target mesh has no vertices")
    return target.nearest_index.query(points)


def _classify_pairs(p: np.ndarray, tri: np.ndarray, xeps: float):
    """Classify +x rays from points ``p`` against triangles ``tri`` pairwise.

    Returns (crossing, grazing, on_surface) boolean arrays.  Triangles must
    have non-degenerate yz projections.
    """
    py, pz = p[:, 1], p[:, 2]
    Y = tri[:, :, 1] - py[:, None]
    Z = tri[:, :, 2] - pz[:, None]
    area2 = (Y[:, 1] - Y[:, 0]) * (Z[:, 2] - Z[:, 0]) - (Y[:, 2] - Y[:, 0]) * (Z[:, 1] - Z[:, 0])
    l0 = (Y[:, 1] * Z[:, 2] - Y[:, 2] * Z[:, 1]) / area2
    l1 = (Y[:, 2] * Z[:, 0] - Y[:, 0] * Z[:, 2]) / area2
    l2 = (Y[:, 0] * Z[:, 1] - Y[:, 1] * Z[:, 0]) / area2
    lmin = np.minimum(np.minimum(l0, l1), l2)
    x_hit = l0 * tri[:, 0, 0] + l1 * tri[:, 1, 0] + l2 * tri[:, 2, 0]
    dx = x_hit - p[:, 0]
    touching = lmin >= -RAY_EPS
    on_surface = touching & (np.abs(dx) <= xeps)
    crossing = (lmin > RAY_EPS) & (dx > xeps)
    grazing = touching & (lmin <= RAY_EPS) & (dx > -xeps)
    return crossing, grazing, on_surface


def _face_filter(tri: np.ndarray, scale: float) -> np.ndarray:
    Y, Z = tri[:, :, 1], tri[:, :, 2]
    area2 = (Y[:, 1] - Y[:, 0]) * (Z[:, 2] - Z[:, 0]) - (Y[:, 2] - Y[:, 0]) * (Z[:, 1] - Z[:, 0])
    return np.abs(area2) > 1e-14 * scale * scale


class RayParityIndex:
    """Ray-parity inside test with a yz bucket grid over the faces.

    Rays run along +x.  A ray that grazes an edge or vertex is re-cast in a
    fixed sequence of rotated frames (up to ``MAX_RAY_RETRIES`` times); each
    rotated frame gets its own bucket grid, built on first use.  Points on
    the surface are reported as outside.
    """

    def __init__(self, mesh: Mesh):
        if mesh.n_faces == 0:
            raise EmptyMesh("inside test needs a mesh with faces")
        self.vertices = mesh.vertices
        self.faces = mesh.faces
        lo, hi = mesh.bounds()
        self.scale = float(max(np.linalg.norm(hi - lo), 1e-12))
        self.xeps = 1e-12 * self.scale
        self._build(mesh.vertices[mesh.faces])
        self._rotated: dict[int, RayParityIndex] = {}

    @classmethod
    def _from_triangles(cls, tri: np.ndarray, scale: float) -> RayParityIndex:
        self = cls.__new__(cls)
        self.scale = scale
        self.xeps = 1e-12 * scale
        self._build(tri)
        return self

    def _build(self, tri_all: np.ndarray) -> None:
        self._tri = tri_all[_face_filter(tri_all, self.scale)]
        pts = tri_all.reshape(-1, 3)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        self._lo = lo[1:].copy()
        span = np.maximum(hi[1:] - lo[1:], 1e-12)
        g = int(np.clip(np.sqrt(len(self._tri)) / 2, 1, 128))
        self._g = g
        self._cell = span / g
        tmin = self._tri[:, :, 1:].min(axis=1)
        tmax = self._tri[:, :, 1:].max(axis=1)
        c0 = np.clip(np.floor((tmin - self._lo) / self._cell).astype(np.int64), 0, g - 1)
        c1 = np.clip(np.floor((tmax - self._lo) / self._cell).astype(np.int64), 0, g - 1)
        ny = c1[:, 0] - c0[:, 0] + 1
        nz = c1[:, 1] - c0[:, 1] + 1
        tot = ny * nz
        face = np.repeat(np.arange(len(self._tri)), tot)
        local = np.arange(tot.sum()) - np.repeat(np.cumsum(tot) - tot, tot)
        cy = np.repeat(c0[:, 0], tot) + local // np.repeat(nz, tot)
        cz = np.repeat(c0[:, 1], tot) + local % np.repeat(nz, tot)
        cell_id = cy * g + cz
        order = np.argsort(cell_id, kind="stable")
        self._cell_faces = face[order]
        self._cell_start = np.searchsorted(cell_id[order], np.arange(g * g + 1))

    def _classify(self, p: np.ndarray):
        """Parity-inside, grazing and on-surface flags for +x rays from ``p``."""
        n = len(p)
        rel = (p[:, 1:] - self._lo) / self._cell
        in_box = np.all((rel >= 0) & (rel <= self._g), axis=1)
        cells = np.clip(np.floor(rel).astype(np.int64), 0, self._g - 1)
        cid = cells[:, 0] * self._g + cells[:, 1]
        pidx = np.flatnonzero(in_box)
        starts = self._cell_start[cid[pidx]]
        counts = self._cell_start[cid[pidx] + 1] - starts
        pair_p = np.repeat(pidx, counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        pair_f = self._cell_faces[np.repeat(starts, counts) + offs]
        cr, gz, on = _classify_pairs(p[pair_p], self._tri[pair_f], self.xeps)
        hits = np.bincount(pair_p, weights=cr, minlength=n).astype(np.int64)
        graze = np.bincount(pair_p, weights=gz, minlength=n) > 0
        surf = np.bincount(pair_p, weights=on, minlength=n) > 0
        return (hits % 2 == 1) & ~surf, graze & ~surf, surf

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0:
            return np.zeros(0, dtype=bool)
        inside, graze, _ = self._classify(p)
        todo = np.flatnonzero(graze)
        if len(todo):
            inside[todo] = self._retry(p[todo])
        return inside

    def _rotated_index(self, r: int) -> RayParityIndex:
        if r not in self._rotated:
            tri = self.vertices[self.faces] @ _RETRY_ROTATIONS[r].T
            self._rotated[r] = RayParityIndex._from_triangles(tri, self.scale)
        return self._rotated[r]

    def _retry(self, pts: np.ndarray) -> np.ndarray:
        result = np.zeros(len(pts), dtype=bool)
        pending = np.arange(len(pts))
        for r, rot in enumerate(_RETRY_ROTATIONS):
            inside, graze, _ = self._rotated_index(r)._classify(pts[pending] @ rot.T)
            result[pending] = inside
            pending = pending[graze]
            if len(pending) == 0:
                break
        return result


def _require_watertight(m: Mesh) -> None:
    if not m.watertight:
        raise NotWatertight("inside test requires a mesh flagged watertight")


def point_in_mesh(p, m: Mesh) -> bool:
    """True iff ``p`` lies strictly inside the watertight mesh ``m``."""
    _require_watertight(m)
    return bool(m.parity_index.contains(np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def points_in_mesh(points, m: Mesh) -> np.ndarray:
    _require_watertight(m)
    return m.parity_index.contains(points)


def inside_grid(m: Mesh, xs, ys, zs) -> np.ndarray:
    """Inside test for every node of the grid ``xs x ys x zs`` (ascending axes).

    Casts one +x ray per (y, z) grid line, which is the usual voxelization
    scan.  Grid lines that graze an edge fall back to per-point tests.
    """
    _require_watertight(m)
    xs, ys, zs = (np.asarray(a, dtype=np.float64) for a in (xs, ys, zs))
    nx, ny, nz = len(xs), len(ys), len(zs)
    idx = m.parity_index
    tri = idx._tri
    out = np.zeros((nx, ny, nz), dtype=bool)
    if nx == 0 or ny == 0 or nz == 0 or len(tri) == 0:
        return out
    tmin = tri[:, :, 1:].min(axis=1)
    tmax = tri[:, :, 1:].max(axis=1)
    j0 = np.searchsorted(ys, tmin[:, 0], "left")
    j1 = np.searchsorted(ys, tmax[:, 0], "right")
    k0 = np.searchsorted(zs, tmin[:, 1], "left")
    k1 = np.searchsorted(zs, tmax[:, 1], "right")
    nj = np.maximum(j1 - j0, 0)
    nk = np.maximum(k1 - k0, 0)
    tot = nj * nk
    has = tot > 0
    fids = np.flatnonzero(has)
    tot, nk_h = tot[has], nk[has]
    face = np.repeat(fids, tot)
    local = np.arange(tot.sum()) - np.repeat(np.cumsum(tot) - tot, tot)
    jj = np.repeat(j0[has], tot) + local // np.repeat(nk_h, tot)
    kk = np.repeat(k0[has], tot) + local % np.repeat(nk_h, tot)
    t = tri[face]
    Y = t[:, :, 1] - ys[jj][:, None]
    Z = t[:, :, 2] - zs[kk][:, None]
    area2 = (Y[:, 1] - Y[:, 0]) * (Z[:, 2] - Z[:, 0]) - (Y[:, 2] - Y[:, 0]) * (Z[:, 1] - Z[:, 0])
    l0 = (Y[:, 1] * Z[:, 2] - Y[:, 2] * Z[:, 1]) / area2
    l1 = (Y[:, 2] * Z[:, 0] - Y[:, 0] * Z[:, 2]) / area2
    l2 = (Y[:, 0] * Z[:, 1] - Y[:, 1] * Z[:, 0]) / area2
    x_hit = l0 * t[:, 0, 0] + l1 * t[:, 1, 0] + l2 * t[:, 2, 0]
    ray = jj * nz + kk
    lmin = np.minimum(np.minimum(l0, l1), l2)
    crossing = lmin > RAY_EPS
    bad_ray = np.zeros(ny * nz, dtype=bool)
    bad_ray[ray[(lmin >= -RAY_EPS) & ~crossing]] = True
    # a crossing at x_hit flips parity for every node with x < x_hit
    b = np.searchsorted(xs, x_hit[crossing], "left")
    counts = np.zeros((ny * nz, nx + 1), dtype=np.int64)
    np.add.at(counts, (ray[crossing], b), 1)
    suffix = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1]
    parity = suffix[:, 1:] % 2 == 1
    # nodes exactly on a crossing are on the surface
    exact = np.zeros((ny * nz, nx), dtype=bool)
    xc, rc = x_hit[crossing], ray[crossing]
    hit_node = np.clip(b, 0, nx - 1)
    on = np.abs(xs[hit_node] - xc) <= idx.xeps
    exact[rc[on], hit_node[on]] = True
    inside = parity & ~exact
    out = inside.reshape(ny, nz, nx).transpose(2, 0, 1).copy()
    bad = np.flatnonzero(bad_ray)
    if len(bad):
        bj, bk = np.divmod(bad, nz)
        pts = np.stack(
            [
                np.repeat(xs[None, :], len(bad), axis=0).ravel(),
                np.repeat(ys[bj], nx),
                np.repeat(zs[bk], nx),
            ],
            axis=1,
        )
        res = idx.contains(pts).reshape(len(bad), nx)
        out[:, bj, bk] = res.T
    return out
