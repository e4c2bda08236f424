"""Mesh <-> dense UV coordinate map codec.

Texel ``(i, j)`` (row, column) of an ``H x W`` map has its center at UV
``((j + 0.5) / W, (i + 0.5) / H)``: the template's first UV coordinate picks
the column, the second the row.  Each valid texel stores the projected image
position and depth ``(u, v, d)`` of the surface point under it.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyResolution, FormatError, NoValidSupport
from .geometry import CameraIntrinsics, Mesh, project, unproject

DEFAULT_RESOLUTION = (256, 256)
BARY_EPS = 1e-12
_HEADER = struct.Struct("<4sIII")


def _check_resolution(resolution) -> tuple[int, int]:
    h, w = (int(x) for x in resolution)
    if h < 1 or w < 1:
        raise EmptyResolution(f"resolution must be at least 1x1, got {h}x{w}")
    return h, w


@dataclass(frozen=True, eq=False)
class UVCoordinateMap:
    values: np.ndarray  # (H, W, 3): u, v in pixels, d in meters
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 3 or values.shape[2] != 3 or valid.shape != values.shape[:2]:
            raise DimensionMismatch("values must be (H, W, 3) with an (H, W) mask")
        values = np.where(valid[..., None], values, 0.0)
        values.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    def vector(self) -> np.ndarray:
        """Valid-texel (u, v, d) values flattened in row-major texel order."""
        return self.values[self.valid].reshape(-1)

    @classmethod
    def from_vector(cls, vec, valid) -> UVCoordinateMap:
        valid = np.asarray(valid, dtype=bool)
        values = np.zeros(valid.shape + (3,))
        values[valid] = np.asarray(vec, dtype=np.float64).reshape(-1, 3)
        return cls(values, valid)

    def save(self, path) -> None:
        write_grid(path, b"UVCM", self.values.astype("<f4"), self.valid)

    @classmethod
    def load(cls, path) -> UVCoordinateMap:
        magic, payload, mask = read_grid(path)
        if magic != b"UVCM":
            raise FormatError(f"expected UVCM file, found magic {magic!r}")
        return cls(payload.astype(np.float64), mask)


def write_grid(path, magic: bytes, payload: np.ndarray, mask: np.ndarray | None = None) -> None:
    """Write the shared little-endian grid container.

    16-byte header (magic, u32 width, u32 height, u32 channels), then the
    row-major payload, then an optional row-major u8 mask.
    """
    h, w = payload.shape[:2]
    channels = 1 if payload.ndim == 2 else payload.shape[2]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, w, h, channels))
        fh.write(np.ascontiguousarray(payload).tobytes())
        if mask is not None:
            fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


_PAYLOAD_DTYPE = {b"UVCM": np.dtype("<f4"), b"CMSK": np.dtype("u1")}


def read_grid(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for grid header")
    magic, w, h, ch = _HEADER.unpack_from(blob)
    if magic not in _PAYLOAD_DTYPE:
        raise FormatError(f"unknown grid magic {magic!r}")
    dt = _PAYLOAD_DTYPE[magic]
    n = w * h * ch
    off = _HEADER.size
    need = off + n * dt.itemsize
    if len(blob) < need:
        raise FormatError("truncated grid payload")
    payload = np.frombuffer(blob, dtype=dt, count=n, offset=off)
    payload = payload.reshape((h, w, ch) if ch > 1 else (h, w))
    mask = None
    if magic == b"UVCM":
        if len(blob) < need + w * h:
            raise FormatError("truncated grid mask")
        mask = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=need).reshape(h, w) != 0
    return magic, payload.copy(), mask


@dataclass(frozen=True)
class Coverage:
    """Owner face and barycentric weights of every texel (face -1: uncovered)."""

    face: np.ndarray  # (H, W) int64
    bary: np.ndarray  # (H, W, 3)

    @property
    def valid(self) -> np.ndarray:
        return self.face >= 0


def _template_key(mesh: Mesh) -> str:
    h = hashlib.sha1()
    h.update(mesh.uv_template.tobytes())
    h.update(mesh.faces.tobytes())
    return h.hexdigest()


def uv_coverage(mesh: Mesh, resolution=DEFAULT_RESOLUTION) -> Coverage:
    """Which UV-template face owns each texel center, and where inside it.

    A texel is covered when its center has all barycentric weights >= 0
    (edges inclusive); overlaps go to the lowest face index.  Depends only
    on the UV template, never on vertex positions or the camera.
    """
    h, w = _check_resolution(resolution)
    return _coverage_cached(_template_key(mesh), h, w, mesh.uv_template, mesh.faces)


_coverage_store: dict = {}


def _coverage_cached(key, h, w, uv, faces) -> Coverage:
    k = (key, h, w)
    hit = _coverage_store.get(k)
    if hit is None:
        hit = _rasterize_coverage(uv, faces, h, w)
        if len(_coverage_store) > 64:
            _coverage_store.pop(next(iter(_coverage_store)))
        _coverage_store[k] = hit
    return hit


def _rasterize_coverage(uv: np.ndarray, faces: np.ndarray, h: int, w: int) -> Coverage:
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    # continuous texel coordinates: texel (i, j) center sits at (x=j, y=i)
    px = uv[:, 0] * w - 0.5
    py = uv[:, 1] * h - 0.5
    for f, (ia, ib, ic) in enumerate(faces):
        ax, ay, bx, by, cx, cy = px[ia], py[ia], px[ib], py[ib], px[ic], py[ic]
        area2 = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if area2 == 0.0:
            continue
        j0 = max(int(np.ceil(min(ax, bx, cx) - 1e-9)), 0)
        j1 = min(int(np.floor(max(ax, bx, cx) + 1e-9)), w - 1)
        i0 = max(int(np.ceil(min(ay, by, cy) - 1e-9)), 0)
        i1 = min(int(np.floor(max(ay, by, cy) + 1e-9)), h - 1)
        if j0 > j1 or i0 > i1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        X = jj.astype(np.float64)
        Y = ii.astype(np.float64)
        l0 = ((bx - X) * (cy - Y) - (cx - X) * (by - Y)) / area2
        l1 = ((cx - X) * (ay - Y) - (ax - X) * (cy - Y)) / area2
        l2 = ((ax - X) * (by - Y) - (bx - X) * (ay - Y)) / area2
        inside = (l0 >= -BARY_EPS) & (l1 >= -BARY_EPS) & (l2 >= -BARY_EPS)
        sub = face_id[i0 : i1 + 1, j0 : j1 + 1]
        take = inside & (sub < 0)
        if not take.any():
            continue
        sub[take] = f
        bsub = bary[i0 : i1 + 1, j0 : j1 + 1]
        bsub[take] = np.stack([l0[take], l1[take], l2[take]], axis=1)
    face_id.setflags(write=False)
    bary.setflags(write=False)
    return Coverage(face_id, bary)


def interpolate_vertex_values(mesh: Mesh, per_vertex: np.ndarray, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric interpolation of per-vertex values over covered texels."""
    cov = uv_coverage(mesh, resolution)
    valid = cov.valid
    vals = np.asarray(per_vertex, dtype=np.float64)
    out = np.zeros(valid.shape + vals.shape[1:])
    fid = cov.face[valid]
    corners = vals[mesh.faces[fid]]  # (n, 3, C)
    out[valid] = np.einsum("nk,nk...->n...", cov.bary[valid], corners)
    return out, valid


def rasterize_coordinate_map(mesh: Mesh, c: CameraIntrinsics, resolution=DEFAULT_RESOLUTION) -> UVCoordinateMap:
    """Dense (u, v, d) map: every covered texel interpolates its face's projected corners."""
    _check_resolution(resolution)
    uvd = project(mesh.vertices, c)
    values, valid = interpolate_vertex_values(mesh, uvd, resolution)
    return UVCoordinateMap(values, valid)


@dataclass(frozen=True)
class SamplingStencil:
    """Bilinear stencil (4 texels per vertex) with invalid neighbours dropped."""

    index: np.ndarray  # (V, 4) flat texel index, row-major
    weight: np.ndarray  # (V, 4), rows sum to 1

    def apply(self, flat_values: np.ndarray) -> np.ndarray:
        return np.einsum("vk,vk...->v...", self.weight, flat_values[self.index])


def sampling_stencil(valid: np.ndarray, uv_template: np.ndarray) -> SamplingStencil:
    valid = np.asarray(valid, dtype=bool)
    h, w = valid.shape
    uv = np.asarray(uv_template, dtype=np.float64).reshape(-1, 2)
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    fx = x - j0
    fy = y - i0
    ii = np.stack([i0, i0, i0 + 1, i0 + 1], axis=1)
    jj = np.stack([j0, j0 + 1, j0, j0 + 1], axis=1)
    wt = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    inside = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
    ok = np.zeros_like(inside)
    ok[inside] = valid[ii[inside], jj[inside]]
    wt = np.where(ok, wt, 0.0)
    total = wt.sum(axis=1)
    n_ok = ok.sum(axis=1)
    if np.any(n_ok == 0):
        bad = int(np.flatnonzero(n_ok == 0)[0])
        raise NoValidSupport(f"vertex {bad}: all four bilinear neighbours are invalid texels")
    # neighbours that are valid but carry zero bilinear weight: average them
    degenerate = total <= 1e-12
    wt[degenerate] = ok[degenerate] / n_ok[degenerate, None]
    total[degenerate] = 1.0
    wt = wt / total[:, None]
    flat = np.where(ok, np.clip(ii, 0, h - 1) * w + np.clip(jj, 0, w - 1), 0)
    return SamplingStencil(flat, wt)


def sample_vertices(m: UVCoordinateMap, mesh_template: Mesh) -> np.ndarray:
    """Per-vertex (u, v, d) read from the map at each template UV (bilinear)."""
    st = sampling_stencil(m.valid, mesh_template.uv_template)
    return st.apply(m.values.reshape(-1, 3))


def weld_average(points: np.ndarray, weld_map: np.ndarray) -> np.ndarray:
    """Replace each point by the mean over its weld group (seam duplicates)."""
    n_groups = int(weld_map.max()) + 1 if len(weld_map) else 0
    sums = np.zeros((n_groups,) + points.shape[1:])
    np.add.at(sums, weld_map, points)
    counts = np.bincount(weld_map, minlength=n_groups).astype(np.float64)
    shape = (-1,) + (1,) * (points.ndim - 1)
    return (sums / counts.reshape(shape))[weld_map]


def reconstruct_mesh(m: UVCoordinateMap, mesh_template: Mesh, c: CameraIntrinsics) -> Mesh:
    """Unproject the sampled (u, v, d) of every template vertex.

    Seam duplicates of one template position are sampled at different UVs;
    their positions are averaged so the result stays closed.
    """
    xyz = unproject(sample_vertices(m, mesh_template), c)
    xyz = weld_average(xyz, mesh_template.weld_map)
    return Mesh(xyz, mesh_template.faces, mesh_template.uv_template, mesh_template.watertight)


@dataclass(frozen=True, eq=False)
class UVGradient:
    dx: np.ndarray  # (H, W, 3) forward difference along columns
    dy: np.ndarray  # (H, W, 3) forward difference along rows
    valid: np.ndarray  # (H, W) texel and both forward neighbours valid


def gradient(m: UVCoordinateMap) -> UVGradient:
    v, ok = m.values, m.valid
    dx = np.zeros_like(v)
    dy = np.zeros_like(v)
    dx[:, :-1] = v[:, 1:] - v[:, :-1]
    dy[:-1, :] = v[1:, :] - v[:-1, :]
    valid = np.zeros_like(ok)
    valid[:-1, :-1] = ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, :-1]
    dx[~valid] = 0.0
    dy[~valid] = 0.0
    return UVGradient(dx, dy, valid)
