"""Synthetic watertight template meshes with packed, non-overlapping UV atlases.

Each primitive is cut into charts (lat-long patches, box faces, an
icosahedron net).  Chart layouts are in meters of surface, and all charts
share one scale when packed into the unit square, so the atlas is
approximately area-preserving.  Positions shared across seams are
duplicated and snapped to bit-identical coordinates.
"""

from __future__ import annotations

import functools

import numpy as np

from .errors import UnknownKind
from .geometry import Mesh

TEMPLATE_KINDS = ("hand", "icosphere", "box")
ATLAS_GAP = 0.02  # UV units between charts (about 5 texels at 256)


class _Chart:
    """One UV island: local UVs in meters of surface, positions, faces.

    Faces are oriented so their normals point away from the local origin,
    which is the center of the convex primitive the chart was cut from.
    """

    def __init__(self, uv_local, positions, faces, orient: bool = True):
        self.uv = np.asarray(uv_local, dtype=np.float64)
        self.pos = np.asarray(positions, dtype=np.float64)
        faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if orient:
            tri = self.pos[faces]
            normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            inward = np.einsum("ij,ij->i", normal, tri.mean(axis=1)) < 0
            faces[inward] = faces[inward][:, ::-1]
        self.faces = faces
        lo = self.uv.min(axis=0)
        self.uv = self.uv - lo
        self.size = self.uv.max(axis=0)


def _grid_chart(P: np.ndarray, U: np.ndarray, V: np.ndarray) -> _Chart:
    """Chart from a (na+1, nb+1) grid of positions with matching local UVs."""
    na, nb = P.shape[0] - 1, P.shape[1] - 1
    idx = np.arange((na + 1) * (nb + 1)).reshape(na + 1, nb + 1)
    a, b = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    v00, v10 = idx[a, b].ravel(), idx[a + 1, b].ravel()
    v01, v11 = idx[a, b + 1].ravel(), idx[a + 1, b + 1].ravel()
    faces = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    uv = np.stack([U.ravel(), V.ravel()], axis=1)
    return _Chart(uv, P.reshape(-1, 3), faces)


def _cap_chart(rings: np.ndarray, pole, radii: np.ndarray) -> _Chart:
    """Disk chart around a pole (azimuthal equidistant layout).

    ``rings`` is (na, m, 3), ordered outward from the pole, and ``radii``
    gives the meridian arc length from the pole to each ring.
    """
    na, m = rings.shape[:2]
    theta = np.arange(na) * (2.0 * np.pi / na)
    uv = np.concatenate(
        [[[0.0, 0.0]], (radii[None, :, None] * np.stack([np.cos(theta), np.sin(theta)], 1)[:, None, :]).reshape(-1, 2)]
    )
    pos = np.concatenate([[pole], rings.reshape(-1, 3)])
    idx = 1 + np.arange(na * m).reshape(na, m)
    a = np.arange(na)
    an = (a + 1) % na
    faces = [np.stack([np.zeros(na, dtype=np.int64), idx[a, 0], idx[an, 0]], 1)]
    for k in range(m - 1):
        faces.append(np.stack([idx[a, k], idx[a, k + 1], idx[an, k + 1]], 1))
        faces.append(np.stack([idx[a, k], idx[an, k + 1], idx[an, k]], 1))
    return _Chart(uv, pos, np.concatenate(faces))


def _polar_charts(rings: np.ndarray, top, bottom, arc: np.ndarray, n_cap: int) -> list[_Chart]:
    """Two pole caps plus a seamed band for a closed surface of revolution type.

    ``rings`` is (na, nr, 3) from the top pole downward (poles excluded),
    ``arc`` the meridian arc length at the top pole, each ring, and the
    bottom pole.  The first and last ``n_cap`` rings go to the caps; the
    band shares their boundary rings.
    """
    na, nr = rings.shape[:2]
    n_cap = int(np.clip(n_cap, 1, (nr + 1) // 2))
    charts = [
        _cap_chart(rings[:, :n_cap], top, arc[1 : n_cap + 1]),
        _cap_chart(rings[:, ::-1][:, :n_cap], bottom, (arc[-1] - arc[1:-1])[::-1][:n_cap]),
    ]
    band = rings[:, n_cap - 1 : nr - n_cap + 1]
    if band.shape[1] >= 2:
        band = np.concatenate([band, band[:1]], axis=0)  # seam column
        closed = np.concatenate([band[:-1], band[:1]])
        perimeter = np.linalg.norm(np.diff(closed, axis=0), axis=2).sum(axis=0).max()
        U = np.linspace(0.0, perimeter, na + 1)
        V = arc[n_cap : nr - n_cap + 2]
        Ug, Vg = np.meshgrid(U, V, indexing="ij")
        charts.append(_grid_chart(band, Ug, Vg))
    return charts


def _revolution_charts(rho: np.ndarray, z: np.ndarray, n_around: int, n_cap: int) -> list[_Chart]:
    """Surface of revolution about z from a profile running pole to pole."""
    theta = np.arange(n_around) * (2.0 * np.pi / n_around)
    r, zz = rho[1:-1], z[1:-1]
    rings = np.stack(
        [r[None, :] * np.cos(theta)[:, None], r[None, :] * np.sin(theta)[:, None], np.broadcast_to(zz, (n_around, len(zz)))],
        axis=2,
    )
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(rho), np.diff(z)))])
    return _polar_charts(rings, (0.0, 0.0, z[0]), (0.0, 0.0, z[-1]), arc, n_cap)


def _ellipsoid_charts(axes, n_around: int, n_rings: int) -> list[_Chart]:
    a, b, c = axes
    phi = np.linspace(0.0, np.pi, n_rings + 1)
    theta = np.arange(n_around) * (2.0 * np.pi / n_around)
    sp = np.sin(phi)
    sp[0] = sp[-1] = 0.0
    cp = np.cos(phi)
    rings = np.stack(
        [
            a * sp[None, 1:-1] * np.cos(theta)[:, None],
            b * sp[None, 1:-1] * np.sin(theta)[:, None],
            np.broadcast_to(c * cp[1:-1], (n_around, n_rings - 1)),
        ],
        axis=2,
    )
    # meridian arc length along the longest meridian
    seg = np.hypot(max(a, b) * np.diff(sp), c * np.diff(cp))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    return _polar_charts(rings, (0.0, 0.0, c), (0.0, 0.0, -c), arc, n_rings // 4)


def _capsule_charts(radius: float, length: float, n_around: int, n_cap: int, n_body: int) -> list[_Chart]:
    t = np.linspace(0.0, np.pi / 2, n_cap + 1)
    top_rho, top_z = radius * np.sin(t), length / 2 + radius * np.cos(t)
    zb = np.linspace(length / 2, -length / 2, n_body + 1)[1:-1]
    bot_rho, bot_z = radius * np.cos(t), -length / 2 - radius * np.sin(t)
    rho = np.concatenate([top_rho, np.full(len(zb), radius), bot_rho])
    z = np.concatenate([top_z, zb, bot_z])
    rho[0] = rho[-1] = 0.0
    return _revolution_charts(rho, z, n_around, n_cap)


def _box_charts(half, n: int) -> list[_Chart]:
    lin = np.linspace(-1.0, 1.0, n + 1)
    A, B = np.meshgrid(lin, lin, indexing="ij")
    charts = []
    # (fixed axis, sign, in-plane axes) for the six faces
    for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)):
        p_axes = [k for k in range(3) if k != axis]
        if sign < 0:
            p_axes = p_axes[::-1]
        P = np.zeros(A.shape + (3,))
        P[..., axis] = sign * half[axis]
        P[..., p_axes[0]] = A * half[p_axes[0]]
        P[..., p_axes[1]] = B * half[p_axes[1]]
        U = (A + 1) * half[p_axes[0]]
        V = (B + 1) * half[p_axes[1]]
        charts.append(_grid_chart(P, U, V))
    return charts


def _icosahedron_net_chart(radius: float, subdivision: int) -> _Chart:
    lat = np.arctan(0.5)
    top = np.array([0.0, 0.0, 1.0])
    bottom = -top
    upper = [np.array([np.cos(lat) * np.cos(k * 2 * np.pi / 5), np.cos(lat) * np.sin(k * 2 * np.pi / 5), np.sin(lat)]) for k in range(5)]
    lower = [np.array([np.cos(lat) * np.cos((k + 0.5) * 2 * np.pi / 5), np.cos(lat) * np.sin((k + 0.5) * 2 * np.pi / 5), -np.sin(lat)]) for k in range(5)]
    h = np.sqrt(3.0) / 2.0
    # net corners (2D, unit edge) paired with sphere corners
    tris = []
    for i in range(5):
        j = i + 1
        U_i, U_j = ((i, h), upper[i % 5]), ((j, h), upper[j % 5])
        L_i, L_j = ((i + 0.5, 0.0), lower[i % 5]), ((j + 0.5, 0.0), lower[j % 5])
        N = ((i + 0.5, 2 * h), top)
        S = ((i + 1.0, -h), bottom)
        tris += [(N, U_i, U_j), (U_i, L_i, U_j), (U_j, L_i, L_j), (S, L_j, L_i)]
    n = 2**subdivision
    edge = radius / np.sin(2 * np.pi / 5)
    keys: dict = {}
    uv_list, pos_list, faces = [], [], []

    def vertex(q2, q3):
        key = (round(q2[0] * 2 * n), round(q2[1] / h * n))
        if key not in keys:
            keys[key] = len(uv_list)
            uv_list.append(q2 * edge)
            pos_list.append(q3 / np.linalg.norm(q3) * radius)
        return keys[key]

    for (a2, a3), (b2, b3), (c2, c3) in tris:
        a2, b2, c2 = (np.asarray(x, dtype=np.float64) for x in (a2, b2, c2))
        grid = {}
        for r in range(n + 1):
            for s in range(n + 1 - r):
                wa, wb, wc = (n - r - s) / n, r / n, s / n
                grid[r, s] = vertex(wa * a2 + wb * b2 + wc * c2, wa * a3 + wb * b3 + wc * c3)
        for r in range(n):
            for s in range(n - r):
                faces.append((grid[r, s], grid[r + 1, s], grid[r, s + 1]))
                if s + r + 1 < n:
                    faces.append((grid[r + 1, s], grid[r + 1, s + 1], grid[r, s + 1]))
    return _Chart(np.array(uv_list), np.array(pos_list), np.array(faces))


def _pack(charts: list[_Chart], gap: float = ATLAS_GAP):
    """Shelf-pack chart rectangles into [0,1]^2 with one shared scale."""
    order = sorted(range(len(charts)), key=lambda k: (-charts[k].size[1], k))

    def layout(scale):
        offsets = [None] * len(charts)
        x, y, row_h = gap, gap, 0.0
        for k in order:
            w, hgt = charts[k].size * scale
            if x + w + gap > 1.0 and x > gap:
                x, y = gap, y + row_h + gap
                row_h = 0.0
            offsets[k] = (x, y)
            x += w + gap
            row_h = max(row_h, hgt)
        fits = y + row_h + gap <= 1.0 and all(
            offsets[k][0] + charts[k].size[0] * scale + gap <= 1.0 + 1e-12 for k in order
        )
        return fits, offsets

    lo, hi = 0.0, 1.0 / max(max(c.size) for c in charts)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if layout(mid)[0]:
            lo = mid
        else:
            hi = mid
    return lo, layout(lo)[1]


def _ensure_support(uv: np.ndarray, faces: np.ndarray, resolution) -> np.ndarray:
    """Move vertices without bilinear support onto a texel center inside one of their faces.

    A vertex at a sharp chart corner can fall in a texel cell whose four
    centers all lie outside the chart; such a vertex could never be sampled
    back from a map at this resolution.
    """
    h, w = resolution
    uv = uv.copy()
    for _ in range(4):
        px, py = uv[:, 0] * w - 0.5, uv[:, 1] * h - 0.5
        j0, i0 = np.floor(px).astype(int), np.floor(py).astype(int)
        cand_j = j0[:, None] + np.array([0, 1, 0, 1])
        cand_i = i0[:, None] + np.array([0, 0, 1, 1])
        supported = np.zeros(len(uv), dtype=bool)
        tri = np.stack([px[faces], py[faces]], axis=-1)  # (F, 3, 2)
        inc = [[] for _ in range(len(uv))]
        for f, corners in enumerate(faces):
            for v in corners:
                inc[v].append(f)
        for v in range(len(uv)):
            pts = np.stack([cand_j[v], cand_i[v]], axis=1).astype(np.float64)
            supported[v] = any(_in_triangles(pts, tri[inc[v]]).any() for _ in [0])
        bad = np.flatnonzero(~supported)
        if len(bad) == 0:
            return uv
        for v in bad:
            jj, ii = np.meshgrid(np.arange(j0[v] - 2, j0[v] + 4), np.arange(i0[v] - 2, i0[v] + 4))
            pts = np.stack([jj.ravel(), ii.ravel()], axis=1).astype(np.float64)
            ok = _in_triangles(pts, tri[inc[v]], strict=True)
            if not ok.any():
                continue
            d = np.hypot(pts[:, 0] - px[v], pts[:, 1] - py[v])
            d[~ok] = np.inf
            best = pts[np.argmin(d)]
            uv[v] = ((best[0] + 0.5) / w, (best[1] + 0.5) / h)
    return uv


def _signed_areas(uv: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _snap_boundary(uv: np.ndarray, faces: np.ndarray, resolution) -> np.ndarray:
    """Place chart-boundary vertices exactly on texel centers.

    Bilinear sampling at a boundary vertex can only average texels on the
    inner side of the chart, which biases it by up to a texel. A vertex
    sitting on a texel center is sampled exactly. Snaps that would flip or
    squash an incident triangle are undone.
    """
    h, w = resolution
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    boundary = np.unique(edges[counts == 1])
    snapped = uv.copy()
    snapped[boundary, 0] = (np.round(uv[boundary, 0] * w - 0.5) + 0.5) / w
    snapped[boundary, 1] = (np.round(uv[boundary, 1] * h - 0.5) + 0.5) / h
    before = _signed_areas(uv, faces)
    min_area = 0.5 / (w * h)
    for _ in range(len(boundary) + 1):
        after = _signed_areas(snapped, faces)
        bad = (np.sign(after) != np.sign(before)) | (np.abs(after) < min_area)
        bad &= np.abs(before) >= min_area
        if not bad.any():
            break
        revert = faces[bad].ravel()
        snapped[revert] = uv[revert]
    return snapped


def _in_triangles(pts: np.ndarray, tri: np.ndarray, strict: bool = False) -> np.ndarray:
    """Which points lie in any of the 2D triangles (inclusive unless strict)."""
    a, b, c = tri[:, 0][None], tri[:, 1][None], tri[:, 2][None]
    p = pts[:, None, :]

    def cross(o, q, r):
        return (q[..., 0] - o[..., 0]) * (r[..., 1] - o[..., 1]) - (q[..., 1] - o[..., 1]) * (r[..., 0] - o[..., 0])

    area = cross(a, b, c)
    l0, l1, l2 = cross(p, b, c) / area, cross(p, c, a) / area, cross(p, a, b) / area
    lo = np.minimum(np.minimum(l0, l1), l2)
    return ((lo > 1e-6) if strict else (lo >= -1e-12)).any(axis=1)


def _assemble(charts: list[_Chart], watertight: bool = True, resolution=(256, 256)) -> Mesh:
    scale, offsets = _pack(charts)
    uv, pos, faces = [], [], []
    base = 0
    for ch, off in zip(charts, offsets):
        uv.append(ch.uv * scale + np.asarray(off))
        pos.append(ch.pos)
        faces.append(ch.faces + base)
        base += len(ch.pos)
    uv = np.concatenate(uv)
    pos = np.concatenate(pos)
    faces = np.concatenate(faces)
    pos = snap_duplicates(pos)
    # drop triangles collapsed by welding, if any
    _, weld = np.unique(pos, axis=0, return_inverse=True)
    w = weld.reshape(-1)[faces]
    keep = (w[:, 0] != w[:, 1]) & (w[:, 1] != w[:, 2]) & (w[:, 0] != w[:, 2])
    faces = faces[keep]
    used = np.zeros(len(pos), dtype=bool)
    used[faces.ravel()] = True
    remap = np.cumsum(used) - 1
    faces = remap[faces]
    uv = _snap_boundary(uv[used], faces, resolution)
    uv = _ensure_support(uv, faces, resolution)
    return Mesh(pos[used], faces, uv, watertight=watertight)


def snap_duplicates(pos: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Make positions that agree within ``tol`` bit-identical."""
    key = np.round(pos / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return pos[first][inv.reshape(-1)]


# hand layout (meters): palm ellipsoid plus five disjoint capsule digits,
# fingers along +y, palm normal -z
PALM_AXES = (0.042, 0.048, 0.013)
_FINGERS = (
    # (x of finger axis, radius, straight length)
    (-0.0315, 0.0080, 0.040),
    (-0.0105, 0.0086, 0.046),
    (0.0105, 0.0084, 0.043),
    (0.0315, 0.0078, 0.034),
)
_THUMB = ((-0.040, -0.012, 0.0), (-0.5, 0.8660254037844386, 0.0), 0.0090, 0.032)
_DIGIT_GAP = 0.003


def _rotation_z_to(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, d)
    s, cth = np.linalg.norm(v), float(z @ d)
    if s < 1e-15:
        return np.eye(3) if cth > 0 else np.diag([1.0, -1.0, -1.0])
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]]) / s
    ang = np.arctan2(s, cth)
    return np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * (K @ K)


def _palm_samples(n: int = 240) -> np.ndarray:
    a, b, c = PALM_AXES
    th, ph = np.meshgrid(np.linspace(0, 2 * np.pi, n), np.linspace(0, np.pi, n // 2))
    return np.stack([a * np.sin(ph) * np.cos(th), b * np.sin(ph) * np.sin(th), c * np.cos(ph)], -1).reshape(-1, 3)


def _segment_distance(pts, p0, p1) -> np.ndarray:
    d = p1 - p0
    t = np.clip((pts - p0) @ d / (d @ d), 0.0, 1.0)
    return np.linalg.norm(pts - (p0 + t[:, None] * d), axis=1)


def _digit_center(base, direction, radius, length) -> np.ndarray:
    """Slide a capsule out along ``direction`` until it clears the palm by the digit gap."""
    palm = _palm_samples()
    base = np.asarray(base, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    lo, hi = 0.0, 0.2
    for _ in range(60):
        t = 0.5 * (lo + hi)
        c = base + t * d
        clear = _segment_distance(palm, c - d * length / 2, c + d * length / 2).min() - radius
        if clear >= _DIGIT_GAP:
            hi = t
        else:
            lo = t
    return base + hi * d


def _placed(chart: _Chart, rotation, center) -> _Chart:
    return _Chart(chart.uv, chart.pos @ np.asarray(rotation).T + np.asarray(center), chart.faces, orient=False)


@functools.lru_cache(maxsize=8)
def hand_template(subdivision: int = 1) -> Mesh:
    k = 2**subdivision
    charts = _ellipsoid_charts(PALM_AXES, 16 * k, 8 * k)
    up = (0.0, 1.0, 0.0)
    for x0, r, length in _FINGERS:
        center = _digit_center((x0, 0.0, 0.0), up, r, length)
        charts += [_placed(ch, _rotation_z_to(up), center) for ch in _capsule_charts(r, length, 8 * k, 2 * k, 3 * k)]
    base, direction, r, length = _THUMB
    center = _digit_center(base, direction, r, length)
    charts += [_placed(ch, _rotation_z_to(direction), center) for ch in _capsule_charts(r, length, 8 * k, 2 * k, 3 * k)]
    return _assemble(charts)


@functools.lru_cache(maxsize=16)
def icosphere(radius: float = 0.05, subdivision: int = 2) -> Mesh:
    return _assemble([_icosahedron_net_chart(radius, subdivision)])


def tessellated_box(half_extents=(0.04, 0.05, 0.02), subdivision: int = 2) -> Mesh:
    return _tessellated_box(tuple(float(x) for x in half_extents), int(subdivision))


@functools.lru_cache(maxsize=16)
def _tessellated_box(half_extents: tuple, subdivision: int) -> Mesh:
    return _assemble(_box_charts(np.asarray(half_extents, dtype=np.float64), 2**subdivision))


def uv_sphere(radius: float, n_around: int = 32, n_rings: int = 16) -> Mesh:
    return _assemble(_ellipsoid_charts((radius, radius, radius), n_around, n_rings))


def make_template(kind: str, subdivision: int = 1, **dims) -> Mesh:
    """Watertight template of the given kind with a packed UV atlas.

    ``hand`` is a palm ellipsoid with five capsule digits (the digits do not
    touch the palm, so the union stays a valid set of closed shells).
    """
    if subdivision < 0:
        raise ValueError("subdivision must be >= 0")
    if kind == "hand":
        return hand_template(subdivision)
    if kind == "icosphere":
        return icosphere(float(dims.get("radius", 0.05)), subdivision)
    if kind == "box":
        return tessellated_box(dims.get("half_extents", (0.04, 0.05, 0.02)), subdivision)
    raise UnknownKind(f"unknown template kind {kind!r}; expected one of {TEMPLATE_KINDS}")
