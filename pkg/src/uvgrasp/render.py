"""Unlit z-buffer rendering of textured meshes and texture extraction.

Pixel ``(row, col)`` has its center at image coordinates ``(u=col, v=row)``,
the same convention :func:`uvgrasp.geometry.project` uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionMismatch
from .geometry import CameraIntrinsics, Mesh, project
from .uvmap import UVCoordinateMap

RENDER_MODES = ("serial", "batched")
_COVER_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class TextureMap:
    """RGB texture aligned with the UV template; ``present`` marks texels that carry color."""

    values: np.ndarray  # (H, W, 3) in [0, 1]
    present: np.ndarray  # (H, W) bool

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        present = np.asarray(self.present, dtype=bool)
        if values.ndim != 3 or values.shape[2] != 3 or present.shape != values.shape[:2]:
            raise DimensionMismatch("texture must be (H, W, 3) with an (H, W) presence mask")
        if values.size and (values.min() < -1e-12 or values.max() > 1 + 1e-12):
            raise ValueError("texture values must lie in [0, 1]")
        values = np.where(present[..., None], np.clip(values, 0.0, 1.0), 0.0)
        values.setflags(write=False)
        present = present.copy()
        present.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "present", present)

    @classmethod
    def constant(cls, color, present) -> TextureMap:
        present = np.asarray(present, dtype=bool)
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), present.shape + (3,)), present)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.present.shape

    def filled(self) -> np.ndarray:
        """Values with every absent texel copied from its nearest present texel.

        This is the usual texture gutter: bilinear lookups near a chart
        border then blend only colors that belong to the surface.
        """
        if not self.present.any() or self.present.all():
            return np.array(self.values)
        _, (ii, jj) = ndimage.distance_transform_edt(~self.present, return_indices=True)
        return self.values[ii, jj]

    def save(self, path) -> None:
        rgba = np.concatenate([self.values, self.present[..., None].astype(np.float64)], axis=2)
        Image.fromarray(_to_u8(rgba), mode="RGBA").save(path)

    @classmethod
    def load(cls, path) -> TextureMap:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
        return cls(arr[..., :3], arr[..., 3] > 0.5)


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    silhouette: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) meters, inf off the silhouette
    face: np.ndarray  # (H, W) front-most face index, -1 off the silhouette


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    """Save an (H, W), (H, W, 3) float image in [0, 1] or a boolean mask as 8-bit PNG."""
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.float64)
    Image.fromarray(_to_u8(img)).save(path)


def read_png(path) -> np.ndarray:
    """Load a PNG as float RGB in [0, 1] (alpha is dropped)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def sample_texture(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at template UVs with edge clamping."""
    h, w = tex.shape[:2]
    x = np.clip(uv[:, 0] * w - 0.5, 0.0, w - 1.0)
    y = np.clip(uv[:, 1] * h - 0.5, 0.0, h - 1.0)
    return _bilinear(tex, x, y)


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    j0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    i0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    j1, i1 = np.minimum(j0 + 1, w - 1), np.minimum(i0 + 1, h - 1)
    fx, fy = (x - j0)[:, None], (y - i0)[:, None]
    return (
        img[i0, j0] * (1 - fx) * (1 - fy)
        + img[i0, j1] * fx * (1 - fy)
        + img[i1, j0] * (1 - fx) * fy
        + img[i1, j1] * fx * fy
    )


def _face_fragments(f: int, sx: np.ndarray, sy: np.ndarray, sz: np.ndarray, faces: np.ndarray, w: int, h: int):
    """Covered pixels of one face with depth and perspective-correct weights."""
    a, b, c = faces[f]
    ax, ay, bx, by, cx, cy = sx[a], sy[a], sx[b], sy[b], sx[c], sy[c]
    area2 = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
    if area2 == 0.0:
        return None
    j0 = max(int(np.ceil(min(ax, bx, cx) - 1e-9)), 0)
    j1 = min(int(np.floor(max(ax, bx, cx) + 1e-9)), w - 1)
    i0 = max(int(np.ceil(min(ay, by, cy) - 1e-9)), 0)
    i1 = min(int(np.floor(max(ay, by, cy) + 1e-9)), h - 1)
    if j0 > j1 or i0 > i1:
        return None
    jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
    X, Y = jj.ravel().astype(np.float64), ii.ravel().astype(np.float64)
    l0 = ((bx - X) * (cy - Y) - (cx - X) * (by - Y)) / area2
    l1 = ((cx - X) * (ay - Y) - (ax - X) * (cy - Y)) / area2
    l2 = ((ax - X) * (by - Y) - (bx - X) * (ay - Y)) / area2
    keep = (l0 >= -_COVER_EPS) & (l1 >= -_COVER_EPS) & (l2 >= -_COVER_EPS)
    if not keep.any():
        return None
    lam = np.stack([l0[keep], l1[keep], l2[keep]], axis=1)
    # perspective-correct weights: interpolate 1/z linearly in screen space
    pw = lam / np.array([sz[a], sz[b], sz[c]])
    inv_z = pw.sum(axis=1)
    return ii.ravel()[keep] * w + jj.ravel()[keep], 1.0 / inv_z, pw / inv_z[:, None]


def render(mesh: Mesh, texture: TextureMap, c: CameraIntrinsics, mode: str = "serial") -> RenderOutput:
    """Rasterize the mesh with pixel-center coverage and a nearest-depth z-buffer.

    No culling and no shading: each covered pixel shows the texture color at
    the perspective-correct template UV of the front-most surface.  Equal
    depths keep the lower face index.  ``serial`` walks faces in order;
    ``batched`` collects every fragment first and resolves them with one sort;
    both give the same image.
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"mode must be one of {RENDER_MODES}, got {mode!r}")
    w, h = c.width, c.height
    uvd = project(mesh.vertices, c)
    sx, sy, sz = uvd[:, 0], uvd[:, 1], uvd[:, 2]
    n_pix = w * h
    depth = np.full(n_pix, np.inf)
    owner = np.full(n_pix, -1, dtype=np.int64)
    weights = np.zeros((n_pix, 3))
    if mode == "serial":
        for f in range(mesh.n_faces):
            frag = _face_fragments(f, sx, sy, sz, mesh.faces, w, h)
            if frag is None:
                continue
            pix, z, pw = frag
            closer = z < depth[pix]
            pix = pix[closer]
            depth[pix] = z[closer]
            owner[pix] = f
            weights[pix] = pw[closer]
    else:
        frags = [(f, _face_fragments(f, sx, sy, sz, mesh.faces, w, h)) for f in range(mesh.n_faces)]
        frags = [(f, fr) for f, fr in frags if fr is not None]
        if frags:
            pix = np.concatenate([fr[0] for _, fr in frags])
            z = np.concatenate([fr[1] for _, fr in frags])
            pw = np.concatenate([fr[2] for _, fr in frags])
            fid = np.concatenate([np.full(len(fr[0]), f) for f, fr in frags])
            order = np.lexsort((fid, z, pix))
            first = np.ones(len(order), dtype=bool)
            first[1:] = pix[order][1:] != pix[order][:-1]
            win = order[first]
            depth[pix[win]] = z[win]
            owner[pix[win]] = fid[win]
            weights[pix[win]] = pw[win]
    sil = owner >= 0
    color = np.zeros((n_pix, 3))
    if sil.any():
        corner_uv = mesh.uv_template[mesh.faces[owner[sil]]]  # (n, 3, 2)
        uv = np.einsum("nk,nkc->nc", weights[sil], corner_uv)
        color[sil] = sample_texture(texture.filled(), uv)
    return RenderOutput(color.reshape(h, w, 3), sil.reshape(h, w), depth.reshape(h, w), owner.reshape(h, w))


def masked_target(image, silhouette) -> np.ndarray:
    """The image with everything outside the silhouette set to black."""
    img = np.asarray(image, dtype=np.float64)
    sil = np.asarray(silhouette, dtype=bool)
    if img.shape[:2] != sil.shape:
        raise DimensionMismatch(f"image {img.shape[:2]} and silhouette {sil.shape} differ")
    return img * (sil[..., None] if img.ndim == 3 else sil)


def _in_image(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    return (uv[:, 0] >= 0) & (uv[:, 0] <= width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1)


def extract_texture(image, m: UVCoordinateMap) -> TextureMap:
    """Per valid texel, the bilinear image color at the texel's stored (u, v).

    Texels whose (u, v) falls outside the image are marked absent.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    values = np.zeros(m.values.shape)
    present = np.zeros(m.valid.shape, dtype=bool)
    uv = m.values[m.valid][:, :2]
    ok = _in_image(uv, w, h)
    idx = np.argwhere(m.valid)[ok]
    present[idx[:, 0], idx[:, 1]] = True
    values[present] = _bilinear(img, uv[ok, 0], uv[ok, 1])
    return TextureMap(np.clip(values, 0.0, 1.0), present)


def visible_texels(m: UVCoordinateMap, out: RenderOutput, c: CameraIntrinsics, depth_tol: float = 3e-3) -> np.ndarray:
    """Valid texels whose surface point is the front-most surface in the render.

    All four pixels around the texel's (u, v) must be on the silhouette with
    a z-buffer depth within ``depth_tol`` of the texel's depth, so a
    bilinear read at (u, v) sees only this surface.
    """
    h, w = out.silhouette.shape
    vis = np.zeros(m.valid.shape, dtype=bool)
    uvd = m.values[m.valid]
    ok = _in_image(uvd[:, :2], w, h) & (uvd[:, 2] > 0)
    j0 = np.clip(np.floor(uvd[:, 0]).astype(np.int64), 0, max(w - 2, 0))
    i0 = np.clip(np.floor(uvd[:, 1]).astype(np.int64), 0, max(h - 2, 0))
    for di in (0, 1):
        for dj in (0, 1):
            ii, jj = np.minimum(i0 + di, h - 1), np.minimum(j0 + dj, w - 1)
            ok &= out.silhouette[ii, jj] & (np.abs(out.depth[ii, jj] - uvd[:, 2]) <= depth_tol)
    idx = np.argwhere(m.valid)[ok]
    vis[idx[:, 0], idx[:, 1]] = True
    return vis

