"""Linear (PCA) latent model over UV coordinate maps and its vertex decoder.

The model stores a mean map vector and an orthonormal basis over the
valid-texel ``(u, v, d)`` values.  Codes are whitened by default: code
entry ``i`` is the basis coefficient divided by the sample standard
deviation along that direction, so a standard normal prior on the code is
meaningful.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, FormatError, RankDeficient, TooFewSamples
from .geometry import CameraIntrinsics, Mesh
from .uvmap import UVCoordinateMap, sampling_stencil, weld_average

log = logging.getLogger(__name__)

DEFAULT_LATENT_DIM = 128
DESCRIPTOR_POINTS = 32
DESCRIPTOR_SIZE = 6 + 3 * DESCRIPTOR_POINTS
_LLAT_HEADER = struct.Struct("<4sII")
_LLAT_SHAPE = struct.Struct("<II")


@dataclass(frozen=True, eq=False)
class LinearLatentModel:
    mean: np.ndarray  # (n,)
    basis: np.ndarray  # (k, n), orthonormal rows
    valid: np.ndarray  # (H, W) texel mask the vectors live on
    scales: np.ndarray  # (k,), decode uses mean + (scales * z) @ basis
    explained_variance_ratio: np.ndarray | None = field(default=None)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64).reshape(-1, mean.size)
        valid = np.asarray(self.valid, dtype=bool)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if mean.size != 3 * int(valid.sum()):
            raise DimensionMismatch("mean length must be 3x the number of valid texels")
        if scales.size != basis.shape[0]:
            raise DimensionMismatch("one scale per basis direction is required")
        for name, arr in (("mean", mean), ("basis", basis), ("valid", valid), ("scales", scales)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def vector_length(self) -> int:
        return self.mean.size

    @property
    def resolution(self) -> tuple[int, int]:
        return self.valid.shape

    def _check_map(self, m: UVCoordinateMap) -> None:
        if m.resolution != self.resolution or not np.array_equal(m.valid, self.valid):
            raise DimensionMismatch("map resolution or valid mask differs from the model's")

    def encode(self, m: UVCoordinateMap) -> np.ndarray:
        """Least-squares code of a map (orthonormal basis, so a projection)."""
        self._check_map(m)
        return (self.basis @ (m.vector() - self.mean)) / self.scales

    def decode_vector(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.size != self.latent_dim:
            raise DimensionMismatch(f"code has {z.size} entries, model expects {self.latent_dim}")
        return self.mean + (self.scales * z) @ self.basis

    def decode(self, z) -> UVCoordinateMap:
        return UVCoordinateMap.from_vector(self.decode_vector(z), self.valid)

    def save(self, path) -> None:
        """LLAT file: header, float64 mean, float64 basis, then mask shape, u8 mask, float64 scales."""
        h, w = self.resolution
        with open(path, "wb") as fh:
            fh.write(_LLAT_HEADER.pack(b"LLAT", self.latent_dim, self.vector_length))
            fh.write(self.mean.astype("<f8").tobytes())
            fh.write(self.basis.astype("<f8").tobytes())
            fh.write(_LLAT_SHAPE.pack(h, w))
            fh.write(self.valid.astype(np.uint8).tobytes())
            fh.write(self.scales.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> LinearLatentModel:
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < _LLAT_HEADER.size:
            raise FormatError("file too short for LLAT header")
        magic, k, n = _LLAT_HEADER.unpack_from(blob)
        if magic != b"LLAT":
            raise FormatError(f"expected LLAT file, found magic {magic!r}")
        off = _LLAT_HEADER.size
        need = off + 8 * (n + k * n) + _LLAT_SHAPE.size
        if len(blob) < need:
            raise FormatError("truncated LLAT payload")
        mean = np.frombuffer(blob, "<f8", n, off)
        basis = np.frombuffer(blob, "<f8", k * n, off + 8 * n).reshape(k, n)
        h, w = _LLAT_SHAPE.unpack_from(blob, need - _LLAT_SHAPE.size)
        if len(blob) < need + h * w + 8 * k:
            raise FormatError("truncated LLAT mask or scales")
        valid = np.frombuffer(blob, np.uint8, h * w, need).reshape(h, w) != 0
        scales = np.frombuffer(blob, "<f8", k, need + h * w)
        return cls(mean, basis, valid, scales)


def fit_linear_model(samples, k: int = DEFAULT_LATENT_DIM, whiten: bool = True) -> LinearLatentModel:
    """Mean plus the top-``k`` principal directions of a set of maps.

    Each direction's sign is fixed so its largest-magnitude entry is
    positive.  With ``whiten`` the code is measured in standard deviations
    along each direction; otherwise codes are raw basis coefficients.
    """
    samples = list(samples)
    if k < 1:
        raise ValueError("latent dimension must be >= 1")
    if len(samples) < k:
        raise TooFewSamples(f"need at least {k} samples, got {len(samples)}")
    valid = samples[0].valid
    for s in samples[1:]:
        if s.resolution != samples[0].resolution or not np.array_equal(s.valid, valid):
            raise DimensionMismatch("all samples must share resolution and valid mask")
    X = np.stack([s.vector() for s in samples])
    mean = X.mean(axis=0)
    Xc = X - mean
    # thin SVD through the (n x n) Gram matrix; n is far smaller than the vector length
    gram = Xc @ Xc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    sing = np.sqrt(evals)
    eps = np.finfo(np.float64).eps
    # relative cut for the spectrum, plus an absolute floor so round-off left
    # by centering identical samples does not count as a direction
    floor = max(X.shape) * eps * float(np.abs(X).max(initial=0.0)) * np.sqrt(len(X))
    tol = max(max(X.shape) * eps * (sing[0] if sing.size else 0.0) * 1e3, floor)
    rank = int(np.sum(sing > tol))
    if k > rank:
        raise RankDeficient(f"requested {k} directions but the centered data has rank {rank}")
    basis = (evecs[:, :k].T @ Xc) / sing[:k, None]
    # re-orthonormalize to wash out Gram-matrix round-off
    q, r = np.linalg.qr(basis.T)
    basis = (q * np.sign(np.diag(r))).T
    lead = np.argmax(np.abs(basis), axis=1)
    basis *= np.sign(basis[np.arange(k), lead])[:, None]
    total = evals.sum()
    ratio = evals[:k] / total if total > 0 else np.zeros(k)
    scales = sing[:k] / np.sqrt(max(len(samples) - 1, 1)) if whiten else np.ones(k)
    log.info("fitted %d-d linear model on %d samples (%.4f of variance)", k, len(samples), ratio.sum())
    return LinearLatentModel(mean, basis, valid, scales, ratio)


def object_descriptor(obj: Mesh, n_points: int = DESCRIPTOR_POINTS) -> np.ndarray:
    """Fixed-length object conditioning: centroid, bounding-box extents, farthest-point sample."""
    from .metrics import farthest_point_sample

    _, first = np.unique(obj.weld_map, return_index=True)
    pts = obj.vertices[np.sort(first)]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    picks = farthest_point_sample(pts, n_points)
    picks = np.concatenate([picks, np.full(n_points - len(picks), picks[-1])])
    return np.concatenate([pts.mean(axis=0), hi - lo, pts[picks].ravel()])


class LinearDecoder:
    """Latent decoder over a fixed template and camera.

    Produces UV maps, template-vertex positions, and the Jacobian of those
    positions with respect to the code.  The object descriptor is accepted
    for interface compatibility; the linear model carries no object term.
    """

    def __init__(self, model: LinearLatentModel, template: Mesh, camera: CameraIntrinsics):
        self.model = model
        self.template = template
        self.camera = camera
        stencil = sampling_stencil(model.valid, template.uv_template)
        # per-vertex (u, v, d) is affine in the code: uvd = base + slope @ z
        mean_texels = model.mean.reshape(-1, 3)
        basis_texels = (model.basis * model.scales[:, None]).reshape(model.latent_dim, -1, 3)
        flat_index = np.full(model.valid.size, -1, dtype=np.int64)
        flat_index[model.valid.ravel()] = np.arange(int(model.valid.sum()))
        rows = flat_index[stencil.index]  # (V, 4), valid-texel row of each tap
        w = np.where(rows >= 0, stencil.weight, 0.0)
        rows = np.maximum(rows, 0)
        self._base = np.einsum("vk,vkc->vc", w, mean_texels[rows])
        self._slope = np.einsum("vk,lvkc->vcl", w, basis_texels[:, rows])
        self._weld = template.weld_map

    @property
    def latent_dim(self) -> int:
        return self.model.latent_dim

    def _check_context(self, context) -> None:
        if context is not None and np.asarray(context).size != DESCRIPTOR_SIZE:
            raise DimensionMismatch(f"object descriptor must have {DESCRIPTOR_SIZE} entries")

    def encode(self, m: UVCoordinateMap, context=None) -> np.ndarray:
        self._check_context(context)
        return self.model.encode(m)

    def decode(self, z, context=None) -> UVCoordinateMap:
        self._check_context(context)
        return self.model.decode(z)

    def uvd(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.size != self.latent_dim:
            raise DimensionMismatch(f"code has {z.size} entries, model expects {self.latent_dim}")
        return self._base + self._slope @ z

    def _unproject(self, uvd: np.ndarray) -> np.ndarray:
        # no depth check here; callers validate depth where it matters
        c = self.camera
        d = uvd[:, 2]
        return np.stack([(uvd[:, 0] - c.cx) * d / c.fx, (uvd[:, 1] - c.cy) * d / c.fy, d], axis=1)

    def vertices(self, z) -> np.ndarray:
        """Template-vertex positions of the decoded hand (seam duplicates averaged)."""
        return weld_average(self._unproject(self.uvd(z)), self._weld)

    def vertex_jacobian(self, z) -> np.ndarray:
        """d vertices / d z, shape (V, 3, k)."""
        c = self.camera
        uvd = self.uvd(z)
        du, dv, dd = self._slope[:, 0], self._slope[:, 1], self._slope[:, 2]
        u, v, d = uvd[:, 0:1], uvd[:, 1:2], uvd[:, 2:3]
        jx = (du * d + (u - c.cx) * dd) / c.fx
        jy = (dv * d + (v - c.cy) * dd) / c.fy
        jac = np.stack([jx, jy, dd], axis=1)
        return weld_average(jac, self._weld)

    def mesh(self, z) -> Mesh:
        t = self.template
        return Mesh(self.vertices(z), t.faces, t.uv_template, t.watertight)
