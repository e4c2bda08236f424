"""Contact vertices, dense UV contact masks, and mask comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyMesh, FormatError
from .geometry import Mesh, nearest_vertex_distances
from .uvmap import (
    DEFAULT_RESOLUTION,
    _check_resolution,
    read_grid,
    uv_coverage,
    write_grid,
)

CONTACT_THRESHOLD_MM = 4.0
# texels of dilation before candidate lookup; one texel misses penetrating
# vertices whose incident faces are several millimeters long
MASK_DILATION = 2


@dataclass(frozen=True, eq=False)
class ContactMask:
    """Binary contact grid aligned with a UV coordinate map."""

    bits: np.ndarray  # (H, W) bool

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise DimensionMismatch("contact mask must be a 2-D grid")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def save(self, path) -> None:
        write_grid(path, b"CMSK", self.bits.astype(np.uint8))

    @classmethod
    def load(cls, path) -> ContactMask:
        magic, payload, _ = read_grid(path)
        if magic != b"CMSK":
            raise FormatError(f"expected CMSK file, found magic {magic!r}")
        return cls(payload != 0)


def contact_vertices(hand: Mesh, obj: Mesh, threshold_mm: float = CONTACT_THRESHOLD_MM) -> np.ndarray:
    """Sorted indices of hand vertices within ``threshold_mm`` of some object vertex.

    The comparison is inclusive, so a vertex exactly at the threshold counts.
    """
    if obj.n_vertices == 0:
        raise EmptyMesh("object mesh has no vertices")
    if hand.n_vertices == 0:
        return np.zeros(0, dtype=np.int64)
    dist, _ = nearest_vertex_distances(hand.vertices, obj)
    return np.flatnonzero(dist <= threshold_mm * 1e-3)


def _vertex_flags(indices, n: int) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    flags[idx] = True
    return flags


def contact_faces(contacts, hand: Mesh) -> np.ndarray:
    """Boolean per face: all three corners are contact vertices."""
    flags = _vertex_flags(contacts, hand.n_vertices)
    return flags[hand.faces].all(axis=1)


def rasterize_contact_mask(contacts, hand: Mesh, resolution=DEFAULT_RESOLUTION) -> ContactMask:
    """Fill every texel owned by a face whose three corners are all in contact.

    Texel ownership follows the same coverage rule as the coordinate map, so
    the mask is always a subset of the map's valid region.
    """
    _check_resolution(resolution)
    cov = uv_coverage(hand, resolution)
    full = contact_faces(contacts, hand)
    bits = np.zeros(cov.face.shape, dtype=bool)
    owned = cov.valid
    bits[owned] = full[cov.face[owned]]
    return ContactMask(bits)


def mask_iou(a: ContactMask, b: ContactMask) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    if a.resolution != b.resolution:
        raise DimensionMismatch(f"mask sizes differ: {a.resolution} vs {b.resolution}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def vertex_texels(hand: Mesh, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of the texel containing each vertex's UV location."""
    h, w = resolution
    uv = hand.uv_template
    j = np.clip(np.floor(uv[:, 0] * w).astype(np.int64), 0, w - 1)
    i = np.clip(np.floor(uv[:, 1] * h).astype(np.int64), 0, h - 1)
    return i, j


def restrict_penetration_candidates(mask: ContactMask, hand: Mesh, dilation: int = MASK_DILATION) -> np.ndarray:
    """Hand vertices that touch the (dilated) contact mask in UV space.

    A vertex is a candidate when the texel under its UV location is set, or
    when any texel owned by one of its faces is set.  The second rule makes
    the result a superset of the corners of every fully-in-contact face that
    owns a texel, even for sliver faces whose covered texels lie several
    texels away from a sharp corner.  The dilation adds the rim vertices
    just outside a contact region.
    """
    bits = mask.bits
    if dilation > 0 and bits.any():
        bits = ndimage.binary_dilation(bits, structure=np.ones((3, 3), dtype=bool), iterations=dilation)
    i, j = vertex_texels(hand, mask.resolution)
    flags = bits[i, j].copy()
    cov = uv_coverage(hand, mask.resolution)
    hit_faces = np.unique(cov.face[bits & cov.valid])
    flags[hand.faces[hit_faces].ravel()] = True
    return np.flatnonzero(flags)
