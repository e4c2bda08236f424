"""Evaluable loss terms for UV-map hand reconstruction and grasp refinement.

L1-style terms are means rather than sums, so their values do not depend on
map or image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .contact import ContactMask
from .errors import CountMismatch, DimensionMismatch, InvalidMesh, TooSmall
from .geometry import (
    Mesh,
    _require_watertight,
    nearest_vertex_distances,
    points_in_mesh,
)
from .uvmap import UVCoordinateMap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objectives (contact, texture, SSIM, KL)."""

    contact: float = 10.0
    texture: float = 10.0
    ssim: float = 10.0
    kl: float = 0.001

    def __post_init__(self):
        for name in ("contact", "texture", "ssim", "kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    """Diagonal Gaussian over the latent code."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        sd = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mu.shape != sd.shape:
            raise DimensionMismatch("mean and std must have the same length")
        if np.any(sd <= 0):
            raise ValueError("std must be strictly positive")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "std", sd)


def _check_maps(pred: UVCoordinateMap, gt: UVCoordinateMap) -> None:
    if pred.resolution != gt.resolution:
        raise DimensionMismatch(f"map sizes differ: {pred.resolution} vs {gt.resolution}")


def loss_p(pred: UVCoordinateMap, gt: UVCoordinateMap, mask=None) -> float:
    """Mean absolute (u, v, d) difference over the hand-region mask (default: gt's valid texels)."""
    _check_maps(pred, gt)
    m = gt.valid if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        return 0.0
    return float(np.abs(pred.values[m] - gt.values[m]).mean())


def _forward_differences(values: np.ndarray, mask: np.ndarray):
    dx = values[:-1, 1:] - values[:-1, :-1]
    dy = values[1:, :-1] - values[:-1, :-1]
    ok = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1]
    return dx, dy, ok


def loss_grad(pred: UVCoordinateMap, gt: UVCoordinateMap, mask=None) -> float:
    """Mean absolute difference of forward-difference gradients over the mask.

    A texel contributes when it and both forward neighbours are in the mask.
    """
    _check_maps(pred, gt)
    m = gt.valid if mask is None else np.asarray(mask, dtype=bool)
    pdx, pdy, ok = _forward_differences(pred.values, m)
    gdx, gdy, _ = _forward_differences(gt.values, m)
    if not ok.any():
        return 0.0
    diff = np.concatenate([np.abs(pdx - gdx)[ok], np.abs(pdy - gdy)[ok]], axis=1)
    return float(diff.mean())


def _as_grid(x) -> np.ndarray:
    return np.asarray(x.bits if isinstance(x, ContactMask) else x, dtype=np.float64)


def loss_contact(pred, gt) -> float:
    """Mean absolute difference between two (soft or binary) contact grids."""
    a, b = _as_grid(pred), _as_grid(gt)
    if a.shape != b.shape:
        raise DimensionMismatch(f"contact grid sizes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean()) if a.size else 0.0


def loss_vertices(pred: Mesh, gt: Mesh) -> float:
    """Mean absolute per-coordinate vertex difference (meters)."""
    if pred.n_vertices != gt.n_vertices:
        raise CountMismatch(f"vertex counts differ: {pred.n_vertices} vs {gt.n_vertices}")
    if pred.n_vertices == 0:
        return 0.0
    return float(np.abs(pred.vertices - gt.vertices).mean())


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable window average, keeping only windows fully inside the image."""
    half = len(taps) // 2
    out = ndimage.correlate1d(img, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM for every full window position of two single-channel images."""
    taps = gaussian_window()
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a**2
    var_b = _filter_valid(b * b, taps) - mu_b**2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean structural similarity of two images (H, W) or (H, W, C) with values in [0, 1].

    Color images are compared per channel and the channel means averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image sizes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise DimensionMismatch("images must be (H, W) or (H, W, C)")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise TooSmall(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., k], b[..., k]).mean() for k in range(a.shape[2])]))


def loss_pixel(rendered, target) -> float:
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise DimensionMismatch(f"image sizes differ: {r.shape} vs {t.shape}")
    return float(np.abs(r - t).mean())


def loss_texture(rendered, masked_target, ssim_weight: float = 10.0) -> float:
    """Photometric loss: mean L1 pixel term plus ``ssim_weight * (1 - SSIM)``."""
    pixel = loss_pixel(rendered, masked_target)
    if ssim_weight == 0:
        return pixel
    return pixel + ssim_weight * (1.0 - ssim(masked_target, rendered))


def _candidate_flags(candidates, n: int) -> np.ndarray:
    if candidates is None:
        return np.ones(n, dtype=bool)
    flags = np.zeros(n, dtype=bool)
    idx = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidMesh("candidate vertex index out of range")
    flags[idx] = True
    return flags


def penetrating_vertices(hand: Mesh, obj: Mesh, candidates=None) -> np.ndarray:
    """Candidate hand vertices that lie strictly inside the object."""
    _require_watertight(obj)
    idx = np.flatnonzero(_candidate_flags(candidates, hand.n_vertices))
    if len(idx) == 0:
        return idx
    return idx[points_in_mesh(hand.vertices[idx], obj)]


def loss_penetration(hand: Mesh, obj: Mesh, candidates=None) -> float:
    """Mean nearest-object-vertex distance (meters) over penetrating candidate vertices.

    ``candidates=None`` scans every hand vertex.  Returns 0 when nothing
    penetrates.
    """
    inside = penetrating_vertices(hand, obj, candidates)
    if len(inside) == 0:
        return 0.0
    dist, _ = nearest_vertex_distances(hand.vertices[inside], obj)
    return float(dist.mean())


def kl_standard_normal(q: GaussianPosterior) -> float:
    """KL divergence from a diagonal Gaussian to the standard normal."""
    var = q.std**2
    return float(0.5 * np.sum(q.mean**2 + var - np.log(var) - 1.0))


def inference_prior_penalty(z) -> float:
    """Negative log-density of the standard normal prior at ``z`` (up to a constant)."""
    z = np.asarray(z, dtype=np.float64)
    return float(0.5 * z @ z)


def rgb2uv_loss(
    pred_map: UVCoordinateMap,
    gt_map: UVCoordinateMap,
    pred_contact,
    gt_contact,
    pred_hand: Mesh,
    gt_hand: Mesh,
    rendered,
    masked_target,
    weights: LossWeights = LossWeights(),
) -> dict:
    """Terms and weighted total of the image-to-UV training objective."""
    terms = {
        "p": loss_p(pred_map, gt_map),
        "grad": loss_grad(pred_map, gt_map),
        "contact": loss_contact(pred_contact, gt_contact),
        "vertices": loss_vertices(pred_hand, gt_hand),
        "texture": loss_texture(rendered, masked_target, weights.ssim),
    }
    terms["total"] = (
        terms["p"] + terms["grad"] + weights.contact * terms["contact"] + terms["vertices"] + weights.texture * terms["texture"]
    )
    return terms


def grasp_loss(
    pred_map: UVCoordinateMap,
    gt_map: UVCoordinateMap,
    pred_hand: Mesh,
    gt_hand: Mesh,
    posterior: GaussianPosterior,
    obj: Mesh | None = None,
    candidates=None,
    weights: LossWeights = LossWeights(),
) -> dict:
    """Terms and weighted total of the grasp refinement training objective.

    Passing ``obj=None`` drops the penetration term (hand-only variant).
    """
    terms = {
        "p": loss_p(pred_map, gt_map),
        "grad": loss_grad(pred_map, gt_map),
        "vertices": loss_vertices(pred_hand, gt_hand),
        "kl": kl_standard_normal(posterior),
        "pene": 0.0 if obj is None else loss_penetration(pred_hand, obj, candidates),
    }
    terms["total"] = terms["p"] + terms["grad"] + terms["vertices"] + weights.kl * terms["kl"] + terms["pene"]
    return terms
