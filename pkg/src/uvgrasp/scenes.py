"""Seeded synthetic hand-object scenes and their ground-truth products.

A scene poses a template hand in the camera frame, bends it with a smooth
random displacement field, and slides a sphere or box object along an
approach axis until the deepest hand vertex sits exactly at the requested
penetration depth (measured with the object's analytic signed distance).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .contact import ContactMask, contact_vertices, rasterize_contact_mask
from .errors import InfeasiblePenetration, UnknownKind
from .geometry import CameraIntrinsics, Mesh, nearest_vertex_distances
from .objio import load_obj, save_obj
from .render import TextureMap, read_png, render, write_png
from .templates import TEMPLATE_KINDS, icosphere, make_template, tessellated_box
from .uvmap import UVCoordinateMap, interpolate_vertex_values, rasterize_coordinate_map

log = logging.getLogger(__name__)

OBJECT_KINDS = ("sphere", "box")
DEFAULT_CAMERA = CameraIntrinsics(400.0, 400.0, 127.5, 127.5, 256, 256)

# seed-sequence stream ids, so each product draws independent numbers
_STREAM_HAND, _STREAM_TEXTURE, _STREAM_FAMILY = 0, 1, 2
_MODE_SEED = 7
DEFORMATION_MODES = 8


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    hand_kind: str = "hand"
    hand_subdivision: int = 1
    object_kind: str = "sphere"
    # sphere: (radius,); box: (hx, hy, hz) half extents; meters
    object_size: tuple = (0.04,)
    object_subdivision: int = 4
    rotation: tuple = (0.0, 0.0, 0.0)  # hand orientation as a rotation vector (radians)
    translation: tuple = (0.0, 0.0, 0.5)  # hand origin in the camera frame (meters)
    approach: tuple = (0.0, 0.0, -1.0)  # hand-frame direction from the hand toward the object
    penetration_mm: float = 0.0
    clearance_mm: float = 1.0  # gap left when penetration_mm is 0
    deform_amplitude: float = 0.003  # meters
    resolution: int = 256

    def __post_init__(self):
        if self.penetration_mm < 0:
            raise ValueError("target penetration must be >= 0")
        if self.object_kind not in OBJECT_KINDS:
            raise UnknownKind(f"unknown object kind {self.object_kind!r}; expected one of {OBJECT_KINDS}")
        if self.hand_kind not in TEMPLATE_KINDS:
            raise UnknownKind(f"unknown hand kind {self.hand_kind!r}; expected one of {TEMPLATE_KINDS}")
        size = tuple(float(x) for x in np.atleast_1d(self.object_size))
        want = 1 if self.object_kind == "sphere" else 3
        if len(size) != want or min(size) <= 0:
            raise ValueError(f"{self.object_kind} needs {want} positive size value(s), got {size}")
        if self.clearance_mm <= 0 or self.deform_amplitude < 0 or self.resolution < 1:
            raise ValueError("clearance must be > 0, amplitude >= 0, resolution >= 1")
        object.__setattr__(self, "object_size", size)
        for name in ("rotation", "translation", "approach"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        return cls(**d)

    @property
    def map_resolution(self) -> tuple[int, int]:
        return (self.resolution, self.resolution)


@dataclass(eq=False)
class SceneBundle:
    spec: SceneSpec
    hand: Mesh
    obj: Mesh
    camera: CameraIntrinsics
    uv_map: UVCoordinateMap
    contacts: np.ndarray
    contact_mask: ContactMask
    texture: TextureMap
    image: np.ndarray
    silhouette: np.ndarray
    expectations: dict = field(default_factory=dict)


def make_object(spec: SceneSpec) -> Mesh:
    """Object mesh centered at the origin."""
    if spec.object_kind == "sphere":
        return icosphere(spec.object_size[0], spec.object_subdivision)
    return tessellated_box(spec.object_size, spec.object_subdivision)


def _hand_pose(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    return Rotation.from_rotvec(spec.rotation).as_matrix(), np.asarray(spec.translation)


def deformation_modes(n_modes: int = DEFORMATION_MODES) -> tuple[np.ndarray, np.ndarray]:
    """Wave vectors and phases of the shared low-frequency deformation basis.

    The modes come from a fixed seed, so every scene's hand deforms inside
    the same ``3 * n_modes + 3`` dimensional family (wavelengths 10-25 cm).
    """
    rng = np.random.default_rng(np.random.SeedSequence([_MODE_SEED]))
    direction = rng.normal(size=(n_modes, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    waves = direction * (2.0 * np.pi / rng.uniform(0.10, 0.25, size=n_modes))[:, None]
    return waves, rng.uniform(0.0, 2.0 * np.pi, size=n_modes)


def smooth_displacement(points: np.ndarray, rng: np.random.Generator, amplitude: float, n_modes: int = DEFORMATION_MODES) -> np.ndarray:
    """Random displacement field in the shared mode family, evaluated at ``points``.

    Each mode gets a Gaussian 3D amplitude and the field adds a random rigid
    shift.  Being a function of position, it moves seam duplicates
    identically.
    """
    waves, phases = deformation_modes(n_modes)
    amps = rng.normal(size=(n_modes, 3)) * amplitude / np.sqrt(n_modes)
    shift = rng.normal(size=3) * amplitude
    return np.sin(points @ waves.T + phases) @ amps + shift


def _rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def _posed_hand(spec: SceneSpec, template: Mesh, rng: np.random.Generator | None, amplitude: float) -> Mesh:
    pts = template.vertices
    if rng is not None and amplitude > 0:
        pts = pts + smooth_displacement(pts, rng, amplitude)
    rot, trans = _hand_pose(spec)
    return template.with_vertices(pts @ rot.T + trans)


def base_hand(spec: SceneSpec) -> Mesh:
    """The posed, undeformed template (the mean of the pose family)."""
    return _posed_hand(spec, make_template(spec.hand_kind, spec.hand_subdivision), None, 0.0)


def scene_hand(spec: SceneSpec) -> Mesh:
    template = make_template(spec.hand_kind, spec.hand_subdivision)
    return _posed_hand(spec, template, _rng(spec.seed, _STREAM_HAND), spec.deform_amplitude)


def sample_pose_family(spec: SceneSpec, n: int, amplitude: float | None = None) -> list[UVCoordinateMap]:
    """``n`` seeded smooth deformations of the posed template, each as a UV map."""
    amplitude = spec.deform_amplitude if amplitude is None else amplitude
    template = make_template(spec.hand_kind, spec.hand_subdivision)
    return [
        rasterize_coordinate_map(
            _posed_hand(spec, template, _rng(spec.seed, _STREAM_FAMILY, i), amplitude),
            DEFAULT_CAMERA,
            spec.map_resolution,
        )
        for i in range(n)
    ]


def _sphere_offsets(w: np.ndarray, a: np.ndarray, radius: float) -> np.ndarray:
    """Largest s with |w - s a| = radius for every row of w (nan when never reached)."""
    b = w @ a
    disc = b * b - np.einsum("ij,ij->i", w, w) + radius * radius
    with np.errstate(invalid="ignore"):
        return np.where(disc >= 0, b + np.sqrt(np.maximum(disc, 0.0)), np.nan)


def _box_offsets(w: np.ndarray, a: np.ndarray, half: np.ndarray, depth: float) -> np.ndarray:
    """Largest s where the box-depth min_k(h_k - |w_k - s a_k|) equals ``depth``."""
    lo = np.full(len(w), -np.inf)
    hi = np.full(len(w), np.inf)
    for k in range(3):
        reach = half[k] - depth
        if abs(a[k]) < 1e-15:
            bad = np.abs(w[:, k]) > reach
            lo[bad], hi[bad] = np.inf, -np.inf
            continue
        ends = np.sort(np.stack([(w[:, k] - reach) / a[k], (w[:, k] + reach) / a[k]], axis=1), axis=1)
        lo = np.maximum(lo, ends[:, 0])
        hi = np.minimum(hi, ends[:, 1])
    return np.where(lo <= hi, hi, np.nan)


def place_object(hand: Mesh, obj_kind: str, size, anchor, approach, depth: float) -> np.ndarray:
    """Object center putting the deepest hand vertex exactly ``depth`` meters inside.

    The center slides along ``anchor + s * approach``; each vertex reaches
    the target depth last at a closed-form offset, and the largest of those
    offsets is where the object stops.  Negative ``depth`` leaves a gap.
    """
    a = np.asarray(approach, dtype=np.float64)
    a = a / np.linalg.norm(a)
    w = hand.vertices - np.asarray(anchor, dtype=np.float64)
    if obj_kind == "sphere":
        s = _sphere_offsets(w, a, size[0] - depth)
    else:
        s = _box_offsets(w, a, np.asarray(size, dtype=np.float64), depth)
    if np.all(np.isnan(s)):
        raise InfeasiblePenetration("the approach line never brings the object to the target depth")
    return np.asarray(anchor) + np.nanmax(s) * a


def sampling_gap(obj: Mesh, kind: str, size) -> float:
    """Bound on how far a surface point can be from its nearest object vertex (meters).

    Largest face circumradius, plus for spheres the largest distance between
    a face plane and the true sphere.
    """
    tri = obj.vertices[obj.faces]
    a = np.linalg.norm(tri[:, 1] - tri[:, 2], axis=1)
    b = np.linalg.norm(tri[:, 2] - tri[:, 0], axis=1)
    c = np.linalg.norm(tri[:, 0] - tri[:, 1], axis=1)
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    circum = a * b * c / (2.0 * area2)
    gap = float(circum.max())
    if kind == "sphere":
        normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]) / area2[:, None]
        plane = np.abs(np.einsum("ij,ij->i", normal, tri[:, 0]))
        gap += float(size[0] - plane.min())
    return gap


def _vertex_colors(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    k = rng.normal(size=(3, 3)) * 40.0
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    return 0.5 + 0.35 * np.sin(points @ k.T + phase)


def make_texture(spec: SceneSpec, template: Mesh) -> TextureMap:
    """Smooth seeded color field over the template surface (continuous across seams)."""
    colors = _vertex_colors(template.vertices, _rng(spec.seed, _STREAM_TEXTURE))
    values, valid = interpolate_vertex_values(template, colors, spec.map_resolution)
    return TextureMap(values, valid)


def make_scene(spec: SceneSpec, camera: CameraIntrinsics = DEFAULT_CAMERA) -> SceneBundle:
    """Build a scene and all of its ground-truth products."""
    size = spec.object_size
    depth = spec.penetration_mm * 1e-3
    limit = size[0] if spec.object_kind == "sphere" else min(size)
    if depth >= limit:
        raise InfeasiblePenetration(f"target {spec.penetration_mm} mm exceeds the object half-extent {limit * 1e3} mm")
    template = make_template(spec.hand_kind, spec.hand_subdivision)
    hand = _posed_hand(spec, template, _rng(spec.seed, _STREAM_HAND), spec.deform_amplitude)
    rot, trans = _hand_pose(spec)
    approach = rot @ np.asarray(spec.approach)
    target = depth if depth > 0 else -spec.clearance_mm * 1e-3
    obj0 = make_object(spec)
    center = place_object(hand, spec.object_kind, size, trans, approach, target)
    obj = obj0.transformed(translation=center)
    gap = sampling_gap(obj0, spec.object_kind, size)

    uv_map = rasterize_coordinate_map(hand, camera, spec.map_resolution)
    contacts = contact_vertices(hand, obj)
    mask = rasterize_contact_mask(contacts, hand, spec.map_resolution)
    texture = make_texture(spec, template)
    out = render(hand, texture, camera)
    nearest, _ = nearest_vertex_distances(hand.vertices, obj)
    expectations = {
        "pd_mm": spec.penetration_mm,
        "gap_mm": gap * 1e3,
        "pd_bounds_mm": [spec.penetration_mm, spec.penetration_mm + gap * 1e3] if depth > 0 else [0.0, 0.0],
        "min_vertex_distance_mm": float(nearest.min() * 1e3),
        "object_center": [float(x) for x in center],
        "intersection_volume_cm3": None,
    }
    log.debug("scene seed=%d: object center %s, %d contact vertices", spec.seed, center, len(contacts))
    return SceneBundle(spec, hand, obj, camera, uv_map, contacts, mask, texture, out.color, out.silhouette, expectations)


BUNDLE_FILES = {
    "hand": "hand.obj",
    "object": "object.obj",
    "camera": "camera.txt",
    "uv_map": "uv_map.uvcm",
    "contact_mask": "contact.cmsk",
    "texture": "texture.png",
    "image": "image.png",
    "silhouette": "silhouette.png",
}


def write_bundle(bundle: SceneBundle, out_dir) -> dict:
    """Write every bundle product plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(bundle.hand, out / BUNDLE_FILES["hand"])
    save_obj(bundle.obj, out / BUNDLE_FILES["object"])
    bundle.camera.save(out / BUNDLE_FILES["camera"])
    bundle.uv_map.save(out / BUNDLE_FILES["uv_map"])
    bundle.contact_mask.save(out / BUNDLE_FILES["contact_mask"])
    bundle.texture.save(out / BUNDLE_FILES["texture"])
    write_png(out / BUNDLE_FILES["image"], bundle.image)
    write_png(out / BUNDLE_FILES["silhouette"], bundle.silhouette)
    manifest = {
        "spec": bundle.spec.to_dict(),
        "expectations": bundle.expectations,
        "contact_count": len(bundle.contacts),
        "files": dict(BUNDLE_FILES),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_bundle(path) -> SceneBundle:
    root = Path(path)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    files = manifest["files"]
    spec = SceneSpec.from_dict(manifest["spec"])
    hand = load_obj(root / files["hand"])
    obj = load_obj(root / files["object"])
    contact_mask = ContactMask.load(root / files["contact_mask"])
    return SceneBundle(
        spec=spec,
        hand=hand,
        obj=obj,
        camera=CameraIntrinsics.load(root / files["camera"]),
        uv_map=UVCoordinateMap.load(root / files["uv_map"]),
        contacts=contact_vertices(hand, obj),
        contact_mask=contact_mask,
        texture=TextureMap.load(root / files["texture"]),
        image=read_png(root / files["image"]),
        silhouette=read_png(root / files["silhouette"])[..., 0] > 0.5,
        expectations=manifest["expectations"],
    )
