"""Command-line front end: ``uvgrasp <subcommand> ...``.

Every subcommand writes a run manifest (JSON) next to its outputs and
prints a one-line JSON summary on success.  On failure the last line on
stderr is a JSON object with ``error`` and ``message`` keys and the exit
code is nonzero.

Camera files hold six numbers on one line: ``fx fy cx cy W H``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .contact import (
    CONTACT_THRESHOLD_MM,
    MASK_DILATION,
    ContactMask,
    contact_vertices,
    mask_iou,
    rasterize_contact_mask,
)
from .errors import UVGraspError
from .geometry import CameraIntrinsics
from .grasp import OptimizerConfig, refine_grasp
from .latent import (
    DEFAULT_LATENT_DIM,
    LinearDecoder,
    LinearLatentModel,
    fit_linear_model,
)
from .metrics import (
    SIV_RESOLUTION,
    JointRegressor,
    MetricReport,
    landmark_regressor,
    mpjpe,
    mpvpe,
    penetration_depth,
    solid_intersection_volume,
)
from .objio import load_obj, save_obj
from .render import (
    RENDER_MODES,
    TextureMap,
    extract_texture,
    read_png,
    render,
    write_png,
)
from .scenes import (
    DEFAULT_CAMERA,
    OBJECT_KINDS,
    SceneSpec,
    make_scene,
    sample_pose_family,
    write_bundle,
)
from .templates import TEMPLATE_KINDS, make_template
from .uvmap import UVCoordinateMap, rasterize_coordinate_map

log = logging.getLogger("uvgrasp")

DEFAULT_RES = 256


@dataclass
class RunManifest:
    subcommand: str
    inputs: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    version: str = __version__

    def write(self, path: Path) -> None:
        missing = [p for p in self.outputs.values() if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"declared outputs were not written: {missing}")
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "run_manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def _camera(path) -> CameraIntrinsics:
    return DEFAULT_CAMERA if path is None else CameraIntrinsics.load(path)


def _resolution(n: int) -> tuple[int, int]:
    return (n, n)


def cmd_gen(args) -> dict:
    if args.spec:
        with open(args.spec) as fh:
            spec = SceneSpec.from_dict(json.load(fh))
    else:
        size = tuple(args.size) if args.size else ((0.04,) if args.object == "sphere" else (0.03, 0.03, 0.03))
        spec = SceneSpec(
            seed=args.seed,
            hand_kind=args.kind,
            hand_subdivision=args.subdivision,
            object_kind=args.object,
            object_size=size,
            penetration_mm=args.pene_mm,
            resolution=args.res,
        )
    out = Path(args.out)
    bundle = make_scene(spec)
    write_bundle(bundle, out)
    outputs = {"manifest": str(out / "manifest.json")}
    if args.family:
        fam_dir = out / "family"
        fam_dir.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(sample_pose_family(spec, args.family)):
            m.save(fam_dir / f"{i:04d}.uvcm")
        outputs["family"] = str(fam_dir)
    return {"inputs": {"spec": args.spec}, "config": spec.to_dict(), "outputs": outputs, "out": out, "is_dir": True}


def cmd_encode(args) -> dict:
    hand = load_obj(args.hand)
    m = rasterize_coordinate_map(hand, _camera(args.camera), _resolution(args.res))
    m.save(args.out)
    return {
        "inputs": {"hand": args.hand, "camera": args.camera},
        "config": {"res": args.res},
        "outputs": {"uv_map": args.out},
        "summary": {"valid_texels": int(m.valid.sum())},
    }


def cmd_contact(args) -> dict:
    hand, obj = load_obj(args.hand), load_obj(args.object)
    contacts = contact_vertices(hand, obj, args.threshold_mm)
    mask = rasterize_contact_mask(contacts, hand, _resolution(args.res))
    mask.save(args.out)
    return {
        "inputs": {"hand": args.hand, "object": args.object},
        "config": {"threshold_mm": args.threshold_mm, "res": args.res},
        "outputs": {"contact_mask": args.out},
        "summary": {"contact_vertices": len(contacts), "contact_texels": mask.count()},
    }


def cmd_metrics(args) -> dict:
    pred, gt, obj = load_obj(args.pred), load_obj(args.gt), load_obj(args.object)
    reg = JointRegressor.load(args.regressor) if args.regressor else landmark_regressor(gt)
    res = _resolution(args.res)
    pred_mask = rasterize_contact_mask(contact_vertices(pred, obj), pred, res)
    gt_mask = rasterize_contact_mask(contact_vertices(gt, obj), gt, res)
    report = MetricReport(
        mpjpe_cm=mpjpe(pred, gt, reg),
        mpvpe_cm=mpvpe(pred, gt),
        pd_mm=penetration_depth(pred, obj),
        siv_cm3=solid_intersection_volume(pred, obj, args.siv_res),
        contact_iou=mask_iou(pred_mask, gt_mask),
    )
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    return {
        "inputs": {"pred": args.pred, "gt": args.gt, "object": args.object, "regressor": args.regressor},
        "config": {"siv_res": args.siv_res, "res": args.res},
        "outputs": {"report": args.out},
        "summary": report.to_dict(),
    }


def cmd_fit(args) -> dict:
    paths = sorted(Path(args.samples).glob("*.uvcm"))
    samples = [UVCoordinateMap.load(p) for p in paths]
    model = fit_linear_model(samples, args.k, whiten=not args.no_whiten)
    model.save(args.out)
    return {
        "inputs": {"samples": args.samples, "count": len(paths)},
        "config": {"k": args.k, "whiten": not args.no_whiten},
        "outputs": {"model": args.out},
    }


def cmd_optimize(args) -> dict:
    uv_map = UVCoordinateMap.load(args.uv)
    model = LinearLatentModel.load(args.model)
    obj = load_obj(args.object)
    template = load_obj(args.template) if args.template else make_template("hand", 1)
    decoder = LinearDecoder(model, template, _camera(args.camera))
    config = OptimizerConfig(
        lr=args.lr,
        tol=args.tol,
        max_iter=args.max_iter,
        restrict=not args.no_restrict,
        penetration_weight=args.weight,
        hand_only=args.hand_only,
        mask_dilation=args.mask_dilation,
    )
    mask = ContactMask.load(args.contact) if args.contact else None
    hand, refined, report = refine_grasp(uv_map, decoder, obj, config, mask, args.siv_res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "mesh": out / "refined.obj",
        "uv_map": out / "refined.uvcm",
        "trace": out / "trace.csv",
        "report": out / "report.json",
    }
    save_obj(hand, files["mesh"])
    refined.save(files["uv_map"])
    with open(files["trace"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "pd_mm"])
        for i, (f, pd) in enumerate(zip(report.trace, report.pd_trace_mm)):
            writer.writerow([i, repr(f), repr(pd)])
    summary = {k: v for k, v in report.to_dict().items() if k not in ("trace", "pd_trace_mm", "z_initial", "z_final")}
    with open(files["report"], "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "inputs": {"uv": args.uv, "model": args.model, "object": args.object, "template": args.template, "contact": args.contact},
        "config": config.to_dict(),
        "outputs": {k: str(v) for k, v in files.items()},
        "summary": summary,
        "out": out,
        "is_dir": True,
    }


def cmd_render(args) -> dict:
    hand = load_obj(args.hand)
    texture = TextureMap.load(args.texture)
    out = render(hand, texture, _camera(args.camera), args.mode)
    write_png(args.out, out.color)
    return {
        "inputs": {"hand": args.hand, "texture": args.texture, "camera": args.camera},
        "config": {"mode": args.mode},
        "outputs": {"image": args.out},
        "summary": {"silhouette_pixels": int(out.silhouette.sum())},
    }


def cmd_extract_texture(args) -> dict:
    tex = extract_texture(read_png(args.image), UVCoordinateMap.load(args.uv))
    tex.save(args.out)
    return {
        "inputs": {"image": args.image, "uv": args.uv},
        "config": {},
        "outputs": {"texture": args.out},
        "summary": {"present_texels": int(tex.present.sum())},
    }


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append defaults, except for required flags and help text that already states one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required or "default" in text:
            return text
        return super()._get_help_string(action)


CAMERA_HELP = "camera file with one line 'fx fy cx cy W H' (default: 400 400 127.5 127.5 256 256)"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uvgrasp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = _DefaultsFormatter

    p = sub.add_parser("gen", help="generate a synthetic scene bundle", formatter_class=fmt)
    p.add_argument("--spec", help="JSON scene spec; overrides the individual scene flags")
    p.add_argument("--seed", type=int, default=0, help="scene seed")
    p.add_argument("--kind", choices=TEMPLATE_KINDS, default="hand", help="hand template kind")
    p.add_argument("--subdivision", type=int, default=1, help="hand template subdivision level")
    p.add_argument("--object", choices=OBJECT_KINDS, default="sphere", help="object kind")
    p.add_argument("--size", type=float, nargs="+", help="sphere radius or box half extents in meters (default 0.04 / 0.03 0.03 0.03)")
    p.add_argument("--pene-mm", type=float, default=0.0, help="target penetration depth in mm")
    p.add_argument("--res", type=int, default=DEFAULT_RES, help="UV map resolution")
    p.add_argument("--family", type=int, default=0, help="also write this many pose-family UV maps under OUT/family")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("encode", help="rasterize a hand mesh into a UV coordinate map", formatter_class=fmt)
    p.add_argument("--hand", required=True, help="hand OBJ with texture coordinates")
    p.add_argument("--camera", help=CAMERA_HELP)
    p.add_argument("--res", type=int, default=DEFAULT_RES, help="UV map resolution")
    p.add_argument("--out", required=True, help="output .uvcm file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("contact", help="dense contact mask of a hand against an object", formatter_class=fmt)
    p.add_argument("--hand", required=True, help="hand OBJ with texture coordinates")
    p.add_argument("--object", required=True, help="object OBJ")
    p.add_argument("--threshold-mm", type=float, default=CONTACT_THRESHOLD_MM, help="contact distance in mm")
    p.add_argument("--res", type=int, default=DEFAULT_RES, help="mask resolution")
    p.add_argument("--out", required=True, help="output .cmsk file")
    p.set_defaults(func=cmd_contact)

    p = sub.add_parser("metrics", help="accuracy and interaction metrics of a predicted hand", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="predicted hand OBJ")
    p.add_argument("--gt", required=True, help="ground-truth hand OBJ")
    p.add_argument("--object", required=True, help="object OBJ")
    p.add_argument("--regressor", help="joint regressor text file (default: landmark regressor on the ground truth)")
    p.add_argument("--siv-res", type=int, default=SIV_RESOLUTION, help="voxels per axis for the intersection volume")
    p.add_argument("--res", type=int, default=DEFAULT_RES, help="contact mask resolution for the IoU")
    p.add_argument("--out", required=True, help="output report JSON")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("fit", help="fit a linear latent model to a directory of UV maps", formatter_class=fmt)
    p.add_argument("--samples", required=True, help="directory of .uvcm files")
    p.add_argument("--k", type=int, default=DEFAULT_LATENT_DIM, help="latent dimension")
    p.add_argument("--no-whiten", action="store_true", help="keep raw basis coefficients as the code")
    p.add_argument("--out", required=True, help="output .llat file")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("optimize", help="refine a grasp in latent space", formatter_class=fmt)
    p.add_argument("--uv", required=True, help="input .uvcm map")
    p.add_argument("--model", required=True, help=".llat latent model")
    p.add_argument("--object", required=True, help="object OBJ (watertight)")
    p.add_argument("--template", help="hand template OBJ (default: built-in hand, subdivision 1)")
    p.add_argument("--camera", help=CAMERA_HELP)
    p.add_argument("--contact", help="contact mask for candidate restriction (default: from the decoded start hand)")
    p.add_argument("--lr", type=float, default=1e-6, help="learning rate")
    p.add_argument("--tol", type=float, default=1e-6, help="stop when the objective changes by less than this")
    p.add_argument("--max-iter", type=int, default=10_000, help="iteration cap")
    p.add_argument("--weight", type=float, default=1.0, help="penetration weight")
    p.add_argument("--hand-only", action="store_true", help="drop the penetration term")
    p.add_argument("--no-restrict", action="store_true", help="scan every hand vertex for penetration")
    p.add_argument("--mask-dilation", type=int, default=MASK_DILATION, help="texels of contact-mask dilation before candidate lookup")
    p.add_argument("--siv-res", type=int, default=SIV_RESOLUTION, help="voxels per axis for the report's intersection volume")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render", help="render a textured hand", formatter_class=fmt)
    p.add_argument("--hand", required=True, help="hand OBJ with texture coordinates")
    p.add_argument("--texture", required=True, help="RGBA texture PNG (alpha marks present texels)")
    p.add_argument("--camera", help=CAMERA_HELP)
    p.add_argument("--mode", choices=RENDER_MODES, default="serial", help="rasterization strategy")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract-texture", help="pull a texture out of an image through a UV map", formatter_class=fmt)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--uv", required=True, help=".uvcm map aligned with the image")
    p.add_argument("--out", required=True, help="output RGBA texture PNG")
    p.set_defaults(func=cmd_extract_texture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        result = args.func(args)
        out = Path(result.get("out", args.out))
        manifest = RunManifest(
            subcommand=args.command,
            inputs=result["inputs"],
            config=result["config"],
            outputs=result["outputs"],
            wall_time_s=time.perf_counter() - start,
        )
        manifest.write(_manifest_path(out, result.get("is_dir", False)))
    except (UVGraspError, OSError, ValueError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "outputs": result["outputs"], **result.get("summary", {})}, default=float))
    return 0
