"""Command-line front end: help text, error reporting and the full pipeline."""

from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
from helpers import cli_pipeline, output_files, run_cli

from uvgrasp.cli import build_parser
from uvgrasp.geometry import CameraIntrinsics
from uvgrasp.render import TextureMap, read_png, render, visible_texels
from uvgrasp.scenes import load_bundle
from uvgrasp.uvmap import UVCoordinateMap


def subcommands() -> dict:
    parser = build_parser()
    return next(a for a in parser._actions if a.dest == "command").choices


class TestHelp:
    def test_every_flag_shows_its_default(self):
        for name, p in subcommands().items():
            text = p.format_help()
            optional = [a for a in p._actions if a.dest != "help" and not a.required and a.option_strings]
            for action in optional:
                assert action.option_strings[-1] in text, (name, action.dest)
            assert "default" in text or not optional

    def test_optimize_defaults(self):
        text = subcommands()["optimize"].format_help()
        assert "1e-06" in text and "10000" in text and "80" in text

    def test_contact_threshold_default(self):
        args = build_parser().parse_args(["contact", "--hand", "h", "--object", "o", "--out", "x"])
        assert args.threshold_mm == 4.0

    def test_module_entry_point(self):
        done = subprocess.run([sys.executable, "-m", "uvgrasp", "--help"], capture_output=True, text=True)
        assert done.returncode == 0
        for name in ("gen", "encode", "contact", "metrics", "fit", "optimize", "render", "extract-texture"):
            assert name in done.stdout


class TestErrors:
    def test_missing_input_gives_json_error(self, tmp_path, capsys):
        code, _, err = run_cli(["encode", "--hand", tmp_path / "nope.obj", "--out", tmp_path / "x.uvcm"], capsys)
        assert code == 1
        payload = json.loads(err.strip().splitlines()[-1])
        assert set(payload) == {"error", "message"}
        assert not (tmp_path / "x.uvcm").exists()

    def test_bad_obj_gives_json_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.obj"
        bad.write_text("v 0 0 1\nf 1 2 3\n")
        code, _, err = run_cli(["encode", "--hand", bad, "--out", tmp_path / "x.uvcm"], capsys)
        assert code == 1
        assert json.loads(err.strip().splitlines()[-1])["error"]

    def test_infeasible_scene(self, tmp_path, capsys):
        code, _, err = run_cli(["gen", "--pene-mm", 50, "--out", tmp_path / "b"], capsys)
        assert code == 1
        assert "InfeasiblePenetration" in json.loads(err.strip().splitlines()[-1])["error"]


class TestCommands:
    def test_gen_then_metrics_without_penetration(self, tmp_path, capsys):
        b = tmp_path / "b"
        assert run_cli(["gen", "--seed", 3, "--out", b], capsys)[0] == 0
        code, _, _ = run_cli(["metrics", "--pred", b / "hand.obj", "--gt", b / "hand.obj", "--object", b / "object.obj",
                            "--siv-res", 20, "--out", tmp_path / "m.json"], capsys)
        assert code == 0
        report = json.loads((tmp_path / "m.json").read_text())
        assert report["pd_mm"] == 0.0 and report["mpvpe_cm"] == 0.0
        assert (tmp_path / "m.json.manifest.json").is_file()
        assert (b / "run_manifest.json").is_file()

    def test_encode_render_extract_round_trip(self, tmp_path, capsys):
        b = tmp_path / "b"
        assert run_cli(["gen", "--seed", 1, "--out", b], capsys)[0] == 0
        assert run_cli(["encode", "--hand", b / "hand.obj", "--camera", b / "camera.txt", "--out", tmp_path / "u.uvcm"], capsys)[0] == 0
        assert run_cli(["render", "--hand", b / "hand.obj", "--texture", b / "texture.png", "--camera", b / "camera.txt",
                    "--out", tmp_path / "r.png"], capsys)[0] == 0
        assert run_cli(["extract-texture", "--image", tmp_path / "r.png", "--uv", tmp_path / "u.uvcm", "--out", tmp_path / "t.png"], capsys)[0] == 0
        bundle = load_bundle(b)
        cam = CameraIntrinsics.load(b / "camera.txt")
        image = read_png(tmp_path / "r.png")
        sil = bundle.silhouette
        assert np.abs(image[sil] - bundle.image[sil]).max() <= 1.5 / 255
        uv = UVCoordinateMap.load(tmp_path / "u.uvcm")
        vis = visible_texels(uv, render(bundle.hand, bundle.texture, cam), cam)
        err = np.abs(TextureMap.load(tmp_path / "t.png").values - bundle.texture.values).max(axis=2)[vis]
        assert (err <= 0.02).mean() > 0.95


class TestPipeline:
    def test_end_to_end_is_deterministic(self, tmp_path, capsys):
        first = cli_pipeline(tmp_path / "a", capsys)
        second = cli_pipeline(tmp_path / "b", capsys)
        for key in ("mpjpe_cm", "mpvpe_cm", "pd_mm", "siv_cm3", "contact_iou"):
            assert key in first and first[key] is not None
        assert first == {**second, "outputs": first["outputs"]}
        report = json.loads((tmp_path / "a" / "work" / "opt" / "report.json").read_text())
        assert report["pd_mm_final"] <= report["pd_mm_initial"]
        a, b = output_files(tmp_path / "a"), output_files(tmp_path / "b")
        assert a.keys() == b.keys()
        assert all(a[k] == b[k] for k in a)
        rows = (tmp_path / "a" / "work" / "opt" / "trace.csv").read_text().splitlines()
        assert rows[0] == "iteration,objective,pd_mm" and len(rows) == report["iterations"] + 2
