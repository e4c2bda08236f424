"""Independent oracles and CLI drivers shared by several test modules."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from uvgrasp.cli import main
from uvgrasp.geometry import CameraIntrinsics, Mesh, project

RES = (256, 256)


def brute_force_texel(mesh: Mesh, cam: CameraIntrinsics, i: int, j: int, res=RES):
    """Barycentrics of texel (i, j)'s center in every UV triangle; the first face that holds it wins.

    Returns ``(face, uvd)``, or ``(-1, None)`` for an uncovered texel.
    """
    h, w = res
    px, py = float(j), float(i)
    corners = mesh.uv_template[mesh.faces] * [w, h] - 0.5  # (F, 3, 2) continuous texel coordinates
    (ax, ay), (bx, by), (cx, cy) = (corners[:, k].T for k in range(3))
    area = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = ((bx - px) * (cy - py) - (cx - px) * (by - py)) / area
        l1 = ((cx - px) * (ay - py) - (ax - px) * (cy - py)) / area
    l2 = 1.0 - l0 - l1
    hit = np.flatnonzero((area != 0) & (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12))
    if len(hit) == 0:
        return -1, None
    f = int(hit[0])
    uvd = project(mesh.vertices[mesh.faces[f]], cam)
    return f, l0[f] * uvd[0] + l1[f] * uvd[1] + l2[f] * uvd[2]


def ssim_oracle(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct windowed SSIM: loop over every full window position."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i : i + size, j : j + size], b[i : i + size, j : j + size]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def run_cli(argv, capsys):
    """Run the CLI in-process; returns ``(exit code, stdout, stderr)``."""
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def cli_pipeline(root: Path, capsys, seed: int = 0) -> dict:
    """gen, encode, contact, fit, optimize and metrics on one seed; returns the metrics summary."""
    b, w = root / "bundle", root / "work"
    w.mkdir(parents=True, exist_ok=True)
    steps = [
        ["gen", "--seed", seed, "--pene-mm", 2.5, "--family", 40, "--out", b],
        ["encode", "--hand", b / "hand.obj", "--camera", b / "camera.txt", "--out", w / "hand.uvcm"],
        ["contact", "--hand", b / "hand.obj", "--object", b / "object.obj", "--out", w / "contact.cmsk"],
        ["fit", "--samples", b / "family", "--k", 32, "--out", w / "model.llat"],
        ["optimize", "--uv", w / "hand.uvcm", "--model", w / "model.llat", "--object", b / "object.obj",
         "--camera", b / "camera.txt", "--lr", 0.5, "--weight", 1e4, "--max-iter", 300, "--siv-res", 40, "--out", w / "opt"],
        ["metrics", "--pred", w / "opt" / "refined.obj", "--gt", b / "hand.obj", "--object", b / "object.obj",
         "--siv-res", 40, "--out", w / "metrics.json"],
    ]
    summary = {}
    for argv in steps:
        code, out, err = run_cli(argv, capsys)
        assert code == 0, err
        summary = json.loads(out.strip().splitlines()[-1])
    return summary


def output_files(root: Path) -> dict[str, bytes]:
    """Every output file except run manifests, which carry a wall time."""
    run_manifest = ("run_manifest.json", ".manifest.json")
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and not p.name.endswith(run_manifest)
    }
