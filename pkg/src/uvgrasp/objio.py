"""Wavefront OBJ reader/writer for triangle meshes with per-vertex UVs."""

from __future__ import annotations

import numpy as np

from .errors import MissingUV, ParseError
from .geometry import Mesh


def _parse_index(tok: str, count: int, lineno: int) -> int:
    try:
        i = int(tok)
    except ValueError:
        raise ParseError(f"bad index {tok!r}", lineno) from None
    if i == 0:
        raise ParseError("OBJ indices are 1-based; found 0", lineno)
    j = i - 1 if i > 0 else count + i
    if not 0 <= j < count:
        raise ParseError(f"index {i} out of range (have {count})", lineno)
    return j


def parse_obj(text: str) -> Mesh:
    positions: list[list[float]] = []
    uvs: list[list[float]] = []
    corners: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ParseError("vertex needs 3 coordinates", lineno)
            try:
                positions.append([float(x) for x in rest[:3]])
            except ValueError:
                raise ParseError("non-numeric vertex coordinate", lineno) from None
        elif tag == "vt":
            if len(rest) < 2:
                raise ParseError("texture coordinate needs 2 values", lineno)
            try:
                uvs.append([float(x) for x in rest[:2]])
            except ValueError:
                raise ParseError("non-numeric texture coordinate", lineno) from None
        elif tag == "f":
            if len(rest) != 3:
                raise ParseError(f"only triangles are supported, got {len(rest)} corners", lineno)
            for tok in rest:
                parts = tok.split("/")
                vi = _parse_index(parts[0], len(positions), lineno)
                if len(parts) < 2 or parts[1] == "":
                    raise MissingUV(f"line {lineno}: face corner {tok!r} has no texture index")
                ti = _parse_index(parts[1], len(uvs), lineno)
                corners.append((vi, ti))
        # vn, o, g, s, usemtl, mtllib and friends carry nothing we need

    # one output vertex per (position, uv) pair; keep file order when a
    # position only ever appears with one uv
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    uv_of = np.full(len(positions), -1, dtype=np.int64)
    remap: dict[tuple[int, int], int] = {}
    extra_pos, extra_uv = [], []
    face_idx = []
    for vi, ti in corners:
        if uv_of[vi] == -1:
            uv_of[vi] = ti
        if uv_of[vi] == ti:
            face_idx.append(vi)
            continue
        key = (vi, ti)
        if key not in remap:
            remap[key] = len(positions) + len(extra_pos)
            extra_pos.append(pos[vi])
            extra_uv.append(uvs[ti])
        face_idx.append(remap[key])
    uv_arr = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    base_uv = np.zeros((len(positions), 2))
    # vertices no face refers to keep the vt record with the same index
    # (the layout save_obj writes), or (0, 0) when there is none
    loose = np.flatnonzero(uv_of < 0)
    loose = loose[loose < len(uvs)]
    base_uv[loose] = uv_arr[loose]
    ref = uv_of >= 0
    base_uv[ref] = uv_arr[uv_of[ref]]
    vertices = np.concatenate([pos, np.asarray(extra_pos).reshape(-1, 3)])
    uv_all = np.concatenate([base_uv, np.asarray(extra_uv).reshape(-1, 2)])
    faces = np.asarray(face_idx, dtype=np.int64).reshape(-1, 3)
    mesh = Mesh(vertices, faces, uv_all)
    if mesh.n_faces and mesh.is_closed():
        mesh = Mesh(vertices, faces, uv_all, watertight=True)
    return mesh


def load_obj(path) -> Mesh:
    with open(path) as fh:
        return parse_obj(fh.read())


def format_obj(m: Mesh) -> str:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in m.vertices]
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in m.uv_template]
    lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in (m.faces + 1)]
    return "\n".join(lines) + "\n"


def save_obj(m: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_obj(m))
