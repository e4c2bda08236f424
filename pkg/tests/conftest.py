"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

from uvgrasp.geometry import CameraIntrinsics, Mesh
from uvgrasp.templates import icosphere, make_template, tessellated_box

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    """Record a criterion outcome for the summary and assert it."""

    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


@pytest.fixture
def camera() -> CameraIntrinsics:
    return CameraIntrinsics(400.0, 400.0, 127.5, 127.5, 256, 256)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def unit_cube() -> Mesh:
    """Unit cube centered at the origin (8 corners, 12 outward faces)."""
    return tessellated_box((0.5, 0.5, 0.5), 0)


@pytest.fixture
def sphere_mesh() -> Mesh:
    return icosphere(0.05, 3)


@pytest.fixture
def hand_mesh() -> Mesh:
    return make_template("hand", 1)


def single_triangle(z: float = 1.0) -> Mesh:
    return Mesh(
        np.array([[-0.1, -0.1, z], [0.1, -0.1, z], [0.0, 0.1, z]]),
        np.array([[0, 1, 2]]),
        np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]),
    )


def shift(mesh: Mesh, offset) -> Mesh:
    return mesh.transformed(translation=offset)


@pytest.fixture(scope="session")
def hand_decoder():
    """Linear decoder over the default scene hand, fit on its pose family."""
    from uvgrasp.latent import LinearDecoder, fit_linear_model
    from uvgrasp.scenes import DEFAULT_CAMERA, SceneSpec, sample_pose_family

    model = fit_linear_model(sample_pose_family(SceneSpec(seed=1000), 48), 32)
    return LinearDecoder(model, make_template("hand", 1), DEFAULT_CAMERA)
