import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from uvgrasp.errors import CountMismatch, InvalidMesh, NotWatertight
from uvgrasp.geometry import Mesh, mesh_volume
from uvgrasp.metrics import (
    JointRegressor,
    MetricReport,
    inside_vertices,
    intersection_grid,
    landmark_regressor,
    mpjpe,
    mpvpe,
    penetration_depth,
    procrustes_align,
    solid_intersection_volume,
)
from uvgrasp.templates import icosphere, tessellated_box


def point_mesh(points):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return Mesh(points, np.zeros((0, 3), dtype=int), np.zeros((len(points), 2)))


def test_mpvpe_identity_and_offset(hand_mesh):
    assert mpvpe(hand_mesh, hand_mesh) == 0.0
    assert mpvpe(hand_mesh.transformed(translation=[0.01, 0, 0]), hand_mesh) == pytest.approx(1.0, abs=1e-9)


def test_mpvpe_matches_direct_sum(hand_mesh, rng):
    eps = rng.normal(scale=0.002, size=hand_mesh.vertices.shape)
    # independent noise splits seam duplicates, so the result is not closed
    pred = Mesh(hand_mesh.vertices + eps, hand_mesh.faces, hand_mesh.uv_template)
    total = 0.0
    for e in eps:
        total += np.sqrt(e @ e)
    assert mpvpe(pred, hand_mesh) == pytest.approx(100.0 * total / len(eps), rel=1e-12)


def test_mpvpe_count_mismatch(hand_mesh, sphere_mesh):
    with pytest.raises(CountMismatch):
        mpvpe(hand_mesh, sphere_mesh)


def test_mpjpe_three_landmarks():
    gt = point_mesh(np.eye(3) * 0.1)
    pred = gt.with_vertices(gt.vertices + [[0.03, 0, 0], [0, 0, 0], [0, 0, 0]])
    reg = JointRegressor(np.eye(3))
    assert mpjpe(pred, gt, reg) == pytest.approx(1.0, abs=1e-12)


def test_mpjpe_translation(hand_mesh):
    reg = landmark_regressor(hand_mesh)
    t = np.array([0.01, -0.02, 0.005])
    assert mpjpe(hand_mesh.transformed(translation=t), hand_mesh, reg) == pytest.approx(100 * np.linalg.norm(t), abs=1e-9)
    assert mpjpe(hand_mesh, hand_mesh, reg) == 0.0


def test_regressor_validation(tmp_path):
    with pytest.raises(InvalidMesh):
        JointRegressor(np.array([[0.5, 0.6]]))
    with pytest.raises(InvalidMesh):
        JointRegressor(np.array([[1.5, -0.5]]))
    reg = JointRegressor(np.array([[0.25, 0.75], [1.0, 0.0]]))
    reg.save(tmp_path / "r.txt")
    assert np.array_equal(JointRegressor.load(tmp_path / "r.txt").weights, reg.weights)
    with pytest.raises(CountMismatch):
        reg.joints(point_mesh(np.zeros((3, 3))))


def test_landmark_regressor_rows(hand_mesh):
    reg = landmark_regressor(hand_mesh, 21)
    assert reg.n_joints == 21
    assert np.allclose(reg.weights.sum(axis=1), 1.0)


def test_procrustes_alignment_removes_similarity(hand_mesh):
    rot = Rotation.from_rotvec([0.2, 0.4, -0.3]).as_matrix()
    moved = 1.3 * hand_mesh.vertices @ rot.T + [0.1, 0.0, 0.2]
    assert np.allclose(procrustes_align(moved, hand_mesh.vertices), hand_mesh.vertices, atol=1e-12)
    assert mpvpe(hand_mesh.with_vertices(moved), hand_mesh, align=True) == pytest.approx(0.0, abs=1e-9)


def test_pd_zero_without_penetration(hand_mesh):
    far = icosphere(0.03, 2).transformed(translation=[1.0, 0, 0])
    assert penetration_depth(hand_mesh, far) == 0.0
    assert len(inside_vertices(hand_mesh, far)) == 0


def test_pd_single_vertex():
    sphere = icosphere(0.05, 5)
    edge = np.linalg.norm(sphere.vertices[sphere.faces[:, 0]] - sphere.vertices[sphere.faces[:, 1]], axis=1).max()
    direction = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    pd = penetration_depth(point_mesh(direction * (0.05 - 0.005)), sphere)
    assert 5.0 <= pd <= 5.0 + edge * 1e3


def test_pd_is_max_over_inside_vertices():
    sphere = icosphere(0.05, 5)
    d = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    hand = point_mesh([d[0] * 0.048, d[1] * 0.043, [0.2, 0, 0]])
    dist = np.linalg.norm(hand.vertices[:2, None] - sphere.vertices[None], axis=2).min(axis=1)
    assert penetration_depth(hand, sphere) == pytest.approx(dist.max() * 1e3, rel=1e-12)
    assert penetration_depth(hand, sphere) == pytest.approx(7.0, abs=0.3)


def test_pd_requires_watertight_object(hand_mesh):
    with pytest.raises(NotWatertight):
        penetration_depth(hand_mesh, point_mesh([[0, 0, 0]]))


def test_siv_disjoint(hand_mesh):
    assert solid_intersection_volume(hand_mesh, icosphere(0.03, 2).transformed(translation=[1.0, 0, 0])) == 0.0


def test_siv_sphere_in_box():
    ball = icosphere(0.01, 4).transformed(translation=[0.0011, -0.0007, 0.0003])
    box = tessellated_box((0.02, 0.02, 0.02), 2)
    siv = solid_intersection_volume(ball, box, 80)
    assert siv == pytest.approx(4.0 / 3.0 * np.pi, rel=0.05)


def test_siv_identical_meshes():
    ball = icosphere(0.02, 4)
    assert solid_intersection_volume(ball, ball, 80) == pytest.approx(mesh_volume(ball) * 1e6, rel=0.05)


def test_siv_rigid_invariance():
    ball = icosphere(0.01, 3).transformed(translation=[0.004, 0.0, 0.0])
    box = tessellated_box((0.02, 0.015, 0.01), 2)
    base = intersection_grid(ball, box, 80)
    rot = Rotation.from_rotvec([0.4, -0.2, 0.7]).as_matrix()
    t = np.array([0.1, 0.2, 0.5])
    moved = intersection_grid(ball.transformed(rot, t), box.transformed(rot, t), 80)
    # two voxel layers over the ball's surface bound the discretization change
    edge = max(np.cbrt(base.voxel_volume), np.cbrt(moved.voxel_volume))
    tol = 2 * edge * 4 * np.pi * 0.01**2
    assert abs(moved.volume() - base.volume()) <= tol
    shifted = intersection_grid(ball.transformed(translation=t), box.transformed(translation=t), 80)
    assert abs(shifted.volume() - base.volume()) <= 2 * edge * 4 * np.pi * 0.01**2


def test_siv_vertex_mode_is_subset():
    ball = icosphere(0.01, 3)
    box = tessellated_box((0.02, 0.02, 0.02), 2)
    center = intersection_grid(ball, box, 40, "center")
    vertex = intersection_grid(ball, box, 40, "vertex")
    assert 0 < vertex.occupancy.sum() < center.occupancy.sum() + vertex.occupancy.sum()
    with pytest.raises(ValueError):
        intersection_grid(ball, box, 40, "corner")


def test_metric_report_formats():
    r = MetricReport(mpjpe_cm=1.5, mpvpe_cm=2.0, pd_mm=0.0, siv_cm3=0.25, contact_iou=None)
    assert json.loads(r.to_json())["siv_cm3"] == 0.25
    lines = r.to_text().splitlines()
    assert "pd_mm=0.0" in lines and "contact_iou=nan" in lines
