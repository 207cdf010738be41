import math

import numpy as np
import pytest
import torch

from oracles import rotation_series
from sfmwarp.errors import ContractError, InvalidDepthError
from sfmwarp.geometry import (CameraModel, PoseParams, apply_object_motion, backproject, invert_transform,
                              is_rigid, pose_to_transform, project, project_grid, transform_to_pose)

UNIT = CameraModel(1.0, 1.0, 0.0, 0.0, 4, 4)


def test_zero_pose_is_identity():
    assert torch.equal(pose_to_transform(PoseParams()), torch.eye(4, dtype=torch.float64))


def test_quarter_turn_about_z():
    T = pose_to_transform(PoseParams((0.0, 0.0, math.pi / 2), (0.0, 0.0, 0.0)))
    np.testing.assert_allclose(T[:3, :3].numpy(), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)


def test_rotation_matches_series():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.normal(size=3) * 0.3
        tr = rng.normal(size=3)
        T = pose_to_transform(PoseParams(tuple(w), tuple(tr))).numpy()
        np.testing.assert_allclose(T[:3, :3], rotation_series(w), atol=1e-8)
        np.testing.assert_array_equal(T[:3, 3], tr)
        np.testing.assert_array_equal(T[3], [0, 0, 0, 1])


def test_tiny_rotation_branch_matches_series():
    for scale in (1e-3, 1e-5, 1e-9, 0.0):
        w = np.array([0.3, -0.5, 0.8]) * scale
        R = pose_to_transform(torch.tensor(list(w) + [0, 0, 0], dtype=torch.float64))[:3, :3].numpy()
        np.testing.assert_allclose(R, rotation_series(w), atol=1e-15)


def test_determinant_and_inverse_composition():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 1.0) / max(np.linalg.norm(w), 1e-12)
        T = pose_to_transform(PoseParams(tuple(w), tuple(rng.normal(size=3))))
        assert abs(float(torch.linalg.det(T[:3, :3])) - 1.0) <= 1e-10
        assert is_rigid(T)
        np.testing.assert_allclose((T @ invert_transform(T)).numpy(), np.eye(4), atol=1e-9)


def test_transform_to_pose_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = PoseParams(tuple(rng.uniform(-1, 1, 3)), tuple(rng.normal(size=3)))
        q = transform_to_pose(pose_to_transform(p))
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-10)


def test_pose_contracts():
    with pytest.raises(ContractError):
        PoseParams((math.pi, 0, 0), (0, 0, 0))
    with pytest.raises(ContractError):
        pose_to_transform(torch.tensor([float("nan"), 0, 0, 0, 0, 0]))
    with pytest.raises(ContractError):
        CameraModel(0.0, 1.0, 0, 0, 2, 2)


def test_backproject_examples():
    np.testing.assert_array_equal(backproject(UNIT, 0, 0, 2).numpy(), [0, 0, 2])
    cam = CameraModel(2.0, 2.0, 3.0, 4.0, 10, 10)
    np.testing.assert_array_equal(backproject(cam, 4, 3, 5).numpy(), [0, 0, 5])
    with pytest.raises(InvalidDepthError):
        backproject(cam, 1, 1, 0.0)


def test_backproject_round_trip():
    cam = CameraModel(123.4, 98.7, 31.2, 22.9, 48, 64)
    rng = np.random.default_rng(3)
    i, j, d = rng.uniform(0, 48, 500), rng.uniform(0, 64, 500), rng.uniform(0.1, 50, 500)
    x = backproject(cam, i, j, d)
    h = (cam.K @ x.T).T / torch.as_tensor(d)[:, None]
    np.testing.assert_allclose(h[:, 0].numpy(), j, atol=1e-12)
    np.testing.assert_allclose(h[:, 1].numpy(), i, atol=1e-12)
    np.testing.assert_array_equal(x[:, 2].numpy(), d)


def test_identity_projection_round_trip_many():
    cam = CameraModel(200.0, 180.0, 63.5, 47.5, 96, 128)
    rng = np.random.default_rng(4)
    n = 100_000
    i, j, d = rng.uniform(0, 96, n), rng.uniform(0, 128, n), rng.uniform(0.05, 100, n)
    pr = project(cam, torch.eye(4, dtype=torch.float64), backproject(cam, i, j, d))
    assert bool(pr.valid.all())
    np.testing.assert_allclose(pr.u.numpy(), j, atol=1e-10, rtol=0)
    np.testing.assert_allclose(pr.v.numpy(), i, atol=1e-10, rtol=0)
    np.testing.assert_allclose(pr.z.numpy(), d, atol=1e-10, rtol=0)


def test_object_motion_examples():
    x = torch.tensor([2.0, 3.0, 4.0], dtype=torch.float64)
    assert torch.equal(apply_object_motion(x, [0, 0, 0]), x)
    np.testing.assert_array_equal(apply_object_motion(x, [1, 0, 0]).numpy(), [4, 3, 4])
    np.testing.assert_array_equal(apply_object_motion([2, 2, 2], [-0.5] * 3).numpy(), [1, 1, 1])
    with pytest.raises(ContractError):
        apply_object_motion(x, [float("inf"), 0, 0])


def test_project_examples():
    T = pose_to_transform(PoseParams((0, 0, 0), (1, 0, 0)))
    pr = project(UNIT, T, [0.0, 0.0, 2.0])
    assert (float(pr.u), float(pr.v), float(pr.z)) == (0.5, 0.0, 2.0)
    T = pose_to_transform(PoseParams((0, 0, 0), (0, 0, -1)))
    pr = project(UNIT, T, [0.0, 0.0, 2.0])
    assert (float(pr.u), float(pr.v), float(pr.z)) == (0.0, 0.0, 1.0)


def test_project_behind_camera_flagged():
    T = pose_to_transform(PoseParams((0, 0, 0), (0, 0, -3)))
    pr = project(UNIT, T, [[0.0, 0.0, 2.0], [0.0, 0.0, 3.0]])
    assert pr.valid.tolist() == [False, False]
    assert torch.isnan(pr.u).all()


CAM = CameraModel(10.0, 12.0, 3.5, 2.5, 6, 8)


def test_project_grid_identity():
    inv = torch.rand(2, 1, 6, 8, dtype=torch.float64) + 0.2
    f = project_grid(CAM, torch.eye(4, dtype=torch.float64), inv)
    rows, cols = np.mgrid[0:6, 0:8]
    np.testing.assert_allclose(f.u[0, 0].numpy(), cols, atol=1e-12)
    np.testing.assert_allclose(f.v[1, 0].numpy(), rows, atol=1e-12)
    assert bool(f.valid.all())


def test_project_grid_motion_matches_scalar_ops():
    rng = np.random.default_rng(5)
    inv = torch.full((1, 1, 6, 8), 0.5, dtype=torch.float64)
    motion = torch.zeros(1, 3, 6, 8, dtype=torch.float64)
    motion[:, 2] = 1.0
    f = project_grid(CAM, torch.eye(4, dtype=torch.float64), inv, motion)
    np.testing.assert_allclose(f.z.numpy(), 4.0)
    # doubling z with x, y fixed moves every pixel halfway to the principal point
    rows, cols = np.mgrid[0:6, 0:8]
    np.testing.assert_allclose(f.u[0, 0].numpy(), CAM.cx + (cols - CAM.cx) / 2, atol=1e-12)
    np.testing.assert_allclose(f.v[0, 0].numpy(), CAM.cy + (rows - CAM.cy) / 2, atol=1e-12)
    # generic case against the scalar pipeline
    inv = torch.as_tensor(rng.uniform(0.2, 1.0, (1, 1, 6, 8)))
    motion = torch.as_tensor(rng.uniform(-0.3, 0.3, (1, 3, 6, 8)))
    T = pose_to_transform(PoseParams((0.05, -0.02, 0.03), (0.1, -0.05, 0.2)))
    f = project_grid(CAM, T, inv, motion)
    for i in range(6):
        for j in range(8):
            x = backproject(CAM, i, j, 1.0 / inv[0, 0, i, j])
            pr = project(CAM, T, apply_object_motion(x, motion[0, :, i, j]))
            assert float(f.u[0, 0, i, j]) == pytest.approx(float(pr.u), abs=1e-12)
            assert float(f.v[0, 0, i, j]) == pytest.approx(float(pr.v), abs=1e-12)


def test_project_grid_half_turn_reflects():
    cam = CameraModel(10.0, 10.0, 3.5, 2.5, 6, 8)
    T = pose_to_transform(PoseParams((0, 0, math.pi - 1e-12), (0, 0, 0)))
    f = project_grid(cam, T, torch.ones(1, 1, 6, 8, dtype=torch.float64))
    rows, cols = np.mgrid[0:6, 0:8]
    np.testing.assert_allclose(f.u[0, 0].numpy(), 2 * cam.cx - cols, atol=1e-9)
    np.testing.assert_allclose(f.v[0, 0].numpy(), 2 * cam.cy - rows, atol=1e-9)


def test_project_grid_zero_motion_equivalent():
    inv = torch.rand(1, 1, 6, 8, dtype=torch.float64) + 0.1
    T = pose_to_transform(PoseParams((0.1, 0.2, -0.1), (0.5, 0.0, -2.0)))
    a = project_grid(CAM, T, inv)
    b = project_grid(CAM, T, inv, torch.zeros(1, 3, 6, 8, dtype=torch.float64))
    assert torch.equal(a.valid, b.valid)
    assert not bool(a.valid.all())
    np.testing.assert_allclose(a.u.numpy(), b.u.numpy(), atol=1e-12)
    np.testing.assert_allclose(a.v.numpy(), b.v.numpy(), atol=1e-12)


def test_project_grid_contracts():
    inv = torch.ones(1, 1, 6, 8, dtype=torch.float64)
    with pytest.raises(ContractError):
        project_grid(CAM, torch.eye(4), inv, torch.zeros(1, 3, 5, 8, dtype=torch.float64))
    with pytest.raises(InvalidDepthError):
        project_grid(CAM, torch.eye(4), -inv)


def test_camera_serialization():
    cam = CameraModel.from_dict({"fx": "100.5", "fy": 99, "cx": 31.5, "cy": 23.5, "width": 64, "height": 48})
    assert CameraModel.from_dict(cam.to_dict()) == cam
    assert cam.flipped().cx == 63 - 31.5
    with pytest.raises(ContractError):
        CameraModel.from_dict({"fx": 1})
