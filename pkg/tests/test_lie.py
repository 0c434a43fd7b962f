import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvo import lie
from stvo.errors import AngleNearPi, BehindCamera
from stvo.lie import Camera, Pose


def random_pose(rng, max_angle=math.pi - 1e-3, scale=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, max_angle) / np.linalg.norm(w)
    return lie.exp(np.concatenate([rng.normal(size=3) * scale, w]))


def assert_pose_close(a, b, tol):
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=tol, rtol=0)


CAM = Camera(40.0, 42.0, 15.5, 11.5, 32, 24)


def test_exp_zero_is_identity():
    g = lie.exp(np.zeros(6))
    np.testing.assert_array_equal(g.q, [1, 0, 0, 0])
    np.testing.assert_array_equal(g.t, [0, 0, 0])


def test_exp_pure_translation():
    g = lie.exp([1, 2, 3, 0, 0, 0])
    np.testing.assert_allclose(g.q, [1, 0, 0, 0])
    np.testing.assert_allclose(g.t, [1, 2, 3])


def test_exp_quarter_turn_about_z():
    g = lie.exp([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(g.q, [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)], atol=1e-15)
    np.testing.assert_allclose(g.t, 0, atol=1e-15)


def test_exp_matches_matrix_exponential():
    from scipy.linalg import expm
    rng = np.random.default_rng(0)
    for _ in range(20):
        xi = rng.normal(size=6)
        A = np.zeros((4, 4))
        A[:3, :3] = lie.skew(xi[3:])
        A[:3, 3] = xi[:3]
        np.testing.assert_allclose(lie.exp(xi).matrix(), expm(A), atol=1e-12)


def test_log_identity_and_roundtrip():
    np.testing.assert_array_equal(lie.log(Pose.identity()), np.zeros(6))
    xi = np.full(6, 0.1)
    np.testing.assert_allclose(lie.log(lie.exp(xi)), xi, atol=1e-9)


def test_log_near_pi_rotation():
    a = math.pi - 1e-3
    g = Pose([math.cos(a / 2), 0, 0, math.sin(a / 2)], [0, 0, 0])
    np.testing.assert_allclose(lie.log(g)[3:], [0, 0, a], atol=1e-12)


def test_log_raises_at_pi():
    g = Pose([0.0, 0, 0, 1.0], [0, 0, 0])
    with pytest.raises(AngleNearPi):
        lie.log(g)


def test_small_angle_branches_are_continuous():
    for eps in [1e-12, 1e-9, 5e-9, 2e-8, 1e-7]:
        xi = np.array([0.3, -0.2, 0.1, eps, -eps, 0.5 * eps])
        np.testing.assert_allclose(lie.log(lie.exp(xi)), xi, atol=1e-15, rtol=1e-9)


def test_roundtrip_bulk():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(2000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, math.pi - 1e-3) / np.linalg.norm(w)
        xi = np.concatenate([rng.normal(size=3), w])
        worst = max(worst, np.abs(lie.log(lie.exp(xi)) - xi).max())
    assert worst < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_group_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    assert_pose_close((a * b) * c, a * (b * c), 1e-12)
    assert_pose_close(a * a.inverse(), Pose.identity(), 1e-12)
    assert_pose_close((a * b).inverse(), b.inverse() * a.inverse(), 1e-12)


def test_composition_convention_world_to_camera():
    # b applied first: (a*b).act(x) == a.act(b.act(x))
    rng = np.random.default_rng(2)
    a, b = random_pose(rng), random_pose(rng)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose((a * b).act(x), a.act(b.act(x)), atol=1e-12)


def test_quaternion_canonical():
    g = Pose([-1.0, 0, 0, 0])
    assert g.q[0] == 1.0
    rng = np.random.default_rng(3)
    for _ in range(20):
        assert random_pose(rng).q[0] >= 0
        assert abs(np.linalg.norm(random_pose(rng).q) - 1) < 1e-12


def test_project_examples():
    cam = Camera(1, 1, 0, 0, 10, 10)
    np.testing.assert_array_equal(lie.project(cam, [0, 0, 1]), [0, 0])
    cam = Camera(100, 100, 50, 50, 200, 200)
    assert lie.project(cam, [1, 0, 2])[0] == 100.0
    with pytest.raises(BehindCamera):
        lie.project(cam, [0, 0, 0])


def test_project_random_matches_formula():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.uniform([-1, -1, 0.5], [1, 1, 5])
        ref = [CAM.fx * p[0] / p[2] + CAM.cx, CAM.fy * p[1] / p[2] + CAM.cy]
        np.testing.assert_allclose(lie.project(CAM, p), ref, rtol=0, atol=1e-13)


def test_unproject_project_roundtrip():
    rng = np.random.default_rng(5)
    pix = rng.uniform(0, 30, size=(100, 2))
    d = rng.uniform(0.05, 5, size=100)
    pts = lie.unproject(CAM, pix, d)
    back = np.array([lie.project(CAM, p) for p in pts])
    np.testing.assert_allclose(back, pix, atol=1e-10)


def test_induced_flow_identity_motion():
    g = random_pose(np.random.default_rng(6))
    d = np.full((CAM.height, CAM.width), 0.4)
    flow, mask = lie.induced_flow(g, g, d, CAM)
    np.testing.assert_allclose(flow, 0, atol=1e-12)
    assert mask.all()


def test_induced_flow_forward_translation_closed_form():
    # camera moves tz toward a fronto-parallel plane at depth Z: pixel offset scales by Z/(Z - tz)
    Z, tz = 4.0, 0.5
    d = np.full((CAM.height, CAM.width), 1.0 / Z)
    g_j = Pose(t=[0, 0, -tz])
    flow, mask = lie.induced_flow(Pose.identity(), g_j, d, CAM)
    grid = lie.pixel_grid(CAM.height, CAM.width)
    c = np.array([CAM.cx, CAM.cy])[:, None, None]
    expected = (grid - c) * (Z / (Z - tz) - 1.0)
    np.testing.assert_allclose(flow[:, mask], expected[:, mask], atol=1e-12)
    assert not mask.all()  # corners leave the frame


def test_induced_flow_masks_behind_camera():
    d = np.full((CAM.height, CAM.width), 1.0)
    flow, mask = lie.induced_flow(Pose.identity(), Pose(t=[0, 0, -2.0]), d, CAM)
    assert not mask.any()
    assert np.isfinite(flow).all()


def test_jacobian_closed_form_at_optical_axis():
    cam = Camera(50.0, 50.0, 8.0, 6.0, 16, 12)
    d = np.full((12, 16), 0.25)
    g = Pose.identity()
    J_i, J_j, J_d = lie.reprojection_jacobians(g, g, d, cam, (8.0, 6.0))
    np.testing.assert_allclose(J_j[:, 0], [cam.fx * 0.25, 0], atol=1e-14)
    np.testing.assert_allclose(J_d, 0, atol=1e-14)


def _reprojected(g_i, g_j, d, pix, cam):
    uv, _ = lie.reproject_dense(g_j * g_i.inverse(), np.array([d]), np.array([pix]), cam)
    return uv[0]


@pytest.mark.parametrize("seed", range(5))
def test_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g_i = random_pose(rng, max_angle=0.3, scale=0.2)
    g_j = lie.exp(rng.normal(size=6) * 0.05) * g_i
    pix = rng.uniform([4, 4], [28, 20])
    d = rng.uniform(0.2, 0.6)
    J_i, J_j, J_d = lie.reprojection_jacobians_dense(g_i, g_j, np.array([d]), np.array([pix]), CAM)
    h = 1e-6
    num_i = np.zeros((2, 6))
    num_j = np.zeros((2, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        num_i[:, k] = (_reprojected(lie.exp(e) * g_i, g_j, d, pix, CAM)
                       - _reprojected(lie.exp(-e) * g_i, g_j, d, pix, CAM)) / (2 * h)
        num_j[:, k] = (_reprojected(g_i, lie.exp(e) * g_j, d, pix, CAM)
                       - _reprojected(g_i, lie.exp(-e) * g_j, d, pix, CAM)) / (2 * h)
    num_d = (_reprojected(g_i, g_j, d + h, pix, CAM) - _reprojected(g_i, g_j, d - h, pix, CAM)) / (2 * h)

    def rel(a, b):
        return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)

    assert rel(J_i[0], num_i) < 1e-4
    assert rel(J_j[0], num_j) < 1e-4
    assert rel(J_d[0], num_d) < 1e-4
