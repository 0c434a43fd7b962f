"""SE(3) poses, pinhole camera and reprojection.

Conventions used everywhere in the package:

* A :class:`Pose` maps world points into the camera frame (world-to-camera),
  ``x_cam = g.act(x_world)``. ``a * b`` applies ``b`` first.
* Tangent vectors are ordered ``(v, w)``: translation then rotation.
* Perturbations are applied on the left, ``exp(xi) * g``.
* Pixel coordinates are ``(x, y)`` = (column, row); flow channel 0 is x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, BehindCamera, ShapeMismatch

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
# V-matrix coefficients cancel catastrophically well above SMALL_ANGLE
SERIES_ANGLE = 1e-3
MIN_DEPTH = 1e-8


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Rotation matrix to canonical (w >= 0) unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return _canonical(q)


def _canonical(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


class Pose:
    """Rigid transform stored as unit quaternion (w, x, y, z) plus translation."""

    __slots__ = ("q", "t")

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)):
        self.q = _canonical(q)
        self.t = np.asarray(t, dtype=float).reshape(3).copy()

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __mul__(self, other: "Pose") -> "Pose":
        q = quat_multiply(self.q, other.q)
        return Pose(q, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        q_inv = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.t))

    def act(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def adjoint(self) -> np.ndarray:
        R = self.R
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[:3, 3:] = skew(self.t) @ R
        A[3:, 3:] = R
        return A

    def angle(self) -> float:
        v = np.linalg.norm(self.q[1:])
        return 2.0 * math.atan2(v, self.q[0])

    def copy(self) -> "Pose":
        return Pose(self.q, self.t)

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


def so3_exp_quat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < SMALL_ANGLE:
        return _canonical(np.concatenate([[1.0 - theta * theta / 8.0],
                                          0.5 * w * (1.0 - theta * theta / 24.0)]))
    half = 0.5 * theta
    return _canonical(np.concatenate([[math.cos(half)], math.sin(half) * w / theta]))


def _left_jacobian(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = skew(w)
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - math.cos(theta)) / t2
        b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * W + b * W @ W


def _left_jacobian_inv(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = skew(w)
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / t2
    return np.eye(3) - 0.5 * W + c * W @ W


def exp(xi) -> Pose:
    """Exponential map from a (v, w) tangent to a pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, w = xi[:3], xi[3:]
    return Pose(so3_exp_quat(w), _left_jacobian(w) @ v)


def so3_log(q) -> np.ndarray:
    q = _canonical(q)
    vn = float(np.linalg.norm(q[1:]))
    theta = 2.0 * math.atan2(vn, q[0])
    if theta >= math.pi - NEAR_PI:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if vn < 0.5 * SMALL_ANGLE:
        # theta/sin(theta/2) ~ 2/w * (1 + theta^2/24 ...) ; vn tiny so first order suffices
        return 2.0 * q[1:] / q[0] * (1.0 - vn * vn / (3.0 * q[0] * q[0]))
    return theta * q[1:] / vn


def log(g: Pose) -> np.ndarray:
    w = so3_log(g.q)
    return np.concatenate([_left_jacobian_inv(w) @ g.t, w])


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def scaled(self, factor: int) -> "Camera":
        """Intrinsics for an image downsampled by an integer factor."""
        return Camera(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor,
                      self.width // factor, self.height // factor)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


BOUNDS_TOL = 1e-9


def in_frame(u, v, width: int, height: int):
    """Inside [0, W-1] x [0, H-1], with slack for round-off on exact borders."""
    return ((u >= -BOUNDS_TOL) & (u <= width - 1 + BOUNDS_TOL)
            & (v >= -BOUNDS_TOL) & (v <= height - 1 + BOUNDS_TOL))


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(2, H, W) array of pixel coordinates, channel 0 = x."""
    ys, xs = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float),
                         indexing="ij")
    return np.stack([xs, ys])


def project(camera: Camera, point_cam) -> np.ndarray:
    p = np.asarray(point_cam, dtype=float)
    if p[2] <= MIN_DEPTH:
        raise BehindCamera(f"point depth {p[2]} <= {MIN_DEPTH}")
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


def unproject(camera: Camera, pixel, inv_depth) -> np.ndarray:
    """Back-project pixel(s) (..., 2) with inverse depth(s) into camera coordinates."""
    pixel = np.asarray(pixel, dtype=float)
    inv_depth = np.asarray(inv_depth, dtype=float)
    rays = np.stack([(pixel[..., 0] - camera.cx) / camera.fx,
                     (pixel[..., 1] - camera.cy) / camera.fy,
                     np.ones(pixel.shape[:-1])], axis=-1)
    return rays / inv_depth[..., None]


def _check_depth_shape(d, cam):
    if d.shape != (cam.height, cam.width):
        raise ShapeMismatch(f"inverse depth {d.shape} vs camera {(cam.height, cam.width)}")


def _homogeneous_points(g_ij: Pose, d: np.ndarray, pix: np.ndarray, cam: Camera):
    """Transform the homogeneous point (ray, d) by g_ij; returns the scaled 3D part."""
    rays = np.stack([(pix[..., 0] - cam.cx) / cam.fx,
                     (pix[..., 1] - cam.cy) / cam.fy,
                     np.ones(pix.shape[:-1])], axis=-1)
    return rays @ g_ij.R.T + d[..., None] * g_ij.t


def induced_flow(g_i: Pose, g_j: Pose, d_i, cam: Camera):
    """Flow from frame i to frame j implied by poses and frame-i inverse depths.

    Returns ``(flow, mask)`` with flow of shape (2, H, W). The mask is False where
    the reprojected point is behind camera j or lands outside the frame.
    """
    d_i = np.asarray(d_i, dtype=float)
    _check_depth_shape(d_i, cam)
    grid = pixel_grid(cam.height, cam.width)
    pix = np.moveaxis(grid, 0, -1)
    Y = _homogeneous_points(g_j * g_i.inverse(), d_i, pix, cam)
    # Y is the camera-j point scaled by d > 0, so the sign of Y_z is the sign of depth
    z = Y[..., 2]
    in_front = z > MIN_DEPTH * d_i
    zs = np.where(in_front, z, 1.0)
    u = cam.fx * Y[..., 0] / zs + cam.cx
    v = cam.fy * Y[..., 1] / zs + cam.cy
    mask = in_front & in_frame(u, v, cam.width, cam.height)
    flow = np.stack([u, v]) - grid
    flow[:, ~in_front] = 0.0
    return flow, mask


def reproject_dense(g_ij: Pose, d, pix, cam: Camera):
    """Reprojected pixel positions and camera-j depth sign for arbitrary pixel arrays."""
    Y = _homogeneous_points(g_ij, np.asarray(d, float), np.asarray(pix, float), cam)
    z = Y[..., 2]
    zs = np.where(np.abs(z) > 0, z, 1.0)
    uv = np.stack([cam.fx * Y[..., 0] / zs + cam.cx, cam.fy * Y[..., 1] / zs + cam.cy], axis=-1)
    return uv, z


def reprojection_jacobians_dense(g_i: Pose, g_j: Pose, d, pix, cam: Camera):
    """Vectorised analytic Jacobians of the reprojected position.

    ``d`` has shape (N,), ``pix`` (N, 2). Returns ``(J_i, J_j, J_d)`` with shapes
    (N, 2, 6), (N, 2, 6), (N, 2) for left perturbations of ``g_i``, ``g_j`` and the
    inverse depth.
    """
    g_ij = g_j * g_i.inverse()
    d = np.asarray(d, dtype=float)
    Y = _homogeneous_points(g_ij, d, np.asarray(pix, float), cam)
    X, Yy, Z = Y[..., 0], Y[..., 1], Y[..., 2]
    n = d.shape[0]
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = cam.fx / Z
    Jp[:, 0, 2] = -cam.fx * X / (Z * Z)
    Jp[:, 1, 1] = cam.fy / Z
    Jp[:, 1, 2] = -cam.fy * Yy / (Z * Z)
    dY = np.zeros((n, 3, 6))
    dY[:, 0, 0] = d
    dY[:, 1, 1] = d
    dY[:, 2, 2] = d
    dY[:, :, 3:] = -_skew_batch(Y)
    J_j = Jp @ dY
    J_i = -J_j @ g_ij.adjoint()
    J_d = Jp @ g_ij.t
    return J_i, J_j, J_d


def reprojection_jacobians(g_i: Pose, g_j: Pose, d_i, cam: Camera, pixel):
    """Jacobians at one pixel: (2x6 wrt g_i, 2x6 wrt g_j, 2x1 wrt inverse depth)."""
    d_i = np.asarray(d_i, dtype=float)
    x, y = pixel
    dv = np.array([d_i[int(round(y)), int(round(x))]]) if d_i.ndim == 2 else d_i.reshape(1)
    J_i, J_j, J_d = reprojection_jacobians_dense(g_i, g_j, dv, np.array([[x, y]], float), cam)
    return J_i[0], J_j[0], J_d[0].reshape(2, 1)
