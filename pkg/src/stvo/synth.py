"""Synthetic textured-plane scenes with exact depth and optical flow.

Ground truth is computed by ray casting against the plane set in world
coordinates and projecting the hit points with 4x4 matrices. It deliberately
does not use the quaternion machinery in :mod:`stvo.lie`, so the two paths
check each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lie import MIN_DEPTH, Camera, Pose, in_frame

FEATURE_STRIDE = 8


@dataclass
class Plane:
    normal: np.ndarray      # unit normal, world frame; plane is normal . X = offset
    offset: float
    tint: np.ndarray        # RGB multiplier
    texture_seed: int
    # finite patches: centre plus two in-plane half-axes
    center: np.ndarray | None = None
    axis_u: np.ndarray | None = None
    axis_v: np.ndarray | None = None

    def to_json(self):
        d = {"normal": self.normal.tolist(), "offset": self.offset, "tint": self.tint.tolist(),
             "texture_seed": self.texture_seed}
        if self.center is not None:
            d.update(center=self.center.tolist(), axis_u=self.axis_u.tolist(), axis_v=self.axis_v.tolist())
        return d

    @classmethod
    def from_json(cls, d):
        arr = lambda k: None if k not in d else np.asarray(d[k], dtype=float)
        return cls(arr("normal"), float(d["offset"]), arr("tint"), int(d["texture_seed"]),
                   arr("center"), arr("axis_u"), arr("axis_v"))


@dataclass
class Scene:
    camera: Camera                  # full-resolution intrinsics
    planes: list
    poses: list                     # 4x4 world-to-camera matrices
    timestamps: list
    seed: int = 0
    kind: str = "zigzag"
    meta: dict = field(default_factory=dict)

    @property
    def feature_camera(self) -> Camera:
        return self.camera.scaled(FEATURE_STRIDE)

    def pose(self, k) -> Pose:
        return Pose.from_matrix(self.poses[k])

    def to_json(self):
        c = self.camera
        return {"camera": [c.fx, c.fy, c.cx, c.cy, c.width, c.height],
                "planes": [p.to_json() for p in self.planes],
                "poses": [np.asarray(T).tolist() for T in self.poses],
                "timestamps": list(self.timestamps), "seed": self.seed, "kind": self.kind}

    @classmethod
    def from_json(cls, d):
        fx, fy, cx, cy, w, h = d["camera"]
        return cls(Camera(fx, fy, cx, cy, int(w), int(h)), [Plane.from_json(p) for p in d["planes"]],
                   [np.asarray(T, dtype=float) for T in d["poses"]], list(d["timestamps"]),
                   int(d.get("seed", 0)), d.get("kind", "zigzag"))


@dataclass
class RenderedFrame:
    index: int
    image: np.ndarray | None      # (3, H1, W1) in [0, 1]
    depth: np.ndarray             # (H, W) z-depth at feature resolution
    pose: Pose
    flows: dict                   # target index -> (flow (2, H, W), valid mask)


# ------------------------------------------------------------------ trajectories

def _look_matrix(position, forward, up=(0.0, 1.0, 0.0)):
    """World-to-camera matrix for a camera at ``position`` looking along
    ``forward`` with image y pointing along ``up`` (y-down convention)."""
    z = np.asarray(forward, float)
    z = z / np.linalg.norm(z)
    y = np.asarray(up, float)
    y = y - z * (y @ z)
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    R_cw = np.stack([x, y, z], axis=1)
    T = np.eye(4)
    T[:3, :3] = R_cw.T
    T[:3, 3] = -R_cw.T @ np.asarray(position, float)
    return T


def _yaw_pitch_matrix(position, yaw, pitch):
    fwd = np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)])
    return _look_matrix(position, fwd)


def generate_trajectory(kind: str, n_frames: int, seed: int = 0, step: float | None = None,
                        radius: float = 4.0):
    """World-to-camera 4x4 matrices; every trajectory starts at the identity.

    ``orbit`` circles a point ``radius`` ahead of the start, looking at it, with
    angular ``step`` (radians) per frame. ``forward`` and ``zigzag`` advance
    along +z with seeded lateral and yaw oscillations.
    """
    rng = np.random.default_rng(seed)
    poses = []
    if kind == "orbit":
        step = math.radians(1.5) if step is None else step
        center = np.array([0.0, 0.0, radius])
        for k in range(n_frames):
            th = k * step
            pos = center + radius * np.array([math.sin(th), 0.0, -math.cos(th)])
            poses.append(_look_matrix(pos, center - pos))
    elif kind == "forward":
        speed = 0.06 if step is None else step
        ax, ay, ayaw = rng.uniform([0.1, 0.05, 0.03], [0.25, 0.1, 0.08])
        px, py = rng.uniform(0, 2 * math.pi, size=2)
        for k in range(n_frames):
            s = 0.35 * k
            pos = np.array([ax * (math.sin(s + px) - math.sin(px)),
                            ay * (math.sin(0.7 * s + py) - math.sin(py)), speed * k])
            poses.append(_yaw_pitch_matrix(pos, ayaw * math.sin(0.5 * s), 0.02 * math.sin(0.3 * s)))
    elif kind == "zigzag":
        speed = 0.03 if step is None else step
        amp = rng.uniform(0.25, 0.4)
        period = int(rng.integers(6, 9))
        ayaw = rng.uniform(0.04, 0.08)
        for k in range(n_frames):
            phase = (k % (2 * period)) / period
            tri = phase if phase <= 1 else 2 - phase
            s = 2 * math.pi * k / (2 * period)
            pos = np.array([amp * tri, 0.05 * math.sin(s), speed * k])
            poses.append(_yaw_pitch_matrix(pos, ayaw * math.sin(s), 0.015 * (1 - math.cos(s))))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return poses


# ------------------------------------------------------------------ scene

def default_camera(height: int = 384, width: int = 512) -> Camera:
    f = 0.75 * width
    return Camera(f, f, width / 2.0, height / 2.0, width, height)


def make_scene(n_frames: int = 20, kind: str = "zigzag", seed: int = 0, height: int = 384,
               width: int = 512, fps: float = 10.0, step: float | None = None) -> Scene:
    if height % FEATURE_STRIDE or width % FEATURE_STRIDE:
        raise ValueError("image size must be divisible by 8")
    rng = np.random.default_rng(seed)
    planes = [
        Plane(np.array([0.0, 0.0, 1.0]), float(rng.uniform(7.0, 9.0)), np.array([0.9, 0.85, 0.8]), seed * 10 + 1),
        Plane(np.array([0.0, 1.0, 0.0]), float(rng.uniform(1.2, 1.8)), np.array([0.6, 0.75, 0.6]), seed * 10 + 2),
    ]
    for p in range(int(rng.integers(1, 4))):
        center = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-0.8, 0.5), rng.uniform(3.0, 5.5)])
        yaw, pitch = rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3)
        normal = np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch), -math.cos(yaw) * math.cos(pitch)])
        u = np.cross([0.0, 1.0, 0.0], normal)
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        planes.append(Plane(normal, float(normal @ center), rng.uniform(0.4, 1.0, size=3), seed * 10 + 3 + p,
                            center, u * rng.uniform(0.4, 0.9), v * rng.uniform(0.3, 0.7)))
    poses = generate_trajectory(kind, n_frames, seed, step=step)
    return Scene(default_camera(height, width), planes, poses, [k / fps for k in range(n_frames)], seed, kind)


# ------------------------------------------------------------------ texture

def _value_noise(u, v, seed, octaves=4, base=2.0):
    rng = np.random.default_rng(seed)
    table = rng.uniform(size=(4, 64, 64))
    out = np.zeros_like(u)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        f = base * 2 ** o
        x, y = u * f, v * f
        x0, y0 = np.floor(x), np.floor(y)
        tx, ty = x - x0, y - y0
        tx, ty = tx * tx * (3 - 2 * tx), ty * ty * (3 - 2 * ty)
        i0, j0 = x0.astype(np.int64) % 64, y0.astype(np.int64) % 64
        i1, j1 = (i0 + 1) % 64, (j0 + 1) % 64
        t = table[o]
        val = ((1 - tx) * (1 - ty) * t[j0, i0] + tx * (1 - ty) * t[j0, i1]
               + (1 - tx) * ty * t[j1, i0] + tx * ty * t[j1, i1])
        out += amp * val
        total += amp
        amp *= 0.5
    return out / total


def _plane_coords(plane: Plane, X):
    if plane.center is not None:
        d = X - plane.center
        return (d @ plane.axis_u) / (plane.axis_u @ plane.axis_u), (d @ plane.axis_v) / (plane.axis_v @ plane.axis_v)
    n = plane.normal
    a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    return X @ a, X @ b


# ------------------------------------------------------------------ ray casting

def _cast(scene: Scene, T_cw_inv: np.ndarray, camera: Camera):
    """Returns (z-depth, world points, plane id) for every pixel of ``camera``."""
    H, W = camera.height, camera.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    rays_c = np.stack([(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)], -1)
    R_wc = T_cw_inv[:3, :3]
    origin = T_cw_inv[:3, 3]
    rays_w = rays_c @ R_wc.T
    best = np.full((H, W), np.inf)
    pid = np.full((H, W), -1, dtype=np.int64)
    for k, pl in enumerate(scene.planes):
        denom = rays_w @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (pl.offset - origin @ pl.normal) / denom
        ok = np.isfinite(s) & (s > 1e-6)
        if pl.center is not None:
            X = origin + rays_w * np.where(ok, s, 0.0)[..., None]
            pu, pv = _plane_coords(pl, X)
            ok &= (np.abs(pu) <= 1.0) & (np.abs(pv) <= 1.0)
        closer = ok & (s < best)
        best = np.where(closer, s, best)
        pid = np.where(closer, k, pid)
    X = origin + rays_w * np.where(np.isfinite(best), best, 0.0)[..., None]
    return best, X, pid


def _shade(scene: Scene, X, pid):
    img = np.zeros(X.shape[:2] + (3,))
    for k, pl in enumerate(scene.planes):
        sel = pid == k
        if not sel.any():
            continue
        pu, pv = _plane_coords(pl, X[sel])
        tex = _value_noise(pu, pv, pl.texture_seed)
        img[sel] = (0.15 + 0.85 * tex)[:, None] * pl.tint
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


def gt_flow(scene: Scene, i: int, j: int):
    """Exact flow (2, H, W) and validity mask from frame i to frame j at feature resolution."""
    cam = scene.feature_camera
    depth, X, _ = _cast(scene, np.linalg.inv(scene.poses[i]), cam)
    Tj = scene.poses[j]
    Xc = X @ Tj[:3, :3].T + Tj[:3, 3]
    z = Xc[..., 2]
    front = np.isfinite(depth) & (z > MIN_DEPTH)
    zs = np.where(front, z, 1.0)
    u = cam.fx * Xc[..., 0] / zs + cam.cx
    v = cam.fy * Xc[..., 1] / zs + cam.cy
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    flow = np.stack([u - xs, v - ys])
    flow[:, ~front] = 0.0
    return flow, front & in_frame(u, v, cam.width, cam.height)


def oracle_correspondence(scene: Scene, i: int, j: int):
    """Ground-truth target coordinates in frame j and unit weights on valid pixels."""
    flow, mask = gt_flow(scene, i, j)
    cam = scene.feature_camera
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    target = np.stack([xs, ys]) + flow
    return target, np.repeat(mask[None].astype(np.float64), 2, axis=0)


def render(scene: Scene, index: int, targets=(), image: bool = True) -> RenderedFrame:
    T_inv = np.linalg.inv(scene.poses[index])
    depth, _, _ = _cast(scene, T_inv, scene.feature_camera)
    img = None
    if image:
        _, Xf, pid = _cast(scene, T_inv, scene.camera)
        img = _shade(scene, Xf, pid)
    flows = {j: gt_flow(scene, index, j) for j in targets}
    return RenderedFrame(index, img, depth, scene.pose(index), flows)


def coverage(scene: Scene, index: int, near=0.5, far=20.0) -> float:
    depth = render(scene, index, image=False).depth
    return float(np.mean((depth >= near) & (depth <= far)))


# ------------------------------------------------------------------ export

def export_tum(scene: Scene, out_dir) -> Path:
    """Write rgb/, depth/ (DPR1), rgb.txt, depth.txt, groundtruth.txt,
    calib.txt and scene.json under ``out_dir``."""
    from PIL import Image

    from .fileio import write_depth, write_tum

    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    rgb_lines = ["# timestamp filename"]
    depth_lines = ["# timestamp filename"]
    gt = []
    for k, ts in enumerate(scene.timestamps):
        fr = render(scene, k)
        name = f"{ts:.6f}"
        arr = np.round(fr.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(out / "rgb" / f"{name}.png")
        write_depth(out / "depth" / f"{name}.dpr", fr.depth)
        rgb_lines.append(f"{name} rgb/{name}.png")
        depth_lines.append(f"{name} depth/{name}.dpr")
        gt.append((ts, fr.pose.inverse()))
    (out / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_tum(out / "groundtruth.txt", gt, comment="camera-to-world ground truth")
    c = scene.camera
    (out / "calib.txt").write_text(f"{c.fx} {c.fy} {c.cx} {c.cy}\n")
    (out / "scene.json").write_text(json.dumps(scene.to_json()))
    return out


def load_scene(path) -> Scene:
    return Scene.from_json(json.loads(Path(path).read_text()))
