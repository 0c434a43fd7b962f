"""Sequence ingestion and the per-frame odometry loop.

For every admitted keyframe the loop rebuilds the edge set and runs
``config.iterations`` rounds of: induced flow from the current geometry,
correlation lookup, temporal propagation, spatial activation, GRU revision,
then bundle adjustment over the live window. In oracle mode the network is
bypassed and ground-truth correspondences with unit weight feed the solver.
"""

from __future__ import annotations

import csv
import json
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .config import Config
from .dba import BAEdge, BAProblem, run_dba
from .errors import (BadDimensions, FormatError, MalformedIndex, MissingGroundTruth, MissingImage,
                     NonFiniteError, ShapeMismatch, StvoError)
from .evaluate import MAX_DT, ate
from .fileio import read_tum, write_tum
from .graph import FrameGraph, KeyframePolicy
from .lie import Camera, Pose, induced_flow, pixel_grid
from .matching import build_pyramid, encoder_specs, extract_features, lookup, matching_flow
from .spatial import activate, build_sam, sam_specs, select_depth_source
from .synth import FEATURE_STRIDE, Scene, gt_flow, load_scene, oracle_correspondence
from .temporal import (init_motion_state, propagate_back, temporal_encode, temporal_motion_state,
                       temporal_specs, warp_motion)
from .update import apply_revision, update_specs, update_step

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".pgm", ".ppm")


# ------------------------------------------------------------------ ingestion

@dataclass
class Frame:
    timestamp: float
    image_path: Path
    depth_path: Optional[Path] = None


@dataclass
class Sequence:
    root: Path
    frames: list
    camera: Optional[Camera] = None          # full resolution
    groundtruth: Optional[list] = None       # TUM rows (camera-to-world)
    scene: Optional[Scene] = None            # present for synthetic exports


def _read_index(path: Path):
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MalformedIndex(f"{path}:{lineno}: expected 'timestamp filename'")
        try:
            ts = float(parts[0])
        except ValueError:
            raise MalformedIndex(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
        rows.append((ts, parts[1]))
    return sorted(rows, key=lambda r: r[0])


def _read_calib(path: Path):
    vals = path.read_text().split()
    if len(vals) < 4:
        raise FormatError(f"{path}: expected 'fx fy cx cy'")
    return [float(v) for v in vals[:4]]


def load_image(path) -> np.ndarray:
    """(3, H, W) float image in [0, 1]; grayscale inputs are replicated."""
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise MissingImage(str(path))
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _image_size(path: Path):
    from PIL import Image

    with Image.open(path) as im:
        return im.size  # (W, H)


def load_sequence(path, fmt: str = "tum-rgbd", intrinsics=None) -> Sequence:
    """Timestamp-ordered frames of a TUM-RGBD style directory or a plain image directory.

    Depth files (DPR1) listed in ``depth.txt`` are matched to images by nearest
    timestamp. Intrinsics come from the argument or ``calib.txt``.
    """
    root = Path(path)
    if not root.is_dir():
        raise MissingImage(f"sequence directory {root} does not exist")
    if fmt == "tum-rgbd":
        index = root / "rgb.txt"
        if not index.is_file():
            raise MalformedIndex(f"{index} not found")
        frames = [Frame(ts, root / rel) for ts, rel in _read_index(index)]
        depth_index = root / "depth.txt"
        if depth_index.is_file():
            depth_rows = _read_index(depth_index)
            dts = np.array([t for t, _ in depth_rows])
            for fr in frames:
                if len(dts):
                    k = int(np.argmin(np.abs(dts - fr.timestamp)))
                    if abs(dts[k] - fr.timestamp) <= MAX_DT:
                        fr.depth_path = root / depth_rows[k][1]
    elif fmt == "image-dir":
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        frames = []
        for k, p in enumerate(files):
            try:
                ts = float(p.stem)
            except ValueError:
                ts = float(k)
            frames.append(Frame(ts, p))
        frames.sort(key=lambda f: f.timestamp)
    else:
        raise ValueError(f"unknown sequence format {fmt!r}")
    for fr in frames:
        if not fr.image_path.is_file():
            raise MissingImage(str(fr.image_path))
    if intrinsics is None and (root / "calib.txt").is_file():
        intrinsics = _read_calib(root / "calib.txt")
    camera = None
    if intrinsics is not None and frames:
        W, H = _image_size(frames[0].image_path)
        camera = Camera(*map(float, intrinsics), W, H)
    gt = read_tum(root / "groundtruth.txt") if (root / "groundtruth.txt").is_file() else None
    scene = load_scene(root / "scene.json") if (root / "scene.json").is_file() else None
    return Sequence(root, frames, camera, gt, scene)


# ------------------------------------------------------------------ network

def corr_channels(cfg: Config) -> int:
    return cfg.levels * (2 * cfg.radius + 1) ** 2


def network_specs(cfg: Config):
    cc = corr_channels(cfg)
    return (encoder_specs(3, cfg.d_f, cfg.d_c) + temporal_specs(cc, cfg.d_m, cfg.d_M) + sam_specs(cfg.d_in)
            + update_specs(cfg.d_M + cfg.d_c + 3 * cfg.d_m + cc, cfg.d_h))


def build_weights(cfg: Config) -> ad.WeightStore:
    if cfg.weights:
        return ad.WeightStore.load(cfg.weights)
    return ad.WeightStore.initialize(network_specs(cfg), seed=cfg.seed)


# ------------------------------------------------------------------ run

@dataclass
class RunArtifacts:
    trajectory: list                 # (timestamp, world-to-camera Pose) per admitted keyframe
    reports: list                    # one dict per bundle-adjustment call
    keyframes: list                  # (keyframe index, frame position, timestamp)
    config: Config
    metrics: dict = field(default_factory=dict)

    def tum_rows(self):
        return [(ts, g.inverse()) for ts, g in self.trajectory]


class _Runner:
    def __init__(self, cfg: Config, seq: Sequence, weights=None):
        self.cfg = cfg
        self.seq = seq
        self.oracle = cfg.flow_source == "oracle"
        cam = seq.camera
        if cfg.intrinsics is not None and seq.frames:
            W, H = _image_size(seq.frames[0].image_path)
            cam = Camera(*map(float, cfg.intrinsics), W, H)
        if cam is None:
            raise FormatError("camera intrinsics missing: pass --intrinsics or provide calib.txt")
        if cam.width % FEATURE_STRIDE or cam.height % FEATURE_STRIDE:
            raise BadDimensions(f"image {cam.height}x{cam.width} is not divisible by {FEATURE_STRIDE}")
        self.camera = cam
        self.fcam = cam.scaled(FEATURE_STRIDE)
        self.shape = (self.fcam.height, self.fcam.width)
        self.grid = pixel_grid(*self.shape)
        if self.oracle:
            if seq.scene is None:
                raise MissingGroundTruth("oracle flow mode needs scene.json from the synthetic exporter")
            self.weights = None
            self.scene_ts = np.asarray(seq.scene.timestamps, dtype=float)
        else:
            self.weights = weights if weights is not None else build_weights(cfg)
        self.graph = FrameGraph()
        self.policy = KeyframePolicy(cfg.kf_threshold)
        self.frames = seq.frames[::cfg.stride]
        self.reports = []
        self.kf_log = []
        self.depth_cache = {}
        self.motion_max = 0.0

    # -------------------------------------------------------------- helpers
    def scene_index(self, frame: Frame) -> int:
        k = int(np.argmin(np.abs(self.scene_ts - frame.timestamp)))
        if abs(self.scene_ts[k] - frame.timestamp) > MAX_DT:
            raise MissingGroundTruth(f"no scene frame near t={frame.timestamp}")
        return k

    def depth_for(self, kf) -> np.ndarray:
        if self.cfg.depth_source == "ba":
            return select_depth_source("ba", inv_depth=kf.inv_depth).depth
        if kf.index not in self.depth_cache:
            fr = self.frames[kf.frame_id]
            raster = select_depth_source("external", depth_file=fr.depth_path).depth
            if raster.shape != self.shape:
                raise ShapeMismatch(f"depth raster {raster.shape} vs feature grid {self.shape}")
            self.depth_cache[kf.index] = raster
        return self.depth_cache[kf.index]

    def _edge_forward(self, src, dst, pyramid, flow, hidden):
        W, cfg = self.weights, self.cfg
        sam = build_sam(self.depth_for(src), W, cfg.sam_normalization, cfg.memory_budget)
        corr = lookup(pyramid, self.grid + flow, cfg.radius)
        warped, wmask = warp_motion(src.motion_state, flow)
        m_t = temporal_motion_state(src.motion_state, warped, dst.motion_state)
        mf = temporal_encode(corr, m_t, W, mask=wmask)
        c_s = activate(src.context, sam, W["sam.alpha_c"])
        f_st = activate(mf.motion, sam, W["sam.alpha_f"])
        h, rev = update_step(hidden, f_st, c_s, m_t, corr, W)
        return h, rev, mf.local_state

    def flow_magnitude(self, frame: Frame, fp) -> Optional[float]:
        last = self.graph.last()
        if last is None:
            return None
        if self.oracle:
            flow, mask = gt_flow(self.seq.scene, self.scene_index(self.frames[last.frame_id]),
                                 self.scene_index(frame))
            if not mask.any():
                return float("inf")
            return float(np.linalg.norm(flow, axis=0)[mask].mean())
        # untrained revisions carry no motion signal, so use best-match feature flow
        flow = matching_flow(last.features, fp.features)
        return float(np.linalg.norm(flow, axis=0).mean())

    # -------------------------------------------------------------- iterations
    def network_iteration(self):
        kfs = self.graph.keyframes
        local = defaultdict(list)
        for es in self.graph.source_edge_sets():
            src = kfs[es.source]
            for e in es.edges:
                dst = kfs[e.target]
                flow, _ = induced_flow(src.pose, dst.pose, src.inv_depth, self.fcam)
                if e.pyramid is None:
                    e.pyramid = build_pyramid(src.features, dst.features, self.cfg.levels)
                if e.hidden is None:
                    e.hidden = np.zeros((self.cfg.d_h,) + self.shape)
                e.hidden, rev, state = self._edge_forward(src, dst, e.pyramid, flow, e.hidden)
                e.flow = flow
                e.target_coords = apply_revision(flow, rev)
                e.confidence = rev.weight
                local[es.source].append(state)
        for i, states in local.items():
            kfs[i].motion_state = propagate_back(states)
            self.motion_max = max(self.motion_max, float(np.abs(kfs[i].motion_state).max()))

    def oracle_targets(self):
        kfs = self.graph.keyframes
        for e in self.graph.edges.values():
            if e.target_coords is None:
                a = self.scene_index(self.frames[kfs[e.source].frame_id])
                b = self.scene_index(self.frames[kfs[e.target].frame_id])
                e.target_coords, e.confidence = oracle_correspondence(self.seq.scene, a, b)

    def bundle_adjust(self, frame_pos, kf_index, iteration):
        live = self.graph.live()
        pos = {k.index: n for n, k in enumerate(live)}
        edges = [BAEdge(pos[e.source], pos[e.target], e.target_coords, e.confidence)
                 for e in self.graph.edges.values()]
        prob = BAProblem([k.pose for k in live], [k.inv_depth for k in live], edges, self.fcam)
        poses, depths, rep = run_dba(prob, self.cfg.inner_iters, freeze_unconstrained=True)
        for k, g, d in zip(live, poses, depths):
            k.pose, k.inv_depth = g, d
        self.reports.append({"frame": frame_pos, "keyframe": kf_index, "iteration": iteration,
                             "window": len(live), "edges": len(edges), "report": rep})

    def check_finite(self):
        for k in self.graph.keyframes.values():
            arrays = [k.pose.q, k.pose.t, k.inv_depth]
            if k.motion_state is not None:
                arrays.append(k.motion_state)
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise NonFiniteError(f"non-finite state in keyframe {k.index}")
        for e in self.graph.edges.values():
            if e.hidden is not None and not np.all(np.isfinite(e.hidden)):
                raise NonFiniteError(f"non-finite hidden state on edge {e.key}")

    # -------------------------------------------------------------- main loop
    def run(self) -> RunArtifacts:
        cfg = self.cfg
        t0 = time.perf_counter()
        for pos, frame in enumerate(self.frames):
            it = None
            try:
                fp = None
                if self.oracle:
                    if cfg.depth_source == "external":
                        # resolved and validated so a missing raster fails in both modes
                        select_depth_source("external", depth_file=frame.depth_path)
                else:
                    fp = extract_features(load_image(frame.image_path), self.weights)
                mag = self.flow_magnitude(frame, fp)
                idx = self.graph.admit_frame(
                    frame.timestamp, self.policy, mag,
                    features=None if fp is None else fp.features,
                    context=None if fp is None else fp.context, frame_id=pos,
                    motion_state_fn=None if self.oracle else (
                        lambda i, shape: init_motion_state(cfg.seed, cfg.d_m, *shape, index=i,
                                                           std=cfg.motion_std)),
                    shape=self.shape)
                if idx is None:
                    continue
                self.kf_log.append((idx, pos, frame.timestamp))
                if len(self.graph) < 2:
                    continue
                self.graph.build_edges(cfg.r, cfg.edge_mode, self._edge_score if cfg.edge_mode == "flow" else None)
                for it in range(cfg.iterations):
                    if self.oracle:
                        self.oracle_targets()
                    else:
                        self.network_iteration()
                    self.bundle_adjust(pos, idx, it)
                    self.check_finite()
                self.graph.evict_oldest(cfg.window)
            except StvoError as e:
                where = f"frame {pos}" + ("" if it is None else f", iteration {it}")
                e.frame, e.iteration = pos, it
                e.args = (f"{where}: {e.args[0] if e.args else type(e).__name__}",) + tuple(e.args[1:])
                raise
        traj = self.graph.trajectory()
        art = RunArtifacts(traj, self.reports, self.kf_log, cfg)
        art.metrics = self.metrics(art, time.perf_counter() - t0)
        return art

    def _edge_score(self, i, j):
        kfs = self.graph.keyframes
        flow, mask = induced_flow(kfs[i].pose, kfs[j].pose, kfs[i].inv_depth, self.fcam)
        if not mask.any():
            return float("inf")
        return float(np.linalg.norm(flow, axis=0)[mask].mean())

    def metrics(self, art: RunArtifacts, seconds: float) -> dict:
        monotone = all(all(b <= a for a, b in zip(c, c[1:]))
                       for c in (r["report"].accepted_costs for r in art.reports))
        out = {"frames": len(self.frames), "keyframes": len(art.trajectory), "ba_calls": len(art.reports),
               "ba_cost_monotone": monotone, "runtime_s": round(seconds, 3)}
        if art.reports:
            out["final_cost"] = art.reports[-1]["report"].accepted_costs[-1]
        if not self.oracle:
            out["motion_state_max_abs"] = self.motion_max
        if self.seq.groundtruth is not None and len(art.trajectory) >= 3:
            try:
                res = ate(art.tum_rows(), self.seq.groundtruth)
                out.update(ate_rmse=res.rmse, ate_mean=res.mean, ate_median=res.median, ate_max=res.max,
                           ate_scale=res.scale)
            except StvoError as e:
                out["ate_error"] = str(e)
        return out


def run_vo(config: Config, sequence: Sequence, weights=None) -> RunArtifacts:
    """Run odometry over ``sequence``; see the module docstring for the schedule."""
    return _Runner(config.validate(), sequence, weights).run()


# ------------------------------------------------------------------ outputs

REPORT_COLUMNS = ("frame", "keyframe", "iteration", "step", "cost_before", "cost_after", "accepted",
                  "damping", "pose_step", "depth_step", "converged")


def report_rows(reports):
    for r in reports:
        rep = r["report"]
        for s, (a, b, ok, lam, pn, dn) in enumerate(zip(rep.costs_before, rep.costs_after, rep.accepted,
                                                        rep.damping, rep.pose_norms, rep.depth_norms)):
            yield (r["frame"], r["keyframe"], r["iteration"], s, f"{a:.9e}", f"{b:.9e}", int(ok),
                   f"{lam:.1e}", f"{pn:.6e}", f"{dn:.6e}", int(rep.converged))


def write_artifacts(art: RunArtifacts, out_dir, plots: bool = True, groundtruth=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": out / "trajectory.txt", "config": out / "config.json",
             "report": out / "ba_report.csv", "metrics": out / "metrics.json"}
    write_tum(paths["trajectory"], art.tum_rows(), comment="estimated keyframe poses, camera-to-world")
    art.config.save(paths["config"])
    with open(paths["report"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        w.writerows(report_rows(art.reports))
    paths["metrics"].write_text(json.dumps(art.metrics, indent=2, sort_keys=True) + "\n")
    if plots:
        from .plotting import plot_costs, plot_trajectory

        paths["trajectory_plot"] = plot_trajectory(art.tum_rows(), groundtruth, out / "trajectory.png")
        paths["cost_plot"] = plot_costs(art.reports, out / "ba_cost.png")
    return paths
