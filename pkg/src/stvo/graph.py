"""Keyframe store and co-visibility edges."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import lie
from .errors import AngleNearPi
from .lie import Pose


@dataclass
class Keyframe:
    index: int
    timestamp: float
    pose: Pose
    inv_depth: np.ndarray
    features: Optional[np.ndarray] = None
    context: Optional[np.ndarray] = None
    motion_state: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    frame_id: Optional[int] = None  # position in the input stream


@dataclass
class Edge:
    source: int
    target: int
    flow: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None
    target_coords: Optional[np.ndarray] = None
    pyramid: Optional[list] = None

    @property
    def key(self):
        return (self.source, self.target)


@dataclass
class SourceEdgeSet:
    source: int
    edges: list


@dataclass
class KeyframePolicy:
    threshold: float = 2.4     # mean flow magnitude in pixels at feature resolution
    init_inv_depth: float = 1.0


@dataclass
class FrameGraph:
    keyframes: dict = field(default_factory=dict)      # index -> Keyframe
    edges: dict = field(default_factory=dict)          # (i, j) -> Edge
    frozen: dict = field(default_factory=dict)         # index -> (timestamp, Pose)
    next_index: int = 0

    # ------------------------------------------------------------- queries
    def __len__(self):
        return len(self.keyframes)

    def live(self):
        """Live keyframes sorted by timestamp."""
        return sorted(self.keyframes.values(), key=lambda k: (k.timestamp, k.index))

    def last(self) -> Optional[Keyframe]:
        kfs = self.live()
        return kfs[-1] if kfs else None

    def trajectory(self):
        """(timestamp, Pose) for every admitted keyframe, evicted ones included."""
        rows = dict(self.frozen)
        for kf in self.keyframes.values():
            rows[kf.index] = (kf.timestamp, kf.pose)
        return [rows[i] for i in sorted(rows, key=lambda i: rows[i][0])]

    # ------------------------------------------------------------- mutation
    def admit_frame(self, timestamp: float, policy: KeyframePolicy = KeyframePolicy(),
                    flow_magnitude: Optional[float] = None, features=None, context=None,
                    image=None, frame_id=None,
                    motion_state_fn: Optional[Callable[[int, tuple], np.ndarray]] = None,
                    shape: Optional[tuple] = None) -> Optional[int]:
        """Admit a frame as keyframe or reject it (returns None).

        ``flow_magnitude`` is the mean flow between the candidate and the most
        recent keyframe, measured by the caller's flow source. The first frame
        is always admitted.
        """
        last = self.last()
        if last is not None:
            if timestamp <= last.timestamp:
                raise ValueError("keyframe timestamps must increase")
            if flow_magnitude is None or not flow_magnitude > policy.threshold:
                return None
        if shape is None:
            if last is not None:
                shape = last.inv_depth.shape
            elif features is not None:
                shape = np.shape(features)[-2:]
            else:
                raise ValueError("raster shape unknown for the first keyframe")
        if last is None:
            pose = Pose.identity()
            d0 = policy.init_inv_depth
        else:
            pose = self._extrapolate(timestamp)
            d0 = float(np.mean(last.inv_depth))
        idx = self.next_index
        self.next_index += 1
        kf = Keyframe(idx, float(timestamp), pose, np.full(shape, d0), features, context,
                      image=image, frame_id=frame_id)
        if motion_state_fn is not None:
            kf.motion_state = motion_state_fn(idx, shape)
        self.keyframes[idx] = kf
        return idx

    def _extrapolate(self, timestamp: float) -> Pose:
        kfs = self.live()
        last = kfs[-1]
        if len(kfs) < 2:
            return last.pose.copy()
        prev = kfs[-2]
        dt_prev = last.timestamp - prev.timestamp
        try:
            vel = lie.log(last.pose * prev.pose.inverse())
        except AngleNearPi:
            return last.pose.copy()
        ratio = (timestamp - last.timestamp) / dt_prev if dt_prev > 0 else 1.0
        return lie.exp(vel * ratio) * last.pose

    def build_edges(self, r: int = 3, mode: str = "temporal",
                    score: Optional[Callable[[int, int], float]] = None):
        """Connect each keyframe with its ``r`` nearest neighbours on either side.

        ``temporal`` mode links frames whose rank distance in the live window is
        at most ``r``. ``flow`` mode instead links each frame to the ``r`` frames
        with the lowest ``score(i, j)`` (ties -> smaller index). Edges are
        bidirectional; surviving edges keep their state.
        """
        kfs = self.live()
        ids = [k.index for k in kfs]
        wanted = set()
        if mode == "temporal":
            for a in range(len(ids)):
                for b in range(max(0, a - r), min(len(ids), a + r + 1)):
                    if a != b:
                        wanted.add((ids[a], ids[b]))
        elif mode == "flow":
            if score is None:
                raise ValueError("flow mode needs a score function")
            for i in ids:
                others = sorted((j for j in ids if j != i), key=lambda j: (score(i, j), j))
                for j in others[:r]:
                    wanted.add((i, j))
                    wanted.add((j, i))
        else:
            raise ValueError(f"unknown edge mode {mode!r}")
        self.edges = {k: self.edges.get(k) or Edge(*k) for k in sorted(wanted)}
        return list(self.edges.values())

    def source_edge_sets(self):
        """Edges grouped by source, ordered by source then target timestamp."""
        ts = {i: k.timestamp for i, k in self.keyframes.items()}
        groups = {}
        for e in self.edges.values():
            groups.setdefault(e.source, []).append(e)
        out = []
        for src in sorted(groups, key=lambda i: (ts[i], i)):
            out.append(SourceEdgeSet(src, sorted(groups[src], key=lambda e: (ts[e.target], e.target))))
        return out

    def evict_oldest(self, capacity: int):
        removed = []
        while len(self.keyframes) > capacity:
            oldest = self.live()[0]
            self.frozen[oldest.index] = (oldest.timestamp, oldest.pose.copy())
            del self.keyframes[oldest.index]
            removed.append(oldest.index)
        if removed:
            gone = set(removed)
            self.edges = {k: e for k, e in self.edges.items()
                          if k[0] not in gone and k[1] not in gone}
        return removed
