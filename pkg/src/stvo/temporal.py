"""Per-keyframe motion states carried across update iterations.

For every edge (m, n) the source state is warped along the current flow,
stacked with both endpoint states, and encoded together with the correlation
features. The per-edge next states are then averaged back onto the source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyTargetSet, ShapeMismatch


@dataclass
class MotionFeature:
    motion: object       # F_motion, (D_M, H, W)
    local_state: object  # next-state proposal for the source frame, (D_m, H, W)


def init_motion_state(seed: int, d_m: int, height: int, width: int, index: int = 0,
                      std: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    return rng.normal(0.0, 1.0, size=(d_m, height, width)) * std


def warp_motion(m_source, flow):
    """Warp the source state along ``flow``; returns (warped, valid mask)."""
    ms, fl = ad.value(m_source), ad.value(flow)
    if fl.shape[-3:] != (2,) + ms.shape[-2:]:
        raise ShapeMismatch(f"flow {fl.shape} vs motion state {ms.shape}")
    return ad.bilinear_warp(m_source, flow)


def temporal_motion_state(m_source, warped, m_target):
    """Stack (source, warped source, target) along channels."""
    return ad.concat([m_source, warped, m_target])


def temporal_specs(corr_channels: int, d_m: int, d_M: int):
    c_in = corr_channels + 3 * d_m + 1
    return [("temporal.conv1.weight", (d_M, c_in, 3, 3), "kaiming"),
            ("temporal.conv1.bias", (d_M,), "zeros"),
            ("temporal.conv2.weight", (d_M + d_m, d_M, 3, 3), "kaiming"),
            ("temporal.conv2.bias", (d_M + d_m,), "zeros")]


def temporal_encode(corr, m_t, weights, mask=None) -> MotionFeature:
    """Two 3x3 convolutions (ReLU between) over concat(corr, M_T, mask).

    The output is split: the first D_M channels are the motion feature, the
    remaining D_m the local next state. ``mask`` (warp validity) is appended as
    one channel; pass None to use all-ones.
    """
    cv, mv = ad.value(corr), ad.value(m_t)
    if cv.shape[-2:] != mv.shape[-2:]:
        raise ShapeMismatch(f"corr {cv.shape} vs motion state {mv.shape}")
    if mask is None:
        mask = np.ones(mv.shape[:-3] + (1,) + mv.shape[-2:])
    else:
        mask = np.asarray(mask, dtype=np.float64)
        mask = mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:])
    x = ad.concat([corr, m_t, mask])
    hidden = ad.relu(ad.conv2d(x, weights["temporal.conv1.weight"], weights["temporal.conv1.bias"]))
    out = ad.conv2d(hidden, weights["temporal.conv2.weight"], weights["temporal.conv2.bias"])
    d_M = ad.value(weights["temporal.conv1.bias"]).shape[0]
    d_total = ad.value(weights["temporal.conv2.bias"]).shape[0]
    motion, state = ad.split(out, [d_M, d_total - d_M])
    return MotionFeature(motion, state)


def propagate_back(local_states):
    """Mean of the per-edge local states of one source edge set."""
    local_states = list(local_states)
    if not local_states:
        raise EmptyTargetSet("source frame has no outgoing edges")
    if len(local_states) == 1:
        return local_states[0]
    return ad.mean_of(local_states)
