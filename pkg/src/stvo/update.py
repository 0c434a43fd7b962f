"""Recurrent update: GRU over fused features emitting flow revisions and confidences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .lie import pixel_grid


@dataclass
class Revision:
    delta: object   # (2, H, W) additive flow correction
    weight: object  # (2, H, W) confidence in (0, 1)


def update_specs(input_channels: int, d_h: int):
    specs = []
    for g in "zrq":
        specs += [(f"gru.{g}.weight", (d_h, d_h + input_channels, 3, 3), "kaiming"),
                  (f"gru.{g}.bias", (d_h,), "zeros")]
    for head in ("flow", "conf"):
        specs += [(f"head.{head}.conv1.weight", (d_h, d_h, 3, 3), "kaiming"),
                  (f"head.{head}.conv1.bias", (d_h,), "zeros"),
                  (f"head.{head}.conv2.weight", (2, d_h, 3, 3), "kaiming"),
                  (f"head.{head}.conv2.bias", (2,), "zeros")]
    return specs


def _head(h, weights, name):
    x = ad.relu(ad.conv2d(h, weights[f"head.{name}.conv1.weight"], weights[f"head.{name}.conv1.bias"]))
    return ad.conv2d(x, weights[f"head.{name}.conv2.weight"], weights[f"head.{name}.conv2.bias"])


def update_step(h, f_st, c_s, m_t, corr, weights):
    """One GRU step on concat(F_ST, C_S, M_T, F_corr); returns (h', Revision)."""
    shapes = {ad.value(a).shape[-2:] for a in (h, f_st, c_s, m_t, corr)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"rasters disagree on spatial dims: {sorted(shapes)}")
    x = ad.concat([f_st, c_s, m_t, corr])
    h_new = ad.gru_cell(h, x, weights)
    delta = _head(h_new, weights, "flow")
    weight = ad.sigmoid(_head(h_new, weights, "conf"))
    return h_new, Revision(delta, weight)


def apply_revision(flow, revision: Revision):
    """Target correspondence: pixel grid + current flow + revision."""
    flow = np.asarray(ad.value(flow), dtype=np.float64)
    delta = np.asarray(ad.value(revision.delta), dtype=np.float64)
    if flow.shape != delta.shape:
        raise ShapeMismatch(f"flow {flow.shape} vs revision {delta.shape}")
    return pixel_grid(*flow.shape[-2:]) + flow + delta
