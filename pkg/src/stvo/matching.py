"""Feature encoder and all-pairs correlation pyramid with windowed lookup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BadDimensions, ShapeMismatch

STAGE_WIDTHS = (32, 64, 96)


@dataclass
class FeaturePair:
    features: np.ndarray  # (D_f, H, W) matching features
    context: np.ndarray   # (D_c, H, W)


def encoder_specs(in_channels: int, d_f: int, d_c: int, widths=STAGE_WIDTHS):
    specs = []
    c = in_channels
    for s, w in enumerate(widths):
        p = f"encoder.stage{s}"
        specs += [(f"{p}.conv1.weight", (w, c, 3, 3), "kaiming"), (f"{p}.conv1.bias", (w,), "zeros"),
                  (f"{p}.conv2.weight", (w, w, 3, 3), "kaiming"), (f"{p}.conv2.bias", (w,), "zeros"),
                  (f"{p}.skip.weight", (w, c, 1, 1), "kaiming"), (f"{p}.skip.bias", (w,), "zeros")]
        c = w
    specs += [("encoder.fmap.weight", (d_f, c, 1, 1), "kaiming"), ("encoder.fmap.bias", (d_f,), "zeros"),
              ("encoder.cmap.weight", (d_c, c, 1, 1), "kaiming"), ("encoder.cmap.bias", (d_c,), "zeros")]
    return specs


def extract_features(image, weights, n_stages: int = len(STAGE_WIDTHS)) -> FeaturePair:
    """Three stride-2 residual stages, then 1x1 heads for matching and context.

    ``image`` is (C, H1, W1) with values in [0, 1]; H1 and W1 must be divisible by 8.
    Replicate padding keeps constant images mapping to constant features.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    H1, W1 = x.shape[-2:]
    if H1 % 8 or W1 % 8:
        raise BadDimensions(f"image {H1}x{W1} is not divisible by 8")
    x = 2.0 * x - 1.0
    for s in range(n_stages):
        p = f"encoder.stage{s}"
        a = ad.relu(ad.conv2d(x, weights[f"{p}.conv1.weight"], weights[f"{p}.conv1.bias"],
                              stride=2, padding_mode="replicate"))
        b = ad.conv2d(a, weights[f"{p}.conv2.weight"], weights[f"{p}.conv2.bias"],
                      padding_mode="replicate")
        skip = ad.conv2d(x, weights[f"{p}.skip.weight"], weights[f"{p}.skip.bias"], stride=2,
                         padding="valid")
        x = ad.relu(ad.add(b, skip))
    fmap = ad.conv2d(x, weights["encoder.fmap.weight"], weights["encoder.fmap.bias"], padding="valid")
    cmap = ad.conv2d(x, weights["encoder.cmap.weight"], weights["encoder.cmap.bias"], padding="valid")
    return FeaturePair(ad.value(fmap), ad.value(cmap))


def _avg_pool_target(vol):
    H, W, h, w = vol.shape
    h2, w2 = h // 2, w // 2
    v = vol[:, :, :2 * h2, :2 * w2].reshape(H, W, h2, 2, w2, 2)
    return v.mean(axis=(3, 5))


def build_pyramid(feat_i, feat_j, levels: int = 4):
    """Level 0 is dot(feat_i[p], feat_j[q]) / sqrt(D); each further level
    average-pools the previous one 2x2 over the target dimensions."""
    fi = np.asarray(feat_i, dtype=np.float64)
    fj = np.asarray(feat_j, dtype=np.float64)
    if fi.shape != fj.shape:
        raise ShapeMismatch(f"feature shapes differ: {fi.shape} vs {fj.shape}")
    D = fi.shape[0]
    vol = np.einsum("chw,cuv->hwuv", fi, fj, optimize=True) / np.sqrt(D)
    pyr = [vol]
    for _ in range(1, levels):
        pyr.append(_avg_pool_target(pyr[-1]))
    return pyr


def window_offsets(radius: int):
    """(K, 2) offsets (dx, dy), row-major over dy then dx."""
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1)


def lookup(pyramid, coords, radius: int = 3):
    """Bilinear (2R+1)^2 window of each level around ``coords / 2^l``.

    ``coords`` is the (2, H, W) correspondence field in level-0 target pixels.
    Returns (L*(2R+1)^2, H, W); samples outside a level's extent are zero.
    """
    coords = np.asarray(coords, dtype=np.float64)
    H, W = pyramid[0].shape[:2]
    if coords.shape != (2, H, W):
        raise ShapeMismatch(f"coords {coords.shape} vs volume {(H, W)}")
    offs = window_offsets(radius)
    K = len(offs)
    out = []
    centers = coords.reshape(2, H * W).T  # (N, 2)
    rows = np.arange(H * W)[:, None]
    for lvl, vol in enumerate(pyramid):
        h, w = vol.shape[2:]
        flat = vol.reshape(H * W, h * w)
        pts = centers[:, None, :] / 2 ** lvl + offs[None]  # N, K, 2
        x, y = pts[..., 0], pts[..., 1]
        valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        xc = np.clip(x, 0, w - 1)
        yc = np.clip(y, 0, h - 1)
        x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(np.int64)
        y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(np.int64)
        ax, ay = xc - x0, yc - y0
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        val = ((1 - ax) * (1 - ay) * flat[rows, y0 * w + x0] + ax * (1 - ay) * flat[rows, y0 * w + x1]
               + (1 - ax) * ay * flat[rows, y1 * w + x0] + ax * ay * flat[rows, y1 * w + x1])
        val = np.where(valid, val, 0.0)
        out.append(val.T.reshape(K, H, W))
    return np.concatenate(out, axis=0)


def matching_flow(feat_i, feat_j):
    """Flow to each pixel's best cosine match in ``feat_j`` over the whole raster.

    Used as the network-mode keyframe motion measure; identical inputs give
    exactly zero flow. Ties resolve to the smallest target index.
    """
    fi = np.asarray(feat_i, dtype=np.float64)
    fj = np.asarray(feat_j, dtype=np.float64)
    if fi.shape != fj.shape:
        raise ShapeMismatch(f"feature shapes differ: {fi.shape} vs {fj.shape}")
    D, H, W = fi.shape
    a = fi.reshape(D, -1)
    b = fj.reshape(D, -1)
    a = a / np.maximum(np.linalg.norm(a, axis=0), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=0), 1e-12)
    best = np.argmax(a.T @ b, axis=1)
    qy, qx = np.divmod(best, W)
    ys, xs = np.divmod(np.arange(H * W), W)
    return np.stack([qx - xs, qy - ys]).reshape(2, H, W).astype(np.float64)
