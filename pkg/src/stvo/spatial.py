"""Depth-driven spatial attention over feature rasters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateBADepth, InvalidDepth, MemoryBudgetExceeded, MissingDepthFile, ShapeMismatch
from .fileio import read_depth

DEFAULT_BUDGET = 512 * 2 ** 20  # bytes for one dense HW x HW matrix


@dataclass
class DepthRaster:
    depth: np.ndarray
    source: str  # "external" or "ba"


def sam_specs(d_in: int):
    return [("sam.W_q", (1, d_in), "kaiming"), ("sam.W_k", (1, d_in), "kaiming"),
            ("sam.alpha_c", (), "zeros"), ("sam.alpha_f", (), "zeros")]


def _depth_vector(depth, normalization: str):
    d = np.asarray(depth, dtype=np.float64).reshape(-1, 1)
    if normalization == "raw":
        return d
    if normalization != "standardized":
        raise ValueError(f"unknown depth normalization {normalization!r}")
    v = 1.0 / d
    std = v.std()
    if std == 0:
        return np.zeros_like(v)
    return (v - v.mean()) / std


def build_sam(depth, weights, normalization: str = "standardized", budget_bytes: int = DEFAULT_BUDGET):
    """Row-stochastic attention matrix softmax((D W_q)(D W_k)^T), shape (HW, HW).

    ``standardized`` maps depth to reciprocal, zero-mean unit-variance values
    first so the matrix ignores the global scale of monocular depth; ``raw``
    feeds depth in directly.
    """
    d = depth.depth if isinstance(depth, DepthRaster) else np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or not np.all(np.isfinite(d)) or not np.all(d > 0):
        raise InvalidDepth("depth raster must be 2-D, finite and positive")
    n = d.size
    if 8 * n * n > budget_bytes:
        raise MemoryBudgetExceeded(f"attention matrix {n}x{n} needs {8 * n * n} bytes, "
                                   f"budget is {budget_bytes}")
    v = _depth_vector(d, normalization)
    q = ad.matmul(v, weights["sam.W_q"])
    k = ad.matmul(v, weights["sam.W_k"])
    return ad.softmax_rows(ad.matmul(q, ad.transpose(k)))


def activate(feature, sam, alpha):
    """feature + alpha * (SAM @ feature) per channel, over flattened pixels."""
    fv = ad.value(feature)
    n = fv.shape[-1] * fv.shape[-2]
    if ad.value(sam).shape != (n, n):
        raise ShapeMismatch(f"attention {ad.value(sam).shape} vs {n} pixels")
    if not isinstance(alpha, ad.Tensor) and float(alpha) == 0.0:
        return feature
    lead = fv.shape[:-2]
    flat = ad.reshape(feature, (-1, n))
    mixed = ad.matmul(flat, ad.transpose(sam))
    return ad.reshape(ad.add(flat, ad.mul(alpha, mixed)), lead + fv.shape[-2:])


def select_depth_source(mode: str, inv_depth=None, depth_file=None) -> DepthRaster:
    """Depth for the attention matrix: a DPR1 file ("external") or the
    reciprocal of the current bundle-adjusted inverse depth ("ba")."""
    if mode == "external":
        if depth_file is None:
            raise MissingDepthFile("no depth file for this frame")
        return DepthRaster(read_depth(depth_file), "external")
    if mode == "ba":
        inv = np.asarray(inv_depth, dtype=np.float64)
        if not np.all(np.isfinite(inv)) or np.any(inv <= 0):
            raise DegenerateBADepth("inverse depth has non-positive or non-finite entries")
        return DepthRaster(1.0 / inv, "ba")
    raise ValueError(f"unknown depth source {mode!r}")
