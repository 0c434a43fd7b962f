"""Timestamp association, similarity alignment and absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NoAssociations

MAX_DT = 0.02


@dataclass
class AteResult:
    rmse: float
    mean: float
    median: float
    max: float
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    pairs: list
    errors: np.ndarray


def associate(est_ts, gt_ts, max_dt: float = MAX_DT):
    """Greedy one-to-one nearest-timestamp matching.

    Candidate pairs within ``max_dt`` are taken in order of increasing time
    difference (ties broken by index). Returns (est_idx, gt_idx) pairs sorted by
    estimate index.
    """
    est_ts = np.asarray(est_ts, float)
    gt_ts = np.asarray(gt_ts, float)
    if est_ts.size == 0 or gt_ts.size == 0:
        raise NoAssociations("empty trajectory")
    diff = np.abs(est_ts[:, None] - gt_ts[None, :])
    ei, gi = np.nonzero(diff <= max_dt)
    order = np.lexsort((gi, ei, diff[ei, gi]))
    used_e, used_g, pairs = set(), set(), []
    for k in order:
        a, b = int(ei[k]), int(gi[k])
        if a in used_e or b in used_g:
            continue
        used_e.add(a)
        used_g.add(b)
        pairs.append((a, b))
    if not pairs:
        raise NoAssociations(f"no timestamps within {max_dt} s")
    return sorted(pairs)


def umeyama_align(est, gt, with_scale: bool = True):
    """Least-squares (s, R, t) with gt ~ s * R @ est + t and det(R) = +1."""
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DegenerateConfiguration(f"point sets must be matching (N, 3); got {est.shape}, {gt.shape}")
    n = est.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {n}")
    mu_e, mu_g = est.mean(0), gt.mean(0)
    xe, xg = est - mu_e, gt - mu_g
    sv = np.linalg.svd(xe, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateConfiguration("estimate points are collinear")
    cov = xg.T @ xe / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_e = np.sum(xe * xe) / n
    s = float(np.trace(np.diag(D) @ S) / var_e) if with_scale else 1.0
    t = mu_g - s * R @ mu_e
    return s, R, t


def camera_centers(traj):
    """World-frame positions from (timestamp, camera-to-world Pose) rows."""
    return np.array([p.t for _, p in traj], dtype=float).reshape(-1, 3)


def ate(est, gt, max_dt: float = MAX_DT, with_scale: bool = True) -> AteResult:
    """Trajectories are lists of (timestamp, camera-to-world Pose), as in TUM files."""
    pairs = associate([t for t, _ in est], [t for t, _ in gt], max_dt)
    pe = camera_centers(est)[[a for a, _ in pairs]]
    pg = camera_centers(gt)[[b for _, b in pairs]]
    s, R, t = umeyama_align(pe, pg, with_scale)
    err = np.linalg.norm(pg - (s * pe @ R.T + t), axis=1)
    return AteResult(float(np.sqrt(np.mean(err ** 2))), float(err.mean()), float(np.median(err)),
                     float(err.max()), s, R, t, pairs, err)
