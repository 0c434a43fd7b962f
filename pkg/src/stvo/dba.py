"""Confidence-weighted Gauss-Newton over poses and per-pixel inverse depths.

Depths are eliminated with a Schur complement per source frame (the depth
block is diagonal), the reduced pose system is solved by Cholesky.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import SingularSystem
from .lie import MIN_DEPTH, Camera, Pose, exp, in_frame, pixel_grid, reproject_dense, \
    reprojection_jacobians_dense

MIN_CONFIDENCE = 1e-4
DEPTH_BOUNDS = (1e-4, 1e4)
LAMBDA_POSE = 1e-4
LAMBDA_DEPTH = 1e-2
ESCALATIONS = 3


@dataclass
class BAEdge:
    i: int
    j: int
    target: np.ndarray   # (2, H, W) absolute target coordinates in frame j
    weight: np.ndarray   # (2, H, W) per-axis confidence


@dataclass
class BAProblem:
    poses: list
    inv_depths: list
    edges: list
    camera: Camera
    fixed: frozenset = frozenset({0})
    optimize_depths: bool = True

    def with_state(self, poses, inv_depths) -> "BAProblem":
        return replace(self, poses=list(poses), inv_depths=list(inv_depths))


@dataclass
class BAReport:
    costs_before: list = field(default_factory=list)
    costs_after: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    pose_norms: list = field(default_factory=list)
    depth_norms: list = field(default_factory=list)
    damping: list = field(default_factory=list)
    converged: bool = False
    frozen: list = field(default_factory=list)   # free poses held because nothing constrains them

    @property
    def accepted_costs(self):
        """Cost sequence along the accepted path: initial cost then each accepted step."""
        if not self.costs_before:
            return []
        out = [self.costs_before[0]]
        out += [a for a, ok in zip(self.costs_after, self.accepted) if ok]
        return out


@dataclass
class Linearization:
    free: list           # indices of optimised poses, in column order
    Hpp: np.ndarray      # (6F, 6F)
    gp: np.ndarray       # (6F,)
    Hdd: list            # per frame (HW,)
    gd: list             # per frame (HW,)
    C: list              # per frame (6F, HW) pose-depth coupling
    cost: float
    depths_free: bool = True


def _flat_pixels(cam: Camera):
    return np.moveaxis(pixel_grid(cam.height, cam.width), 0, -1).reshape(-1, 2)


def edge_weights(edge: BAEdge, valid):
    w = np.where(edge.weight >= MIN_CONFIDENCE, edge.weight, 0.0).reshape(2, -1).T
    return w * valid.reshape(-1, 1)


def valid_masks(problem: BAProblem):
    """Per-edge pixels that reproject in front of and inside frame j under the
    current state and carry some confidence."""
    cam = problem.camera
    pix = _flat_pixels(cam)
    out = []
    for e in problem.edges:
        g_ij = problem.poses[e.j] * problem.poses[e.i].inverse()
        d = problem.inv_depths[e.i].reshape(-1)
        uv, z = reproject_dense(g_ij, d, pix, cam)
        ok = (z > MIN_DEPTH * d) & in_frame(uv[:, 0], uv[:, 1], cam.width, cam.height)
        ok &= (e.weight.reshape(2, -1) >= MIN_CONFIDENCE).any(axis=0)
        out.append(ok.reshape(cam.height, cam.width))
    return out


def residuals(problem: BAProblem, valid=None):
    """Stacked sqrt-weighted residuals over valid pixels and the total cost.

    Returns ``(r, cost)`` with ``cost = sum(r**2) = sum(w * (P_hat - P_tilde)**2)``.
    A frozen ``valid`` pixel that falls behind camera j makes the cost infinite.
    """
    if valid is None:
        valid = valid_masks(problem)
    cam = problem.camera
    pix = _flat_pixels(cam)
    parts = []
    cost = 0.0
    for e, ok in zip(problem.edges, valid):
        sel = ok.reshape(-1)
        g_ij = problem.poses[e.j] * problem.poses[e.i].inverse()
        d = problem.inv_depths[e.i].reshape(-1)[sel]
        uv, z = reproject_dense(g_ij, d, pix[sel], cam)
        if np.any(z <= MIN_DEPTH * d):
            cost = np.inf
        r = uv - e.target.reshape(2, -1).T[sel]
        w = edge_weights(e, ok)[sel]
        rw = np.sqrt(w) * r
        parts.append(rw.reshape(-1))
        cost += float(np.sum(w * r * r))
    vec = np.concatenate(parts) if parts else np.zeros(0)
    return vec, cost


def linearize(problem: BAProblem, valid=None) -> Linearization:
    if valid is None:
        valid = valid_masks(problem)
    cam = problem.camera
    n = len(problem.poses)
    HW = cam.height * cam.width
    free = [k for k in range(n) if k not in problem.fixed]
    col = {k: 6 * c for c, k in enumerate(free)}
    P = 6 * len(free)
    Hpp = np.zeros((P, P))
    gp = np.zeros(P)
    Hdd = [np.zeros(HW) for _ in range(n)]
    gd = [np.zeros(HW) for _ in range(n)]
    C = [np.zeros((P, HW)) for _ in range(n)]
    pix = _flat_pixels(cam)
    cost = 0.0
    for e, ok in zip(problem.edges, valid):
        sel = np.flatnonzero(ok.reshape(-1))
        if sel.size == 0:
            continue
        gi, gj = problem.poses[e.i], problem.poses[e.j]
        d = problem.inv_depths[e.i].reshape(-1)[sel]
        uv, _ = reproject_dense(gj * gi.inverse(), d, pix[sel], cam)
        r = uv - e.target.reshape(2, -1).T[sel]
        w = edge_weights(e, ok)[sel]
        cost += float(np.sum(w * r * r))
        Ji, Jj, Jd = reprojection_jacobians_dense(gi, gj, d, pix[sel], cam)
        wr = w * r
        Hdd[e.i][sel] += np.sum(w * Jd * Jd, axis=1)
        gd[e.i][sel] += np.sum(wr * Jd, axis=1)
        blocks = [(k, J) for k, J in ((e.i, Ji), (e.j, Jj)) if k in col]
        for a, Ja in blocks:
            ra = slice(col[a], col[a] + 6)
            WJa = w[..., None] * Ja
            gp[ra] += np.einsum("nak,na->k", Ja, wr)
            C[e.i][ra, sel] += np.einsum("nak,na->kn", WJa, Jd)
            for b, Jb in blocks:
                rb = slice(col[b], col[b] + 6)
                Hpp[ra, rb] += np.einsum("nak,nal->kl", WJa, Jb)
    return Linearization(free, Hpp, gp, Hdd, gd, C, cost, problem.optimize_depths)


def solve_schur(lin: Linearization, lam_p=LAMBDA_POSE, lam_d=LAMBDA_DEPTH, escalations=ESCALATIONS):
    """Damped normal-equation solve. Returns (pose step (F, 6), depth steps, lambda used)."""
    P = lin.Hpp.shape[0]
    active, inv = [], []
    for H in lin.Hdd:
        a = (H > 0) & lin.depths_free
        active.append(a)
        inv.append(1.0 / (H[a] * (1.0 + lam_d)))
    S0 = lin.Hpp.copy()
    b = lin.gp.copy()
    for C, g, a, hi in zip(lin.C, lin.gd, active, inv):
        Ca = C[:, a]
        S0 -= (Ca * hi) @ Ca.T
        b -= Ca @ (g[a] * hi)
    dp = np.zeros(P)
    lam = lam_p
    if P:
        diag = np.diag(lin.Hpp).copy()
        for attempt in range(escalations + 1):
            S = S0 + np.diag(lam * diag)
            try:
                if not np.all(np.isfinite(S)):
                    raise LinAlgError("non-finite system")
                dp = cho_solve(cho_factor(S), -b)
                break
            except LinAlgError:
                if attempt == escalations:
                    raise SingularSystem(
                        f"reduced pose system not positive definite (lambda up to {lam:g})") from None
                lam *= 10.0
    dd = []
    for C, g, a, hi in zip(lin.C, lin.gd, active, inv):
        step = np.zeros_like(g)
        step[a] = -(g[a] + C[:, a].T @ dp) * hi
        dd.append(step)
    return dp.reshape(-1, 6), dd, lam


def retract(problem: BAProblem, free, dp, dd):
    """Apply ``exp(xi) * G`` to free poses and clamp updated inverse depths."""
    poses = list(problem.poses)
    for k, xi in zip(free, dp):
        poses[k] = exp(xi) * poses[k]
    depths = [np.clip(d + s.reshape(d.shape), *DEPTH_BOUNDS) for d, s in zip(problem.inv_depths, dd)]
    return poses, depths


def gauss_newton_step(problem: BAProblem, lam_p=LAMBDA_POSE, lam_d=LAMBDA_DEPTH, valid=None):
    """One damped step. Returns (pose updates {index: xi}, depth updates, BAReport)."""
    if valid is None:
        valid = valid_masks(problem)
    lin = linearize(problem, valid)
    dp, dd, lam = solve_schur(lin, lam_p, lam_d)
    poses, depths = retract(problem, lin.free, dp, dd)
    _, after = residuals(problem.with_state(poses, depths), valid)
    report = BAReport([lin.cost], [after], [after <= lin.cost], [float(np.linalg.norm(dp))],
                      [float(np.sqrt(sum(np.sum(s * s) for s in dd)))], [lam])
    return dict(zip(lin.free, dp)), [s.reshape(d.shape) for s, d in zip(dd, problem.inv_depths)], report


def unconstrained_poses(problem: BAProblem, valid=None):
    """Free poses with an all-zero direction in the Hessian diagonal."""
    lin = linearize(problem, valid)
    diag = np.diag(lin.Hpp).reshape(-1, 6)
    return sorted(k for k, dg in zip(lin.free, diag) if not np.all(dg > 0))


def run_dba(problem: BAProblem, inner_iters: int = 2, lam_p=LAMBDA_POSE, lam_d=LAMBDA_DEPTH,
            tol=1e-12, max_retries=ESCALATIONS, freeze_unconstrained: bool = False):
    """Repeated Levenberg-damped Gauss-Newton; rejected steps escalate damping x10.

    The valid pixel set is frozen at entry, so costs along accepted steps are
    comparable and never increase. Fixed poses are returned untouched. With
    ``freeze_unconstrained`` poses that no valid residual touches are held for
    this call instead of raising SingularSystem.
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    valid = valid_masks(problem)
    poses, depths = list(problem.poses), list(problem.inv_depths)
    report = BAReport()
    cur = problem
    if freeze_unconstrained:
        report.frozen = unconstrained_poses(problem, valid)
        if report.frozen:
            cur = replace(problem, fixed=frozenset(problem.fixed) | set(report.frozen))
    _, cost = residuals(cur, valid)
    lp, ld = lam_p, lam_d
    for _ in range(inner_iters):
        lin = linearize(cur, valid)
        if not np.isfinite(lin.cost):
            break
        accepted = False
        for _ in range(max_retries + 1):
            dp, dd, lam_used = solve_schur(lin, lp, ld)
            step = float(np.linalg.norm(dp)) + float(np.sqrt(sum(np.sum(s * s) for s in dd)))
            if step <= tol:
                report.converged = True
                accepted = True
                break
            new_poses, new_depths = retract(cur, lin.free, dp, dd)
            _, new_cost = residuals(cur.with_state(new_poses, new_depths), valid)
            ok = new_cost <= cost
            report.costs_before.append(cost)
            report.costs_after.append(new_cost)
            report.accepted.append(ok)
            report.pose_norms.append(float(np.linalg.norm(dp)))
            report.depth_norms.append(float(np.sqrt(sum(np.sum(s * s) for s in dd))))
            report.damping.append(lam_used)
            if ok:
                cur = cur.with_state(new_poses, new_depths)
                poses, depths, cost = new_poses, new_depths, new_cost
                lp, ld = max(lp / 10.0, lam_p), max(ld / 10.0, lam_d)
                accepted = True
                break
            lp, ld = lp * 10.0, ld * 10.0
        if report.converged or not accepted:
            report.converged = report.converged or not accepted
            break
    if not report.costs_before:
        report.costs_before.append(cost)
    return poses, depths, report
