"""Fast built-in sanity checks exposed as ``stvo selftest``.

Each check returns (name, passed, detail). They cover a small sample of the
invariants the test suite exercises in depth and finish in a few seconds.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import lie, synth
from .dba import BAEdge, BAProblem, run_dba
from .evaluate import umeyama_align
from .spatial import build_sam, sam_specs


def check_se3_roundtrip(rng, n=1000):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    w = axis * rng.uniform(0, 3.1, (n, 1))   # stay below pi where log is single-valued
    xi = np.concatenate([rng.normal(0, 1, (n, 3)), w], axis=1)
    err = max(np.abs(lie.log(lie.exp(x)) - x).max() for x in xi)
    return "se3_exp_log", err < 1e-9, f"max err {err:.2e}"


def check_sam_rows(rng, n=20):
    w = ad.WeightStore.initialize(sam_specs(8), seed=int(rng.integers(1 << 30)))
    err = 0.0
    for _ in range(n):
        sam = build_sam(rng.uniform(0.2, 10, (4, 5)), w)
        err = max(err, np.abs(sam.sum(axis=1) - 1).max())
    return "sam_row_stochastic", err < 1e-10, f"max row err {err:.2e}"


def check_umeyama(rng):
    pts = rng.normal(size=(20, 3))
    q = rng.normal(size=4)
    R = lie.quat_to_matrix(q / np.linalg.norm(q))
    s, R2, t2 = umeyama_align(pts, 2.5 * pts @ R.T + [1.0, -2.0, 3.0])
    err = max(abs(s - 2.5), np.abs(R2 - R).max(), np.abs(t2 - [1.0, -2.0, 3.0]).max())
    return "umeyama_similarity", err < 1e-9, f"max err {err:.2e}"


def check_dba_two_frame(rng):
    scene = synth.make_scene(2, "zigzag", int(rng.integers(1000)), height=64, width=64, step=0.08)
    depths = [1.0 / synth.render(scene, k, image=False).depth for k in range(2)]
    edges = [BAEdge(i, j, *synth.oracle_correspondence(scene, i, j)) for i, j in ((0, 1), (1, 0))]
    noisy = lie.exp(np.r_[rng.normal(0, 0.01, 3), rng.normal(0, 0.005, 3)]) * scene.pose(1)
    prob = BAProblem([scene.pose(0), noisy], depths, edges, scene.feature_camera, optimize_depths=False)
    poses, _, _ = run_dba(prob, inner_iters=4, lam_p=0.0)
    err = float(np.abs(lie.log(poses[1] * scene.pose(1).inverse())).max())
    return "dba_pose_recovery", err < 1e-6, f"pose err {err:.2e}"


CHECKS = (check_se3_roundtrip, check_sam_rows, check_umeyama, check_dba_two_frame)


def run_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    return [check(rng) for check in CHECKS]
