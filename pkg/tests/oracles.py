"""Naive scalar-loop reference implementations used as test oracles."""

import math

import numpy as np


def conv2d_loops(x, k, b=None, stride=1, pad=0):
    C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if b is None else b[o]
                for c in range(C):
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += k[o, c, dy, dx] * xp[c, i * stride + dy, j * stride + dx]
                out[o, i, j] = acc
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_loops(h, x, w, prefix="gru"):
    hx = np.concatenate([h, x])
    z = conv2d_loops(hx, w[f"{prefix}.z.weight"], w[f"{prefix}.z.bias"], pad=1)
    r = conv2d_loops(hx, w[f"{prefix}.r.weight"], w[f"{prefix}.r.bias"], pad=1)
    z = np.vectorize(sigmoid)(z)
    r = np.vectorize(sigmoid)(r)
    q = np.tanh(conv2d_loops(np.concatenate([r * h, x]), w[f"{prefix}.q.weight"],
                             w[f"{prefix}.q.bias"], pad=1))
    out = np.zeros_like(h)
    for idx in np.ndindex(h.shape):
        out[idx] = (1 - z[idx]) * h[idx] + z[idx] * q[idx]
    return out


def bilinear_sample(img, x, y):
    """Sample a (H, W) raster at (x, y); None when outside [0,W-1]x[0,H-1]."""
    H, W = img.shape
    if not (0 <= x <= W - 1 and 0 <= y <= H - 1):
        return None
    x0 = min(int(math.floor(x)), W - 2)
    y0 = min(int(math.floor(y)), H - 2)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x0 + 1]
            + (1 - ax) * ay * img[y0 + 1, x0] + ax * ay * img[y0 + 1, x0 + 1])


def ba_cost_loops(problem, valid):
    """Scalar loop over edges, pixels and axes of w * (P_hat - P_tilde)^2."""
    cam = problem.camera
    total = 0.0
    for e, ok in zip(problem.edges, valid):
        T = problem.poses[e.j].matrix() @ np.linalg.inv(problem.poses[e.i].matrix())
        for y in range(cam.height):
            for x in range(cam.width):
                if not ok[y, x]:
                    continue
                d = problem.inv_depths[e.i][y, x]
                X = np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0, d])
                Y = T @ X
                u = cam.fx * Y[0] / Y[2] + cam.cx
                v = cam.fy * Y[1] / Y[2] + cam.cy
                for a, p in enumerate((u, v)):
                    w = e.weight[a, y, x]
                    if w >= 1e-4:
                        total += w * (p - e.target[a, y, x]) ** 2
    return total


def dense_ba_step(problem, valid, lam_p, lam_d):
    """Brute-force damped Gauss-Newton step: full Jacobian, no Schur complement."""
    from stvo.lie import pixel_grid, reproject_dense, reprojection_jacobians_dense

    cam = problem.camera
    n = len(problem.poses)
    HW = cam.height * cam.width
    free = [k for k in range(n) if k not in problem.fixed]
    pcol = {k: 6 * c for c, k in enumerate(free)}
    P = 6 * len(free)
    N = P + n * HW
    pix = np.moveaxis(pixel_grid(cam.height, cam.width), 0, -1).reshape(-1, 2)
    rows_J, rows_r, rows_w = [], [], []
    for e, ok in zip(problem.edges, valid):
        sel = np.flatnonzero(ok.reshape(-1))
        gi, gj = problem.poses[e.i], problem.poses[e.j]
        d = problem.inv_depths[e.i].reshape(-1)[sel]
        uv, _ = reproject_dense(gj * gi.inverse(), d, pix[sel], cam)
        Ji, Jj, Jd = reprojection_jacobians_dense(gi, gj, d, pix[sel], cam)
        for m, p in enumerate(sel):
            for a in range(2):
                row = np.zeros(N)
                if e.i in pcol:
                    row[pcol[e.i]:pcol[e.i] + 6] += Ji[m, a]
                if e.j in pcol:
                    row[pcol[e.j]:pcol[e.j] + 6] += Jj[m, a]
                row[P + e.i * HW + p] = Jd[m, a]
                w = e.weight[a].reshape(-1)[p]
                rows_J.append(row)
                rows_r.append(uv[m, a] - e.target[a].reshape(-1)[p])
                rows_w.append(w if w >= 1e-4 else 0.0)
    J = np.array(rows_J).reshape(-1, N)
    r = np.array(rows_r)
    w = np.array(rows_w)
    H = J.T @ (w[:, None] * J)
    g = J.T @ (w * r)
    diag = np.diag(H).copy()
    H[np.arange(P), np.arange(P)] += lam_p * diag[:P]
    H[np.arange(P, N), np.arange(P, N)] *= 1.0 + lam_d
    keep = np.concatenate([np.ones(P, bool), diag[P:] > 0])
    x = np.zeros(N)
    x[keep] = np.linalg.solve(H[np.ix_(keep, keep)], -g[keep])
    return x[:P].reshape(-1, 6), [x[P + k * HW:P + (k + 1) * HW] for k in range(n)]
