"""Dense float64 array ops with an optional reverse-mode tape.

Every op accepts plain ``np.ndarray`` values or :class:`Tensor` nodes. Outside
a ``with Tape():`` block the ops are plain numpy and return arrays; inside, any
op touching a Tensor is recorded and returns a Tensor, so the same network code
serves both inference and gradient checks.

Channel axis is always ``-3``: rasters are (C, H, W) or (B, C, H, W).
"""

from __future__ import annotations

import contextvars
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeMismatch, TapeConsumed, UnknownWeight

_active_tape: contextvars.ContextVar = contextvars.ContextVar("stvo_tape", default=None)
_check_finite = False


def set_check_finite(enabled: bool) -> None:
    """Raise ``NonFiniteError`` whenever an op produces NaN/Inf."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"


def value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class Tape:
    """Single-owner record of executed ops. Use as a context manager."""

    def __init__(self):
        self.ops = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def watch(self, x, name=None) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(x, name)

    def record(self, out: Tensor, inputs, vjp):
        self.ops.append((out, inputs, vjp))

    def backward(self, loss: Tensor, loss_grad=None):
        """Accumulate ``.grad`` on every Tensor reachable from ``loss``."""
        if self.consumed:
            raise TapeConsumed("backward already ran on this tape")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.value) if loss_grad is None
                 else np.asarray(loss_grad, dtype=np.float64).reshape(loss.value.shape)}
        nodes = {id(loss): loss}
        for out, inputs, vjp in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for inp, gi in zip(inputs, vjp(g)):
                if not isinstance(inp, Tensor) or gi is None:
                    continue
                nodes[id(inp)] = inp
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        # whatever remains was never produced by a recorded op: leaves
        for key, g in grads.items():
            nodes[key].grad = g
        return {nodes[k]: g for k, g in grads.items()}

    @staticmethod
    def grad(x: Tensor):
        return np.zeros_like(x.value) if x.grad is None else x.grad


def backward(tape: Tape, loss: Tensor, loss_grad=None):
    return tape.backward(loss, loss_grad)


def _emit(val, inputs, vjp):
    if _check_finite and not np.all(np.isfinite(val)):
        raise NonFiniteError("non-finite value produced")
    tape = _active_tape.get()
    if tape is None or not any(isinstance(i, Tensor) for i in inputs):
        return val
    out = Tensor(val)
    tape.record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = value(a), value(b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def one_minus(a):
    return _emit(1.0 - value(a), (a,), lambda g: (-g,))


def relu(x):
    xv = value(x)
    return _emit(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def sigmoid(x):
    xv = value(x)
    y = np.empty_like(xv)
    pos = xv >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(value(x))
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def sum(x):
    xv = value(x)
    return _emit(np.asarray(xv.sum()), (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def mean_of(items):
    """Elementwise mean of equally shaped arrays."""
    vals = [value(i) for i in items]
    n = len(vals)
    out = vals[0].copy()
    for v in vals[1:]:
        out = out + v
    out = out / n
    return _emit(out, tuple(items), lambda g: tuple(g / n for _ in items))


# ---------------------------------------------------------------- structural

def concat(items, axis=-3):
    vals = [value(i) for i in items]
    sizes = [v.shape[axis] for v in vals]
    out = np.concatenate(vals, axis=axis)

    def vjp(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _emit(out, tuple(items), vjp)


def split(x, sizes, axis=-3):
    xv = value(x)
    if np.sum(sizes) != xv.shape[axis]:
        raise ShapeMismatch(f"split sizes {sizes} vs axis length {xv.shape[axis]}")
    bounds = np.cumsum(sizes)[:-1]
    parts = np.split(xv, bounds, axis=axis)
    outs = []
    start = 0
    for n, part in zip(sizes, parts):
        lo = start

        def vjp(g, lo=lo, n=n):
            full = np.zeros_like(xv)
            idx = [slice(None)] * xv.ndim
            idx[axis] = slice(lo, lo + n)
            full[tuple(idx)] = g
            return (full,)

        outs.append(_emit(part.copy(), (x,), vjp))
        start += n
    return outs


def reshape(x, shape):
    xv = value(x)
    return _emit(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x):
    return _emit(value(x).T.copy(), (x,), lambda g: (g.T,))


def matmul(a, b):
    av, bv = value(a), value(b)
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# ---------------------------------------------------------------- conv

def _pad(xv, p, mode):
    if p == 0:
        return xv
    widths = [(0, 0)] * (xv.ndim - 2) + [(p, p), (p, p)]
    return np.pad(xv, widths, mode="edge" if mode == "replicate" else "constant")


def _unpad(g, p, mode, H, W):
    if p == 0:
        return g
    if mode != "replicate":
        return g[..., p:p + H, p:p + W]
    gh = g[..., p:p + H, :].copy()
    gh[..., 0, :] += g[..., :p, :].sum(axis=-2)
    gh[..., -1, :] += g[..., p + H:, :].sum(axis=-2)
    gw = gh[..., :, p:p + W].copy()
    gw[..., :, 0] += gh[..., :, :p].sum(axis=-1)
    gw[..., :, -1] += gh[..., :, p + W:].sum(axis=-1)
    return gw


def conv2d(x, kernel, bias=None, stride=1, padding="same", padding_mode="zeros"):
    """Cross-correlation. ``x`` is (C, H, W) or (B, C, H, W); kernel (O, C, k, k)."""
    xv, kv = value(x), value(kernel)
    squeeze = xv.ndim == 3
    x4 = xv[None] if squeeze else xv
    O, C, kh, kw = kv.shape
    if kh % 2 == 0 or kw != kh:
        raise ShapeMismatch(f"kernel must be square and odd, got {kv.shape}")
    if x4.shape[1] != C:
        raise ShapeMismatch(f"input has {x4.shape[1]} channels, kernel expects {C}")
    if padding == "same":
        p = kh // 2
    elif padding == "valid":
        p = 0
    else:
        p = int(padding)
    B, _, H, W = x4.shape
    xp = _pad(x4, p, padding_mode)
    Ho = (H + 2 * p - kh) // stride + 1
    Wo = (W + 2 * p - kw) // stride + 1
    s = stride
    out = np.zeros((O, B, Ho, Wo))
    for dy in range(kh):
        for dx in range(kw):
            sl = xp[:, :, dy:dy + s * (Ho - 1) + 1:s, dx:dx + s * (Wo - 1) + 1:s]
            out += np.tensordot(kv[:, :, dy, dx], sl, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + value(bias)[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gt = g4.transpose(1, 0, 2, 3)  # O, B, Ho, Wo
        gk = np.zeros_like(kv)
        gxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                sl = xp[:, :, dy:dy + s * (Ho - 1) + 1:s, dx:dx + s * (Wo - 1) + 1:s]
                gk[:, :, dy, dx] = np.tensordot(gt, sl, axes=([1, 2, 3], [0, 2, 3]))
                contrib = np.tensordot(kv[:, :, dy, dx], gt, axes=([0], [0]))  # C, B, Ho, Wo
                gxp[:, :, dy:dy + s * (Ho - 1) + 1:s, dx:dx + s * (Wo - 1) + 1:s] += \
                    contrib.transpose(1, 0, 2, 3)
        gx = _unpad(gxp, p, padding_mode, H, W)
        if squeeze:
            gx = gx[0]
        gb = None if bias is None else g4.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _emit(out[0] if squeeze else out, (x, kernel, bias), vjp)


# ---------------------------------------------------------------- attention / sampling

def softmax_rows(m):
    mv = value(m)
    e = np.exp(mv - mv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (m,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def _bilinear_setup(H, W, fv):
    xs = np.arange(W, dtype=np.float64)[None, :] + fv[..., 0, :, :]
    ys = np.arange(H, dtype=np.float64)[:, None] + fv[..., 1, :, :]
    mask = (xs >= 0) & (xs <= W - 1) & (ys >= 0) & (ys <= H - 1)
    xc = np.clip(xs, 0, W - 1)
    yc = np.clip(ys, 0, H - 1)
    x0 = np.clip(np.floor(xc), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(H - 2, 0)).astype(np.int64)
    ax = xc - x0
    ay = yc - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    return mask, x0, x1, y0, y1, ax, ay


def bilinear_warp(field, flow):
    """Sample ``field`` at ``pixel + flow``.

    A sample is valid when the target lies inside [0, W-1] x [0, H-1]; invalid
    samples are zero and reported False in the returned mask. ``field`` is
    (C, H, W) or (B, C, H, W) with flow (2, H, W) or (B, 2, H, W).
    """
    F, fl = value(field), value(flow)
    squeeze = F.ndim == 3
    F4 = F[None] if squeeze else F
    fl4 = fl[None] if fl.ndim == 3 else fl
    B, C, H, W = F4.shape
    if fl4.shape[-3:] != (2, H, W):
        raise ShapeMismatch(f"flow {fl.shape} does not match field {F.shape}")
    if fl4.shape[0] != B:
        fl4 = np.broadcast_to(fl4, (B, 2, H, W))
    mask, x0, x1, y0, y1, ax, ay = _bilinear_setup(H, W, fl4)
    bi = np.arange(B)[:, None, None]

    def gather(yy, xx):
        return F4[bi, :, yy, xx].transpose(0, 3, 1, 2)  # B, C, H, W

    f00, f01, f10, f11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    w00 = ((1 - ax) * (1 - ay))[:, None]
    w01 = (ax * (1 - ay))[:, None]
    w10 = ((1 - ax) * ay)[:, None]
    w11 = (ax * ay)[:, None]
    m = mask[:, None]
    out = np.where(m, w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11, 0.0)

    def vjp(g):
        g4 = (g[None] if squeeze else g) * m
        gF = np.zeros_like(F4)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            contrib = (g4 * ww).transpose(0, 2, 3, 1)  # B, H, W, C
            np.add.at(gF, (np.broadcast_to(bi, yy.shape), slice(None), yy, xx),
                      contrib)
        # d/dx and d/dy of the interpolant (zero on clamped or invalid samples)
        dx = ((1 - ay)[:, None] * (f01 - f00) + ay[:, None] * (f11 - f10))
        dy = ((1 - ax)[:, None] * (f10 - f00) + ax[:, None] * (f11 - f01))
        gfl = np.stack([(g4 * dx).sum(axis=1), (g4 * dy).sum(axis=1)], axis=1)
        if fl.ndim == 3:
            gfl = gfl.sum(axis=0)
        return (gF[0] if squeeze else gF), gfl

    res = _emit(out[0] if squeeze else out, (field, flow), vjp)
    return res, (mask[0] if squeeze else mask)


# ---------------------------------------------------------------- composite

def gru_cell(h, x, weights, prefix="gru"):
    """Convolutional GRU with 3x3 gates over concat(h, x)."""
    hv, xv = value(h), value(x)
    if hv.shape[-2:] != xv.shape[-2:]:
        raise ShapeMismatch(f"hidden {hv.shape} and input {xv.shape} spatial dims differ")
    hx = concat([h, x])
    z = sigmoid(conv2d(hx, weights[f"{prefix}.z.weight"], weights[f"{prefix}.z.bias"]))
    r = sigmoid(conv2d(hx, weights[f"{prefix}.r.weight"], weights[f"{prefix}.r.bias"]))
    q = tanh(conv2d(concat([mul(r, h), x]), weights[f"{prefix}.q.weight"],
                    weights[f"{prefix}.q.bias"]))
    return add(mul(one_minus(z), h), mul(z, q))


# ---------------------------------------------------------------- weights

_MAGIC = b"STVW"


class WeightStore:
    """Named parameter map. Unknown names raise instead of defaulting."""

    def __init__(self, tensors=None, seed=None, init_scheme="kaiming_uniform"):
        self._t = dict(tensors or {})
        self.seed = seed
        self.init_scheme = init_scheme

    @classmethod
    def initialize(cls, specs, seed: int) -> "WeightStore":
        """``specs``: iterable of (name, shape, kind) with kind in
        {"kaiming", "zeros"}. Kaiming-uniform uses fan_in = prod(shape[1:])
        unless the shape is 2-D (in, out), where fan_in = shape[0]."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape, kind in specs:
            if kind == "zeros":
                tensors[name] = np.zeros(shape)
                continue
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(tensors, seed=seed)

    def __getitem__(self, name):
        try:
            return self._t[name]
        except KeyError:
            raise UnknownWeight(name) from None

    def __setitem__(self, name, val):
        self._t[name] = val

    def __contains__(self, name):
        return name in self._t

    def __len__(self):
        return len(self._t)

    def names(self):
        return sorted(self._t)

    def items(self):
        return ((n, self._t[n]) for n in self.names())

    def watched(self, tape: Tape, names=None) -> "WeightStore":
        """Copy whose selected entries are Tensor leaves of ``tape``."""
        chosen = set(self._t if names is None else names)
        out = {n: (tape.watch(value(v), n) if n in chosen else v) for n, v in self._t.items()}
        return WeightStore(out, self.seed, self.init_scheme)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", len(self._t)))
            for name in self.names():
                arr = np.ascontiguousarray(value(self._t[name]), dtype="<f8")
                raw = name.encode("utf-8")
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        data = Path(path).read_bytes()
        if data[:4] != _MAGIC:
            raise FormatError(f"{path}: not an STVW weight file")
        (count,) = struct.unpack_from("<I", data, 4)
        off = 8
        tensors = {}
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", data, off)
                off += 2
                name = data[off:off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<B", data, off)
                off += 1
                dims = struct.unpack_from(f"<{rank}I", data, off)
                off += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims)
                off += 8 * size
                tensors[name] = arr.astype(np.float64)
        except (struct.error, ValueError) as e:
            raise FormatError(f"{path}: truncated weight file") from e
        if off != len(data):
            raise FormatError(f"{path}: {len(data) - off} trailing bytes")
        return cls(tensors, init_scheme="file")


# ---------------------------------------------------------------- verification

def gradient_check(fn, inputs, h=1e-5, seed=0, check=None):
    """Compare tape gradients of ``sum(fn(*inputs) * c)`` (random ``c``) with
    central differences. Returns the worst relative error over the inputs in
    ``check`` (default: all)."""
    arrays = [np.array(value(x), dtype=np.float64) for x in inputs]
    check = range(len(arrays)) if check is None else check
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        leaves = [tape.watch(a.copy()) for a in arrays]
        out = fn(*leaves)
        cot = rng.normal(size=value(out).shape)
        loss = sum(mul(out, cot))
    tape.backward(loss)

    def scalar(arrs):
        return float((value(fn(*arrs)) * cot).sum())

    worst = 0.0
    for k in check:
        analytic = Tape.grad(leaves[k])
        numeric = np.zeros_like(arrays[k])
        flat = numeric.reshape(-1)
        for idx in range(arrays[k].size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[idx] += h
            minus[k].reshape(-1)[idx] -= h
            flat[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
