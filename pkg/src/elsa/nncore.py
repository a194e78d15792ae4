"""Minimal deterministic reverse-mode autodiff engine on float64 numpy.

Reverse-mode tape with explicit topological order; no graph mutation
during backward.  Every forward op guards against NaN/Inf.  The scale is
deliberately small (toy encoders), so determinism and debuggability win
over throughput everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    pass


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """Value node on the tape; grad accumulates during backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data, parents, backward, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        _finite(data, op),
        requires_grad=requires,
        _parents=tuple(parents) if requires else (),
        _backward=backward if requires else None,
    )


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), bw, "scale")


def add_const(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g)

    return _node(a.data + c, (a,), bw, "add_const")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g / a.data)

    with np.errstate(invalid="ignore", divide="ignore"):
        out_data = np.log(a.data)
    return _node(out_data, (a,), bw, "log")


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), bw, "square")


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def bw(g):
        _accum(a, -g * out_data * out_data)

    return _node(out_data, (a,), bw, "reciprocal")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor

    def bw(g):
        _accum(a, g * mask)

    return _node(np.maximum(a.data, floor), (a,), bw, "clamp_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _node(np.maximum(a.data, 0.0), (a,), bw, "relu")


# ------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg / count, a.data.shape).copy())

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw, "mean")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)
    soft = ex / s

    def bw(g):
        _accum(a, np.expand_dims(g, axis) * soft)

    return _node(out_data, (a,), bw, "logsumexp")


# ------------------------------------------------------------ shape/layout


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def bw(g):
        _accum(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bw, "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(np.concatenate(datas, axis=axis), tuple(tensors), bw, "concat")


def take_rows(a: Tensor, indices) -> Tensor:
    """Row gather with accumulation on the backward pass (repeats allowed)."""
    idx = np.asarray(indices, dtype=int)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _node(a.data[idx], (a,), bw, "take_rows")


def take_diag(a: Tensor) -> Tensor:
    n, m = a.data.shape
    if n != m:
        raise ShapeMismatchError(f"take_diag needs a square matrix, got {a.data.shape}")

    def bw(g):
        buf = np.zeros_like(a.data)
        np.fill_diagonal(buf, g)
        _accum(a, buf)

    return _node(np.diagonal(a.data).copy(), (a,), bw, "take_diag")


# --------------------------------------------------------------- linear ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b); x is (..., in), w is (out, in), b is (out,)."""
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeMismatchError(
            f"linear input dim {x.data.shape} incompatible with weight {w.data.shape}"
        )
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def bw(g):
        _accum(x, g @ w.data)
        gflat = g.reshape(-1, g.shape[-1])
        xflat = x.data.reshape(-1, x.data.shape[-1])
        _accum(w, gflat.T @ xflat)
        if b is not None:
            _accum(b, gflat.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, bw, "linear")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    r = np.linalg.norm(a.data, axis=axis, keepdims=True)
    re = np.maximum(r, eps)
    out_data = a.data / re
    live = (r > eps).astype(float)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, (g - out_data * dot * live) / re)

    return _node(out_data, (a,), bw, "l2_normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch-free normalization over the last axis of each sample."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data
    n = x.data.shape[-1]

    def bw(g):
        gflat = g.reshape(-1, n)
        xhf = xhat.reshape(-1, n)
        _accum(gamma, (gflat * xhf).sum(axis=0))
        _accum(beta, gflat.sum(axis=0))
        gx = g * gamma.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, term * inv)

    return _node(out_data, (x, gamma, beta), bw, "layer_norm")


# -------------------------------------------------------------- conv/pool


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_spans(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"kernel ({kh}, {kw}) with stride {stride}, pad {pad} too large for input ({h}, {w})"
        )
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[0], xp.shape[1]
    i = stride * np.repeat(np.arange(ho), wo)
    j = stride * np.tile(np.arange(wo), ho)
    di = np.repeat(np.arange(kh), kw)
    dj = np.tile(np.arange(kw), kh)
    rows = i[:, None] + di[None, :]  # (L, kh*kw)
    cols = j[:, None] + dj[None, :]
    patches = xp[:, :, rows, cols]  # (B, C, L, kh*kw)
    return patches.transpose(0, 2, 1, 3).reshape(b, ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation), x (B,C,H,W), w (O,C,kh,kw)."""
    bs, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeMismatchError(f"conv2d channels differ: input {x.data.shape} vs kernel {w.data.shape}")
    ho, wo = _conv_spans(h, wd, kh, kw, stride, padding)
    xp = _pad_hw(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (B, L, C*kh*kw)
    wf = w.data.reshape(o, -1)
    out_data = (cols @ wf.T).transpose(0, 2, 1).reshape(bs, o, ho, wo)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def bw(g):
        gf = g.reshape(bs, o, -1).transpose(0, 2, 1)  # (B, L, O)
        _accum(w, np.einsum("blo,blk->ok", gf, cols).reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = gf @ wf  # (B, L, C*kh*kw)
            dxp = np.zeros_like(xp)
            i = stride * np.repeat(np.arange(ho), wo)
            j = stride * np.tile(np.arange(wo), ho)
            di = np.repeat(np.arange(kh), kw)
            dj = np.tile(np.arange(kw), kh)
            rows = i[:, None] + di[None, :]
            cols_idx = j[:, None] + dj[None, :]
            dpatches = dcols.reshape(bs, ho * wo, c, kh * kw).transpose(0, 2, 1, 3)
            np.add.at(dxp, (slice(None), slice(None), rows, cols_idx), dpatches)
            _accum(x, dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, bw, "conv2d")


def _pool_view(x: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatchError(f"pool size {k} must divide spatial dims of {x.shape}")
    return x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // k, w // k, k * k
    )


def max_pool2d(x: Tensor, k: int) -> Tensor:
    view = _pool_view(x.data, k)
    arg = view.argmax(axis=-1)
    out_data = np.take_along_axis(view, arg[..., None], axis=-1)[..., 0]
    b, c, ho, wo = out_data.shape

    def bw(g):
        dview = np.zeros_like(view)
        np.put_along_axis(dview, arg[..., None], g[..., None], axis=-1)
        dx = (
            dview.reshape(b, c, ho, wo, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(x.data.shape)
        )
        _accum(x, dx)

    return _node(out_data, (x,), bw, "max_pool2d")


def mean_pool2d(x: Tensor, k: int) -> Tensor:
    view = _pool_view(x.data, k)
    out_data = view.mean(axis=-1)
    b, c, ho, wo = out_data.shape

    def bw(g):
        dview = np.broadcast_to(g[..., None] / (k * k), view.shape)
        dx = (
            dview.reshape(b, c, ho, wo, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(x.data.shape)
        )
        _accum(x, dx.copy())

    return _node(out_data, (x,), bw, "mean_pool2d")


def global_mean_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) average over the spatial grid."""
    b, c, h, w = x.data.shape

    def bw(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return _node(x.data.mean(axis=(2, 3)), (x,), bw, "global_mean_pool")


# --------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class CosineSchedule:
    """lr(0) = peak, lr(total_steps) = floor, half-cosine in between."""

    peak: float
    floor: float
    total_steps: int

    def lr(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.peak
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return self.floor + 0.5 * (self.peak - self.floor) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Standard Adam over a named parameter dict; lr follows the schedule."""

    def __init__(
        self,
        params: dict[str, Tensor],
        schedule: CosineSchedule,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.schedule = schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def current_lr(self) -> float:
        return self.schedule.lr(self.step_count)

    def step(self) -> float:
        """One update over all parameters with gradients; returns the lr used."""
        lr = self.schedule.lr(self.step_count)
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.asarray(arrays[f"adam.m.{k}"], dtype=np.float64).reshape(
                self.m[k].shape
            )
            self.v[k] = np.asarray(arrays[f"adam.v.{k}"], dtype=np.float64).reshape(
                self.v[k].shape
            )
        self.step_count = step_count


# --------------------------------------------------------------- gradcheck


def gradcheck(
    fn,
    params: dict[str, Tensor],
    h: float = 1e-4,
    max_elements_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn rebuilds the graph and returns a scalar Tensor; params are the
    tensors to perturb (inputs and/or weights).  For large parameter sets
    max_elements_per_param limits the check to a seeded random subset of
    each tensor's elements.
    """
    zero_grads(params.values())
    loss = fn()
    backward(loss)
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, p in params.items():
        flat = p.data.ravel()
        if max_elements_per_param is not None and flat.size > max_elements_per_param:
            picks = rng.choice(flat.size, size=max_elements_per_param, replace=False)
        else:
            picks = np.arange(flat.size)
        num = np.zeros(len(picks))
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            num[j] = (up - down) / (2.0 * h)
        ga = analytic[k].ravel()[picks]
        denom = max(1.0, float(np.max(np.abs(ga))), float(np.max(np.abs(num))))
        worst = max(worst, float(np.max(np.abs(ga - num))) / denom)
    return worst
