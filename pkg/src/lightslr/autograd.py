"""Dense numpy tensors with a reverse-mode gradient tape.

Only the operations the three architectures need are provided. Every
operation checks shapes explicitly; the single broadcast allowed is the
per-channel bias/affine term inside ``dense``, ``conv1d``, ``conv2d`` and
``batch_norm``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, ShapeError, UsageError

_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic accessors -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation -----------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
        if self.data.ndim != 0:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward called on a tensor that is not part of a recorded graph")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


class Parameter(Tensor):
    """A trainable leaf tensor carrying its model path and Adam moment estimates."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def reset_optimizer_state(self):
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape).copy())


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 backward, "concat")


def split(a: Tensor, parts: int, axis: int = 1) -> list[Tensor]:
    """Split ``a`` into ``parts`` equal chunks along ``axis``."""
    if a.shape[axis] % parts:
        raise ShapeError(f"split: axis of size {a.shape[axis]} not divisible by {parts}")
    size = a.shape[axis] // parts
    out = []
    for i in range(parts):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * size, (i + 1) * size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        out.append(_make(a.data[index], (a,), backward, "split"))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = softmax_np(x.data, axis)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply ``x[N, C, T]`` by a per-channel gate ``[N, C]``."""
    if x.ndim != 3 or gate.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: input {x.shape} incompatible with gate {gate.shape}")
    gd = gate.data[:, :, None]

    def backward(g):
        return g * gd, np.sum(g * x.data, axis=2)

    return _make(x.data * gd, (x, gate), backward, "scale_channels")


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x[N, D_in]`` and ``weight[D_out, D_in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "dense")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation of ``x[N, C_in, T]`` with ``weight[C_out, C_in, k]``, zero padded."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected 3D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, t = x.shape
    c_out, wc, k = weight.shape
    if wc != c_in:
        raise ShapeError(f"conv1d: input {x.shape} has {c_in} channels, weight {weight.shape} expects {wc}")
    span = (k - 1) * dilation + 1
    if span > t + 2 * padding:
        raise ShapeError(f"conv1d: effective kernel {span} exceeds padded length {t + 2 * padding}")
    t_out = (t + 2 * padding - span) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    w2 = weight.data.reshape(c_out, c_in * k)
    if k == 1:
        cols = xp[:, :, : (t_out - 1) * stride + 1 : stride]
    else:
        cols = np.stack([xp[:, :, j * dilation: j * dilation + (t_out - 1) * stride + 1: stride]
                         for j in range(k)], axis=2).reshape(n, c_in * k, t_out)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w2.T, g)
        if k == 1 and stride == 1:
            gxp = gcols
        else:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gcols = gcols.reshape(n, c_in, k, t_out)
            for j in range(k):
                gxp[:, :, j * dilation: j * dilation + (t_out - 1) * stride + 1: stride] += gcols[:, :, j]
        gx = gxp[:, :, padding: padding + t] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv1d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1),
           padding=(0, 0)) -> Tensor:
    """2D cross-correlation of ``x[N, C_in, H, W]`` with ``weight[C_out, C_in, kH, kW]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    if wc != c_in:
        raise ShapeError(f"conv2d: input {x.shape} has {c_in} channels, weight {weight.shape} expects {wc}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} exceeds padded input {(h + 2 * ph, w + 2 * pw)}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw][:, :, :ho, :wo]  # N, C, Ho, Wo, kH, kW
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c_in * kh * kw, ho * wo)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, c_out, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c_in, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i: i + (ho - 1) * sh + 1: sh, j: j + (wo - 1) * sw + 1: sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph: ph + h, pw: pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the (biased) batch statistics normalize the input and
    ``running_mean``/``running_var`` are updated in place as
    ``(1 - momentum) * old + momentum * batch``.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"batch_norm: input {x.shape} incompatible with affine {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    m = x.data.size // x.shape[1]
    g_ = gamma.data.reshape(bshape)
    if training:
        if m == 1:
            raise InvalidInputError("batch_norm: cannot compute batch statistics from a single value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mu.astype(x.dtype).reshape(bshape)) * inv_std
    out = xhat * g_ + beta.data.reshape(bshape)

    def backward(g):
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dxhat = g * g_
        if training:
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm")


VAR_FLOOR = 1e-8


def stats_pool(x: Tensor, weights: Tensor | None = None) -> Tensor:
    """Concatenate per-channel (weighted) mean and standard deviation: ``[N, C, T] -> [N, 2C]``.

    ``weights`` may be ``[N, T]`` (shared across channels) or ``[N, C, T]``
    (per channel); weights must sum to 1 over time. Without weights every
    frame counts ``1/T``. Variance is floored at 1e-8 before the square root.
    """
    if x.ndim != 3:
        raise ShapeError(f"stats_pool: expected [N, C, T], got {x.shape}")
    n, c, t = x.shape
    if t == 0:
        raise InvalidInputError("stats_pool: no frames to pool")
    if weights is None:
        w = np.full((1, 1, t), 1.0 / t, dtype=x.dtype)
    else:
        if weights.shape not in ((n, t), (n, c, t)):
            raise ShapeError(f"stats_pool: weights {weights.shape} incompatible with input {x.shape}")
        w = weights.data[:, None, :] if weights.ndim == 2 else weights.data
        if not np.allclose(w.sum(axis=-1), 1.0, rtol=0.0, atol=1e-6):
            raise InvalidInputError("stats_pool: weights must sum to 1 over time")
    xd = x.data
    mu = np.sum(w * xd, axis=2, keepdims=True)
    dev = xd - mu
    var = np.sum(w * dev * dev, axis=2, keepdims=True)
    floored = var < VAR_FLOOR
    std = np.sqrt(np.where(floored, VAR_FLOOR, var))
    out = np.concatenate([mu[..., 0], std[..., 0]], axis=1)

    def backward(g):
        g_mu = g[:, :c, None]
        g_var = np.where(floored, 0.0, g[:, c:, None] / (2.0 * std))
        # residual term vanishes when the weights sum exactly to one
        r = np.sum(w * dev, axis=2, keepdims=True)
        gx = w * (g_mu + 2.0 * g_var * (dev - r))
        grads = [gx]
        if weights is not None:
            gw = g_mu * xd + g_var * (dev * dev - 2.0 * xd * r)
            grads.append(gw.sum(axis=1) if weights.ndim == 2 else gw)
        return grads

    parents = (x,) if weights is None else (x, weights)
    return _make(out, parents, backward, "stats_pool")
