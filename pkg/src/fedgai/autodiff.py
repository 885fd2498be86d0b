"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward rule on the output tensor when
gradient recording is enabled and at least one input requires a gradient.
:func:`backward` orders the recorded graph topologically and runs each rule
exactly once.

Broadcasting is deliberately limited to scalars and per-channel affine
parameters so every backward rule stays easy to audit.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "transpose_last",
    "linear",
    "conv2d",
    "depthwise_conv2d",
    "depthwise_separable_conv2d",
    "upsample_nearest2x",
    "maxpool2x2",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "log",
    "clamp",
    "batch_norm2d",
    "channel_mean_std",
    "standardize_columns",
    "global_avg_pool",
    "mse",
    "cosine_similarity",
    "frobenius_norm_sq",
    "reshape",
    "concat_channels",
    "tensor_sum",
    "tensor_mean",
    "spectral_normalize",
    "MacCounter",
]


class ShapeError(ValueError):
    """Raised when an op receives operands whose shapes do not conform."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class MacCounter:
    """Counts multiply-accumulates executed by conv and dense ops.

    Used as a context manager; counts are per-sample (divided by batch size)
    so they can be compared against closed-form per-image counts.
    """

    def __init__(self) -> None:
        self.macs = 0

    def __enter__(self) -> "MacCounter":
        stack = getattr(_state, "counters", None)
        if stack is None:
            stack = _state.counters = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.counters.remove(self)


def _count(macs_per_sample: int) -> None:
    for counter in getattr(_state, "counters", ()):
        counter.macs += int(macs_per_sample)


class Tensor:
    """A float64 array that may take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data + float(s), (a,), lambda g: (g,), "add_scalar")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# --- reductions and reshapes -------------------------------------------------


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1. All other extents must match."""
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape mismatch {ref} vs {x.shape}")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _make(
        out,
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
        "gap",
    )


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D operands or 3-D operands sharing a batch extent."""
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] or (
        a.ndim == 3 and a.shape[0] != b.shape[0]
    ):
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    _count(m * k * n)

    def rule(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return _make(np.matmul(ad, bd), (a, b), rule, "matmul")


def transpose_last(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), lambda g: (np.swapaxes(g, -1, -2),), "T")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Dense layer ``x @ w.T + b`` with ``x`` (N, in), ``w`` (out, in), ``b`` (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    _count(w.shape[0] * w.shape[1])
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def rule(g):
        gx = g @ wd
        gw = g.T @ xd
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, rule, "linear")


# --- convolution ---------------------------------------------------------------


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols: np.ndarray, xp_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    gxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i * k + j]
    return gxp


def _out_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation. ``x`` (N, Cin, H, W), ``w`` (Cout, Cin, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} vs weight {w.shape}")
    n, cin, h, wd_ = x.shape
    cout, _, k, _ = w.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd_, k, stride, padding)
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo).reshape(n, cin * k * k, ho * wo)
    wmat = w.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    _count(cout * cin * k * k * ho * wo)

    def rule(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(n, cin, k * k, ho, wo)
            gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd_] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, rule, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel spatial filtering. ``w`` (C, 1, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: shape mismatch {x.shape} vs {w.shape}")
    n, c, h, wd_ = x.shape
    k = w.shape[2]
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd_, k, stride, padding)
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)  # (n, c, kk, ho, wo)
    wk = w.data.reshape(c, k * k)
    out = np.einsum("nckhw,ck->nchw", cols, wk)
    _count(c * k * k * ho * wo)

    def rule(g):
        gw = np.einsum("nckhw,nchw->ck", cols, g).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.einsum("nchw,ck->nckhw", g, wk)
            gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd_] if padding else gxp
        return gx, gw

    return _make(out, (x, w), rule, "depthwise_conv2d")


def depthwise_separable_conv2d(
    x: Tensor, w_depth: Tensor, w_point: Tensor, b: Tensor | None = None, stride: int = 1
) -> Tensor:
    """Depthwise k x k (padding 1) followed by a 1 x 1 pointwise conv."""
    return conv2d(depthwise_conv2d(x, w_depth, stride=stride, padding=1), w_point, b, stride=1, padding=0)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected 4-D input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return _make(
        out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x"
    )


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial extent must be even, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))

    def rule(g):
        # ties route the gradient to the first maximal element only
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        pick = np.zeros(flat.shape, dtype=bool)
        idx = flat.argmax(axis=-1)
        np.put_along_axis(pick, idx[..., None], True, axis=-1)
        pick = pick.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return ((pick * g[:, :, :, None, :, None]).reshape(n, c, h, w),)

    return _make(out, (x,), rule, "maxpool2x2")


# --- normalisation -----------------------------------------------------------


def _channel_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"expected a 2-D or 4-D tensor, got shape {x.shape}")


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None, None] if ndim == 4 else v[None, :]


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
    track_running_stats: bool = True,
) -> Tensor:
    """Batch norm over (N, H, W) with population variance.

    In training mode the running buffers are updated in place (when given and
    ``track_running_stats``); in eval mode they normalise the input.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d: shape mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3)
    xd = x.data
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if track_running_stats and running_mean is not None:
            m = xd.size // xd.shape[1]
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            # running variance tracks the unbiased estimate
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def rule(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                m = xd.size // xd.shape[1]
                gx = (inv[None, :, None, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), rule, "batch_norm2d")


def channel_mean_std(x: Tensor, eps: float = 0.0) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population std over every axis except 1 (or 0 for 2-D input's columns).

    ``std = sqrt(var + eps)``; with ``eps=0`` a zero-variance channel has an
    undefined std gradient.
    """
    axes = _channel_axes(x.data)
    xd = x.data
    m = xd.size // xd.shape[1]
    mean = xd.mean(axis=axes)
    centered = xd - _per_channel(mean, xd.ndim)
    std = np.sqrt((centered**2).mean(axis=axes) + eps)

    mean_t = _make(
        mean, (x,), lambda g: (np.broadcast_to(_per_channel(g / m, xd.ndim), xd.shape).copy(),), "channel_mean"
    )

    def std_rule(g):
        safe = np.where(std > 0, std, np.inf)
        return (centered * _per_channel(g / (m * safe), xd.ndim),)

    std_t = _make(std, (x,), std_rule, "channel_std")
    return mean_t, std_t


def standardize_columns(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Z-score each column of a 2-D tensor (population std floored at ``eps``)."""
    if x.ndim != 2:
        raise ShapeError(f"standardize_columns: expected 2-D input, got {x.shape}")
    xd = x.data
    mean = xd.mean(axis=0)
    centered = xd - mean
    std = np.sqrt((centered**2).mean(axis=0))
    floored = std < eps
    denom = np.where(floored, eps, std)
    z = centered / denom

    def rule(g):
        # floored columns behave as a fixed divisor
        gz = g / denom
        proj = np.where(floored, 0.0, (g * z).mean(axis=0))
        return (gz - gz.mean(axis=0) - z * proj / denom,)

    return _make(z, (x,), rule, "standardize")


# --- losses and similarities ------------------------------------------------------


def mse(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mse", a, b)
    diff = a.data - b.data
    n = diff.size
    return _make(
        np.asarray((diff**2).mean()), (a, b), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n), "mse"
    )


def frobenius_norm_sq(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.asarray((ad**2).sum()), (a,), lambda g: (2.0 * g * ad,), "fro_sq")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine of two (N, d) tensors -> (N,).

    Rows with a zero norm get cosine 0 and a zero gradient.
    """
    _check_same("cosine_similarity", a, b)
    if a.ndim != 2:
        raise ShapeError(f"cosine_similarity: expected 2-D inputs, got {a.shape}")
    ad, bd = a.data, b.data
    na = np.linalg.norm(ad, axis=1)
    nb = np.linalg.norm(bd, axis=1)
    valid = (na > eps) & (nb > eps)
    na_s = np.where(valid, na, 1.0)
    nb_s = np.where(valid, nb, 1.0)
    dots = (ad * bd).sum(axis=1)
    cos = np.where(valid, dots / (na_s * nb_s), 0.0)

    def rule(g):
        gv = np.where(valid, g, 0.0)[:, None]
        ga = gv * (bd / (na_s * nb_s)[:, None] - cos[:, None] * ad / (na_s**2)[:, None])
        gb = gv * (ad / (na_s * nb_s)[:, None] - cos[:, None] * bd / (nb_s**2)[:, None])
        return ga, gb

    return _make(cos, (a, b), rule, "cosine")


# --- spectral normalisation ------------------------------------------------------


def spectral_normalize(weight: Tensor, u_state: np.ndarray, eps: float = 1e-12, update: bool = True) -> Tensor:
    """Divide ``weight`` by its largest singular value, estimated by one power iteration.

    ``weight`` is viewed as (out_features, rest). ``u_state`` is updated in
    place when ``update`` is true. The estimate is a constant for gradients.
    """
    out_features = weight.shape[0]
    if u_state.shape != (out_features,):
        raise ShapeError(f"spectral_normalize: u_state shape {u_state.shape} vs {out_features} rows")
    mat = weight.data.reshape(out_features, -1)
    v = mat.T @ u_state
    v = v / max(np.linalg.norm(v), eps)
    u = mat @ v
    u = u / max(np.linalg.norm(u), eps)
    sigma = max(float(u @ mat @ v), eps)
    if update:
        u_state[:] = u
    return scale(weight, 1.0 / sigma)
