"""Dense arrays with tape-based reverse-mode differentiation.

Every op takes :class:`Tensor` inputs, computes its result with numpy and, when
any input requires a gradient, records a closure mapping the upstream gradient
to gradients for its inputs.  :func:`backward` replays the tape in reverse
topological order and accumulates gradients into leaf tensors.

Image ops accept ``(C, H, W)`` or batched ``(N, C, H, W)`` arrays.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class EmptyMaskError(ValueError):
    """Raised when a masked loss is asked to score zero pixels."""

    def __init__(self, message: str = "empty brain mask"):
        super().__init__(message)


class Tensor:
    """N-dimensional real array with an optional gradient.

    Args:
        data: array-like contents; copied into a contiguous numpy array.
        requires_grad: whether gradients should be accumulated into ``grad``.
        dtype: numpy dtype, defaults to float32 unless ``data`` is float64.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32), dtype=dtype)


def _make(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``grad`` of every reachable leaf.

    Gradients add into an existing ``grad`` array, so fan-out contributions
    and repeated calls accumulate.  Parameters that should start from zero
    must be reset by the caller.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

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
        if node.is_leaf:
            if node.grad is None:
                node.grad = g.astype(node.data.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    return a, b


# ----------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _back(g):
        return np.split(g, bounds, axis=axis)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _back)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


# --------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    Args:
        x: ``(Cin, H, W)`` or ``(N, Cin, H, W)`` input.
        weight: ``(Cout, Cin, k, k)`` kernel, ``k`` odd.
        bias: ``(Cout,)`` or None.
        stride: step between output samples.
        pad: zero rows/columns added on every side.
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"weight must be (Cout, Cin, k, k), got {weight.shape}")
    cout, cin, k, _ = weight.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if pad < 0 or stride < 1:
        raise ValueError(f"invalid pad={pad} / stride={stride}")
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if c != cin:
        raise ValueError(f"input has {c} channels but weight expects {cin} (input {x.shape}, weight {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    span_h, span_w = h + 2 * pad - k, w + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(
            f"output size not integral: H={h}, W={w}, k={k}, pad={pad}, stride={stride}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xb.data.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = xb.data
    else:
        xp = np.ascontiguousarray(xb.data)
    sn, sc, sh, sw = xp.strides
    # (n, cin, k, k, ho, wo) view; the reshape below materializes the im2col matrix
    win = as_strided(xp, (n, cin, k, k, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    cols = win.reshape(n, cin * k * k, ho * wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    need_x = xb.requires_grad
    need_w = weight.requires_grad

    def _back(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if need_w:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if need_x:
            dcols = np.matmul(w2.T, g2).reshape(n, cin, k, k, ho, wo)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return gx, gw, gb

    parents = (xb, weight) if bias is None else (xb, weight, bias)
    return _unbatched(_make(out, parents, _back), squeeze)


# -------------------------------------------------------------------- pooling


def maxpool2d(x: Tensor, window: int = 2, return_indices: bool = False):
    """Non-overlapping max pooling.

    Ties resolve to the first element of the window in row-major order, and
    the gradient is routed to that element only.  With ``return_indices`` the
    flat within-window argmax array is returned alongside the output.
    """
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if h % window or w % window:
        raise ValueError(f"maxpool2d needs extents divisible by {window}, got {h}x{w}")
    ho, wo = h // window, w // window
    blocks = xb.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _back(g):
        scattered = np.zeros((n, c, ho, wo, window * window), dtype=g.dtype)
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        scattered = scattered.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (scattered.reshape(n, c, h, w),)

    y = _unbatched(_make(out, (xb,), _back), squeeze)
    if return_indices:
        return y, (idx[0] if squeeze else idx)
    return y


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each pixel into a ``factor x factor`` block."""
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    out = np.repeat(np.repeat(xb.data, factor, axis=2), factor, axis=3)

    def _back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _unbatched(_make(out, (xb,), _back), squeeze)


# ----------------------------------------------------------------- activation


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``, one slope per channel or shared."""
    if x.ndim < 3:
        raise ValueError(f"prelu expects a channel axis, got shape {x.shape}")
    caxis = x.ndim - 3
    channels = x.shape[caxis]
    if slope.size not in (1, channels):
        raise ValueError(f"slope has {slope.size} entries for {channels} channels")
    bshape = [1] * x.ndim
    bshape[caxis] = slope.size
    a = slope.data.reshape(bshape)
    xd = x.data
    neg = xd < 0
    out = np.where(neg, a * xd, xd)
    sshape = slope.shape

    def _back(g):
        gx = np.where(neg, a * g, g) if x.requires_grad else None
        gs = None
        if slope.requires_grad:
            contrib = np.where(neg, g * xd, 0.0)
            if slope.size == 1:
                gs = np.asarray(contrib.sum(), dtype=g.dtype).reshape(sshape)
            else:
                axes = tuple(i for i in range(x.ndim) if i != caxis)
                gs = contrib.sum(axis=axes).reshape(sshape)
        return gx, gs

    return _make(out, (x, slope), _back)


# ----------------------------------------------------------------------- loss


def masked_rmse(pred: Tensor, target, mask) -> Tensor:
    """Root-mean-square error over pixels where ``mask`` is 1.

    ``pred`` and ``target`` are ``(C, H, W)``; ``mask`` is ``(1, H, W)`` or
    ``(H, W)`` and is shared by every channel.  Batched ``(N, C, H, W)`` inputs
    with ``(N, 1, H, W)`` masks give the mean of per-slice RMSE values.
    Gradients flow to ``pred`` only.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if pred.shape != t.shape:
        raise ValueError(f"pred {pred.shape} and target {t.shape} differ in shape")
    batched = pred.ndim == 4
    if not batched and pred.ndim != 3:
        raise ValueError(f"masked_rmse expects (C,H,W) or (N,C,H,W), got {pred.shape}")
    if batched and m.ndim == 3:
        m = m[:, None]
    if not batched:
        m = m.reshape((1,) + pred.shape[1:])[None]
    p = pred.data if batched else pred.data[None]
    tt = t if batched else t[None]
    if m.ndim != 4 or m.shape[0] != p.shape[0] or m.shape[2:] != p.shape[2:]:
        raise ValueError(f"mask shape {m.shape} incompatible with prediction {pred.shape}")
    m = (m != 0).astype(p.dtype)
    counts = m.sum(axis=(1, 2, 3)) * p.shape[1]
    if np.any(counts == 0):
        raise EmptyMaskError()
    diff = (p - tt.astype(p.dtype)) * m
    per = np.sqrt((diff * diff).sum(axis=(1, 2, 3)) / counts)
    nb = p.shape[0]
    value = np.asarray(per.mean(), dtype=p.dtype)

    def _back(g):
        scale = np.where(per > 0, 1.0 / (counts * np.where(per > 0, per, 1.0) * nb), 0.0)
        gp = diff * (g * scale).astype(p.dtype)[:, None, None, None]
        return (gp if batched else gp[0],)

    return _make(value, (pred,), _back)


def rmse(pred: Tensor, target) -> Tensor:
    """Unmasked RMSE, the all-ones-mask special case of :func:`masked_rmse`."""
    shape = pred.shape[:-3] + (1,) + pred.shape[-2:]
    return masked_rmse(pred, target, np.ones(shape, dtype=pred.dtype))
