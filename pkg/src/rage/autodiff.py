"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the enhancement network needs are provided.  Binary
ops require identical shapes (scalars excepted); there is no implicit
broadcasting.  Channel broadcasting of attention maps goes through the
explicit :func:`expand_channels`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float array that can take part in a gradient tape."""

    __array_priority__ = 100  # keep ndarray.__mul__ from swallowing Tensors

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    # -- differentiation ------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from here.

        The graph is released afterwards; a second call raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError(
                "backward() already ran through this graph; rebuild it with a new forward pass"
            )
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad: no parameter reaches it")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._consumed = True
            node._parents = ()
            node._backward = None
        self._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order; graphs here are deep enough to hit the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite_scalar(s) -> float:
    s = float(s)
    if not math.isfinite(s):
        raise ValueError(f"scalar operand must be finite, got {s}")
    return s


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = _check_finite_scalar(b)
        return _result(a.data + s, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = _check_finite_scalar(b)
        return _result(a.data - s, (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = _check_finite_scalar(b)
        return _result(a.data * s, (a,), lambda g: (g * s,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    # exp(-log(1 + e^-x)) keeps tiny tails instead of rounding them to 0
    s = np.exp(-np.logaddexp(0.0, -a.data)).astype(a.dtype, copy=False)

    def backward(g):
        # 1 - s loses the tail once s rounds to 1; use sigmoid(-x) directly
        return (g * s * np.exp(-np.logaddexp(0.0, a.data)).astype(a.dtype, copy=False),)

    return _result(s, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    mask = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at the tie
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = a.shape, a.dtype
    return _result(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size
    return _result(
        np.asarray(a.data.mean(), dtype=dt), (a,), lambda g: (np.full(shape, g / n, dtype=dt),)
    )


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def crop(a: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` block of the last two axes."""
    H, W = a.shape[-2:]
    if not (0 < height <= H and 0 < width <= W):
        raise ValueError(f"crop to {height}x{width} outside extent {H}x{W}")
    src_shape, dt = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dt)
        full[..., :height, :width] = g
        return (full,)

    return _result(np.ascontiguousarray(a.data[..., :height, :width]), (a,), backward)


def expand_channels(a: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map ``[N,1,H,W]`` to ``[N,channels,H,W]``."""
    if a.ndim != 4 or a.shape[1] != 1:
        raise ValueError(f"expand_channels expects [N,1,H,W], got {a.shape}")
    N, _, H, W = a.shape
    out = np.broadcast_to(a.data, (N, channels, H, W)).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=1, keepdims=True),))


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two on the last two axes of ``[N,C,H,W]``."""
    if a.ndim != 4:
        raise ValueError(f"upsample2x expects [N,C,H,W], got {a.shape}")
    N, C, H, W = a.shape
    if H < 1 or W < 1:
        raise ValueError(f"upsample2x needs non-empty spatial extent, got {a.shape}")
    out = np.broadcast_to(a.data[:, :, :, None, :, None], (N, C, H, 2, W, 2)).reshape(N, C, 2 * H, 2 * W)

    def backward(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution and normalization
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``[N,Cin,H,W]`` with ``[Cout,Cin,kH,kW]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    N, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if C != Cin:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d: zero-extent output")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # columns laid out [N, Cin*kh*kw, Ho*Wo] so the product lands directly in NCHW order
    if kh == 1 and kw == 1:
        cols = xd[:, :, ::stride, ::stride].reshape(N, C, Ho * Wo)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))
        win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(Cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, Cout, Ho, Wo)

    Hp, Wp = H + 2 * padding, W + 2 * padding
    dt = x.dtype

    def backward(g):
        go = g.reshape(N, Cout, Ho * Wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = go.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, go).reshape(N, C, kh, kw, Ho, Wo)
            gxp = np.zeros((N, C, Hp, Wp), dtype=dt)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward if bias is not None else (lambda g: backward(g)[:2]))


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of ``[N,C,H,W]`` with per-channel affine ``weight``/``bias``."""
    N, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    if weight.shape != (C,) or bias.shape != (C,):
        raise ValueError(f"group_norm: affine params must have shape ({C},)")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(N, C, H, W)
    gamma = weight.data.reshape(1, C, 1, 1)
    out = xhat * gamma + bias.data.reshape(1, C, 1, 1)
    M = xg.shape[2]

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma).reshape(N, groups, M)
            xh = xhat.reshape(N, groups, M)
            gx = (
                inv_std
                / M
                * (M * dxhat - dxhat.sum(axis=2, keepdims=True) - xh * (dxhat * xh).sum(axis=2, keepdims=True))
            ).reshape(N, C, H, W)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic ``softmax(q k^T / sqrt(Dk))`` as a plain array."""
    dk = q.shape[-1]
    return softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(dk))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(Dk)) v`` over ``[N,T,D]`` tensors."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("scaled_dot_attention expects [N,T,D] tensors")
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch {q.shape} vs {k.shape}")
    if v.shape[:2] != q.shape[:2]:
        raise ValueError(f"value shape {v.shape} incompatible with query {q.shape}")
    dk = q.shape[-1]
    if dk == 0:
        raise ValueError("scaled_dot_attention: key dimension is zero")
    scale = 1.0 / math.sqrt(dk)
    qd, kd, vd = q.data, k.data, v.data
    p = attention_weights(qd, kd)
    out = p @ vd

    def backward(g):
        gp = g @ np.swapaxes(vd, -1, -2)
        gv = np.swapaxes(p, -1, -2) @ g
        gl = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gl @ kd
        gk = np.swapaxes(gl, -1, -2) @ qd
        return gq, gk, gv

    return _result(out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of scalar ``f`` at ``x``.

    Error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    leaf = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    loss = f(leaf)
    loss.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.empty_like(leaf.data)
    flat = leaf.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(leaf).item()
            flat[i] = orig - eps
            down = f(leaf).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
