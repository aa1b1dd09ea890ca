"""Dense float tensors with reverse-mode differentiation.

The value type for the whole kit: a numpy-backed ``Tensor`` records a
define-by-run tape (parents plus a backward closure per node) and
``backward()`` walks it once, accumulating gradients into leaves. float32 is
the working precision; float64 is allowed so the gradient-checking harness
can run the same graph at higher precision.

Also hosts the attention primitive, 2D rotary position embedding, AdaLN
modulation, layer norm, the conv2d kernel used by the image encoders, and
``grad_check``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError

_FLOAT_TYPES = (np.float32, np.float64)
_tape_enabled = True


@contextmanager
def no_tape():
    """Disable graph recording (inference / finite-difference evaluation)."""
    global _tape_enabled
    prev = _tape_enabled
    _tape_enabled = False
    try:
        yield
    finally:
        _tape_enabled = prev


def tape_enabled() -> bool:
    return _tape_enabled


class Tensor:
    """N-d float array plus an optional record on the backward tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- metadata ---------------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss. Frees the graph as it goes."""
        if self.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward
            if fn is None:
                continue  # leaf: keeps its accumulated grad
            node._backward = None
            node._parents = ()
            if node.grad is not None:
                fn(node.grad)
            node.grad = None  # interior grads are not retained

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _tape_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)

        def back_scalar(g, a=a):
            a._accumulate(g)

        return _make(a.data + b, (a,), back_scalar)
    a, b = as_tensor(a), as_tensor(b)

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) or not np.isscalar(b):
        return add(as_tensor(a), mul(as_tensor(b), -1.0))
    return add(as_tensor(a), -b)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)

        def back_scalar(g, a=a, b=b):
            a._accumulate(g * b)

        return _make(a.data * b, (a,), back_scalar)
    a, b = as_tensor(a), as_tensor(b)

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return mul(a, 1.0 / b)
    return mul(as_tensor(a), power(as_tensor(b), -1.0))


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data**exponent

    def back(g, a=a):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), back)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def back(g, a=a, out_data=out_data):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def back(g, a=a, out_data=out_data):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), back)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def back(g, a=a, mask=mask):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, 0.5*x*(1+erf(x/sqrt(2)))."""
    a = as_tensor(a)
    inner = erf(a.data * (1.0 / math.sqrt(2.0)))

    def back(g, a=a, inner=inner):
        pdf = np.exp(-0.5 * a.data * a.data) * (1.0 / math.sqrt(2.0 * math.pi))
        a._accumulate(g * (0.5 * (1.0 + inner) + a.data * pdf))

    return _make(0.5 * a.data * (1.0 + inner), (a,), back)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape

    def back(g, a=a, old_shape=old_shape):
        a._accumulate(g.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g, a=a, inverse=inverse):
        a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), back)


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)

    def back(g, a=a, idx=idx):
        full = np.zeros_like(a.data)
        full[idx] += g
        a._accumulate(full)

    return _make(a.data[idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g, tensors=tensors, splits=splits, axis=axis):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def back(g, a=a, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul mismatch: {a.shape} @ {b.shape}")

    def back(g, a=a, b=b):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax with a fused backward rule."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g, a=a, out_data=out_data, axis=axis):
        gy = g * out_data
        a._accumulate(gy - out_data * gy.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), back)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    return mul(centered, power(add(var, eps), -0.5))


def adaln_modulate(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """layer_norm(x) * (1 + scale) + shift, per-channel over the last axis."""
    scale, shift = as_tensor(scale), as_tensor(shift)
    if scale.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"modulation width {scale.shape[-1]}/{shift.shape[-1]} != feature width {x.shape[-1]}"
        )
    return add(mul(layer_norm(x, eps), add(scale, 1.0)), shift)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d)) V over the last two axes.

    Returns (output, attention map); rows of the map sum to 1. Leading batch
    axes broadcast.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d <= 0:
        raise DimensionError("attention head dim must be positive")
    if k.shape[-1] != d:
        raise DimensionError(f"query dim {d} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    for name, t in (("q", q), ("k", k), ("v", v)):
        if np.isnan(t.data).any():
            raise NumericError(f"attention input {name} contains NaN")
    logits = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d))
    attn = softmax(logits, axis=-1)
    return matmul(attn, v), attn


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# -- rotary position embedding ------------------------------------------------


def rope_angles(coords: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Per-token rotation angles, shape (n, 2, dim//4).

    First half of the channels rotates by row index, second half by column;
    within a half, pair j uses frequency base**(-2j/(dim/2)).
    """
    if dim % 4 != 0:
        raise DimensionError(f"RoPE needs dim divisible by 4, got {dim}")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"coords must be (n, 2), got {coords.shape}")
    half = dim // 2
    freqs = base ** (-2.0 * np.arange(half // 2, dtype=np.float64) / half)
    return coords[:, :, None] * freqs[None, None, :]


def rope_2d_apply(tokens: Tensor, coords: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate token channels by their 2D grid position.

    ``tokens`` is (..., n, d) with d divisible by 4; ``coords`` is (n, 2)
    integer (row, col). Channel pairs (2j, 2j+1) in the first d/2 channels
    rotate by row * freq_j, the second d/2 by col * freq_j. Norm of every
    pair is preserved; zero coordinates are the identity.
    """
    tokens = as_tensor(tokens)
    d = tokens.shape[-1]
    n = tokens.shape[-2]
    if len(coords) != n:
        raise DimensionError(f"{n} tokens but {len(coords)} coordinate pairs")
    angles = rope_angles(coords, d, base)
    cos = Tensor(np.cos(angles).astype(tokens.dtype))
    sin = Tensor(np.sin(angles).astype(tokens.dtype))
    lead = tokens.shape[:-2]
    paired = reshape(tokens, lead + (n, 2, d // 4, 2))
    even = getitem(paired, (..., 0))
    odd = getitem(paired, (..., 1))
    rot_even = sub(mul(even, cos), mul(odd, sin))
    rot_odd = add(mul(even, sin), mul(odd, cos))
    stacked = concat(
        [reshape(rot_even, lead + (n, 2, d // 4, 1)), reshape(rot_odd, lead + (n, 2, d // 4, 1))],
        axis=-1,
    )
    return reshape(stacked, lead + (n, d))


def latent_grid_coords(grid_h: int, grid_w: int, scale: int = 1) -> np.ndarray:
    """Row-major (row, col) integer coords for a grid, optionally scaled."""
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1) * scale


# -- convolution ---------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NHWC input, (kh, kw, c_in, c_out) kernel, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d wants NHWC x and khkwio w, got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape[3]}, kernel {w.shape[2]}")
    kh, kw = w.shape[0], w.shape[1]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (B, Ho, Wo, C, kh, kw)
    out_data = np.ascontiguousarray(
        np.tensordot(windows, w.data, axes=([3, 4, 5], [2, 0, 1]))
    )
    ho, wo = out_data.shape[1], out_data.shape[2]

    def back(g, x=x, w=w, windows=windows, xp_shape=xp.shape):
        if w.requires_grad:
            gw = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, D)
            w._accumulate(gw.transpose(1, 2, 0, 3))
        if x.requires_grad:
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    piece = np.matmul(g, w.data[ky, kx].T)  # (B, Ho, Wo, C)
                    gxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += piece
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return _make(out_data, (x, w), back)


# -- parameterized layers -------------------------------------------------------


class Linear:
    """x @ w + b with a named-parameter iterator for checkpointing."""

    def __init__(
        self,
        rng: np.random.Generator,
        d_in: int,
        d_out: int,
        bias: bool = True,
        zero_init: bool = False,
        scale: float | None = None,
    ):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            std = scale if scale is not None else math.sqrt(2.0 / (d_in + d_out))
            w = rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        return add(out, self.b) if self.b is not None else out

    def named_params(self, prefix: str) -> Iterable[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class Conv2d:
    """Thin parameter holder around :func:`conv2d`."""

    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
    ):
        fan_in = kernel * kernel * c_in
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(kernel, kernel, c_in, c_out))
        self.w = Tensor(w.astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.w, self.stride, self.padding)
        return add(out, self.b) if self.b is not None else out

    def named_params(self, prefix: str) -> Iterable[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


# -- gradient checking ----------------------------------------------------------


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    num_samples: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of parameter tensors to a scalar loss and must be
    deterministic. The closure is re-evaluated in float64 so finite
    differences are not swamped by float32 roundoff; sampled coordinates are
    drawn with the given seed. Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    """
    params64 = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in params]
    loss = f(params64)
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params64
    ]

    coords: list[tuple[int, int]] = []
    for pi, p in enumerate(params64):
        coords.extend((pi, flat) for flat in range(p.size))
    rng = np.random.default_rng(seed)
    if len(coords) > num_samples:
        picked = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    for pi, flat in coords:
        flat_view = params64[pi].data.reshape(-1)
        original = flat_view[flat]
        with no_tape():
            flat_view[flat] = original + eps
            hi = float(f(params64).data)
            flat_view[flat] = original - eps
            lo = float(f(params64).data)
        flat_view[flat] = original
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError("grad_check: perturbed loss is not finite")
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic[pi].reshape(-1)[flat]
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
        worst = max(worst, rel)
    return worst
