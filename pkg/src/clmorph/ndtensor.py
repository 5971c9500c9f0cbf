"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what a small 3-D convolutional registration network needs: elementwise
arithmetic (scalar-vs-tensor broadcasting only), reductions, matrix products,
3-D convolution, pooling, trilinear upsampling, instance normalisation and a
handful of shape operations.

Every op records its parents and a closure mapping the output gradient to one
gradient per parent.  ``Tensor.backward`` walks the recorded graph once in
reverse topological order.  Gradients are only materialised on tensors with
``requires_grad``; intermediate gradients are released as soon as they have
been propagated, so only leaves keep ``.grad`` after a backward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError, UsageError

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "negate",
    "exp",
    "log",
    "leaky_relu",
    "reduce_sum",
    "reduce_mean",
    "l2_norm",
    "normalize",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "concat",
    "take",
    "gather",
    "conv3d",
    "avg_pool3d",
    "upsample_trilinear",
    "batch_norm",
    "gradcheck",
]


class Tensor:
    """N-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- differentiation -------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1 or self.ndim > 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g
            node.grad = None

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _need(t: Tensor) -> bool:
    return t.requires_grad


# -- elementwise -------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(
        f"{op}: shapes {a.shape} and {b.shape} differ; only scalar-vs-tensor broadcasting is supported"
    )


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, a) if _need(a) else None,
            _unbroadcast(g, b) if _need(b) else None,
        )

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, a) if _need(a) else None,
            _unbroadcast(-g, b) if _need(b) else None,
        )

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a) if _need(a) else None,
            _unbroadcast(g * a.data, b) if _need(b) else None,
        )

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a) if _need(a) else None,
            _unbroadcast(-g * out / b.data, b) if _need(b) else None,
        )

    return _make(out, (a, b), backward)


def negate(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),))


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis),))


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size // max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand_reduced(g / count, a.shape, axis),))


def l2_norm(a, axis=None) -> Tensor:
    """Euclidean norm over all elements, or along ``axis``."""
    a = _as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        return (_expand_reduced(g / out, a.shape, axis) * a.data,)

    return _make(out, (a,), backward)


def normalize(a, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DomainError("normalize: zero-norm vector")
    unit = a.data / norm

    def backward(g):
        return ((g - unit * (g * unit).sum(axis=axis, keepdims=True)) / norm,)

    return _make(unit, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return (
            g @ b.data.T if _need(a) else None,
            a.data.T @ g if _need(b) else None,
        )

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x [N,K], weight [M,K], bias [M]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    def backward(g):
        return (
            g @ weight.data if _need(x) else None,
            g.T @ x.data if _need(weight) else None,
            g.sum(axis=0) if _need(bias) else None,
        )

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), backward)


# -- shape operations --------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if _need(t) else None
            for i, t in enumerate(tensors)
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def take(a, index) -> Tensor:
    """NumPy-style indexing; repeated fancy indices accumulate in the gradient."""
    a = _as_tensor(a)
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def gather(a, rows: Sequence[int]) -> Tensor:
    """Select ``rows`` along axis 0 (repeats allowed); cheaper than fancy ``take`` for big slabs."""
    a = _as_tensor(a)
    rows = [int(r) for r in rows]

    def backward(g):
        full = np.zeros_like(a.data)
        for k, r in enumerate(rows):
            full[r] += g[k]
        return (full,)

    return _make(a.data[rows], (a,), backward)


# -- convolution and resampling ----------------------------------------------


def _conv_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv3d: extent {n} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an exact output size"
        )
    return span // stride + 1


def conv3d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """3-D cross-correlation, input [N,C,D,H,W], weight [F,C,k,k,k], bias [F].

    Computed channels-last as one matrix product per kernel offset.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv3d: expected 5-D input and weight, got {x.shape} and {weight.shape}")
    n, c = x.shape[:2]
    f, wc, k = weight.shape[:3]
    if wc != c:
        raise DimensionError(f"conv3d: weight expects {wc} input channels, input has {c}")
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ConfigurationError(f"conv3d: kernel must be cubic with odd size, got {weight.shape[2:]}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv3d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (f,):
            raise DimensionError(f"conv3d: bias shape {bias.shape} != ({f},)")
    out_ext = tuple(_conv_extent(s, k, stride, pad) for s in x.shape[2:])

    xl = x.data.transpose(0, 2, 3, 4, 1)
    if pad:
        xl = np.pad(xl, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    else:
        xl = np.ascontiguousarray(xl)
    wl = np.ascontiguousarray(weight.data.transpose(2, 3, 4, 1, 0))
    do, ho, wo = out_ext
    offsets = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]

    def window(arr, i, j, l, ext=out_ext, step=stride):
        a, b, e = ext
        return arr[
            :,
            i : i + step * (a - 1) + 1 : step,
            j : j + step * (b - 1) + 1 : step,
            l : l + step * (e - 1) + 1 : step,
        ]

    # single-channel inputs: gather all offsets once, one product instead of k^3 thin ones
    cols = None
    if c == 1:
        cols = np.stack([window(xl, *o)[..., 0] for o in offsets], axis=-1)
        out = cols @ wl.reshape(-1, f)
    else:
        out = np.zeros((n, do, ho, wo, f))
        for o in offsets:
            out += window(xl, *o) @ wl[o]
    if bias is not None:
        out += bias.data
    result = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def backward(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        gx = gw = gb = None
        if _need(x):
            if stride == 1 and pad <= k - 1:
                # correlation of the zero-padded gradient with the flipped kernel
                e = k - 1 - pad
                gp = np.pad(gl, ((0, 0), (e, e), (e, e), (e, e), (0, 0))) if e else gl
                wf = np.ascontiguousarray(wl[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
                gxl = np.zeros(x.shape[:1] + x.shape[2:] + (c,))
                for o in offsets:
                    gxl += window(gp, *o, ext=x.shape[2:]) @ wf[o]
            else:
                gxl = np.zeros(xl.shape)
                for o in offsets:
                    window(gxl, *o)[...] += gl @ wl[o].T
                if pad:
                    gxl = gxl[:, pad:-pad, pad:-pad, pad:-pad]
            gx = np.ascontiguousarray(gxl.transpose(0, 4, 1, 2, 3))
        if _need(weight):
            flat_g = gl.reshape(-1, f)
            if cols is not None:
                gwl = (cols.reshape(-1, len(offsets)).T @ flat_g).reshape(k, k, k, 1, f)
            else:
                gwl = np.empty(wl.shape)
                for o in offsets:
                    gwl[o] = window(xl, *o).reshape(-1, c).T @ flat_g
            gw = np.ascontiguousarray(gwl.transpose(4, 3, 0, 1, 2))
        if bias is not None and _need(bias):
            gb = gl.sum(axis=(0, 1, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(result, parents, backward)


def avg_pool3d(x, factor: int = 2) -> Tensor:
    """Non-overlapping mean pooling over the three trailing axes."""
    x = _as_tensor(x)
    if factor < 1:
        raise ConfigurationError(f"avg_pool3d: factor must be >= 1, got {factor}")
    lead = x.shape[:-3]
    d, h, w = x.shape[-3:]
    if d % factor or h % factor or w % factor:
        raise ConfigurationError(f"avg_pool3d: extents {(d, h, w)} not divisible by {factor}")
    blocks = x.data.reshape(*lead, d // factor, factor, h // factor, factor, w // factor, factor)
    nl = len(lead)
    out = blocks.mean(axis=(nl + 1, nl + 3, nl + 5))
    scale = 1.0 / factor**3

    def backward(g):
        up = g * scale
        for ax in range(nl, nl + 3):
            up = np.repeat(up, factor, axis=ax)
        return (up,)

    return _make(out, (x,), backward)


def interpolation_matrix(n_in: int, factor: int) -> np.ndarray:
    """Linear resampling weights from ``n_in`` samples to ``n_in * factor``.

    Half-pixel (align-corners-false) convention: output index ``o`` samples the
    input at ``(o + 0.5) / factor - 0.5``, clamped to ``[0, n_in - 1]``.
    """
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = min(max((o + 0.5) / factor - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def _apply_along(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def upsample_trilinear(x, factor: int = 2) -> Tensor:
    """Separable linear upsampling of the three trailing axes by an integer factor."""
    x = _as_tensor(x)
    if factor < 1:
        raise ConfigurationError(f"upsample_trilinear: factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    nd = x.ndim
    mats = [interpolation_matrix(n, factor) for n in x.shape[-3:]]
    out = x.data
    for i, m in enumerate(mats):
        out = _apply_along(out, m, nd - 3 + i)

    def backward(g):
        for i, m in enumerate(mats):
            g = _apply_along(g, m.T, nd - 3 + i)
        return (np.ascontiguousarray(g),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def batch_norm(x, scale, shift, running: dict | None = None, training: bool = True,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of [N,C,D,H,W] over batch and space, affine [C] scale/shift.

    In training mode batch statistics are used and, when ``running`` is given,
    its ``"mean"`` and ``"var"`` arrays are updated in place by exponential
    averaging.  Otherwise the running statistics are treated as constants.
    """
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    if x.ndim != 5:
        raise DimensionError(f"batch_norm: expected [N,C,D,H,W], got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm: affine params must have shape ({c},)")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        if running is not None:
            running["mean"] *= 1.0 - momentum
            running["mean"] += momentum * mean
            running["var"] *= 1.0 - momentum
            running["var"] += momentum * var
    else:
        if running is None:
            raise UsageError("batch_norm: evaluation mode needs running statistics")
        mean, var = running["mean"], running["var"]
        centered = x.data - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = centered * inv_std
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def backward(g):
        gx = gs = gt = None
        if _need(x):
            gxhat = g * scale.data.reshape(bshape)
            if training:
                gx = inv_std * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std
        if _need(scale):
            gs = (g * xhat).sum(axis=axes)
        if _need(shift):
            gt = g.sum(axis=axes)
        return gx, gs, gt

    return _make(out, (x, scale, shift), backward)


# -- verification ------------------------------------------------------------


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    n_coords: int = 10,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between autodiff and central differences.

    Samples ``n_coords`` coordinates from each input that requires grad.  The
    error at a coordinate is ``|ad - fd| / max(1, |fd|)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = fn(*inputs).item()
            flat[idx] = orig - h
            down = fn(*inputs).item()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            err = abs(analytic.reshape(-1)[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
