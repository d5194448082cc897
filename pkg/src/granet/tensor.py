"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to input gradients.
``Tensor.backward`` walks that graph in reverse topological order.

Only the operators the de-raining network needs are provided. Arrays are
plain numpy buffers; the dtype of the inputs is preserved, so float32 is
used for training and float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "PoolIndices",
    "ShapeError",
    "no_grad",
    "zero_grads",
    "conv2d",
    "relu",
    "maxpool2d",
    "maxunpool2d",
    "softmax",
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_scale",
    "concat",
    "concat_channels",
    "mean_all",
    "sum_all",
    "absolute",
    "reshape",
    "transpose",
    "gather_spatial",
    "trace_kinks",
    "broken_backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _kink_log() -> Optional[list]:
    return getattr(_state, "kinks", None)


def _is_broken(op: str) -> bool:
    return op in getattr(_state, "broken", ())


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def trace_kinks():
    """Record the branch decisions of piecewise-linear ops.

    Yields a list that ReLU masks, pooling argmaxes and abs signs are
    appended to. Two evaluations with equal logs lie on the same linear
    piece, which is what the finite-difference checker relies on.
    """
    prev = _kink_log()
    log: list = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


@contextlib.contextmanager
def broken_backward(*ops: str):
    """Test hook: perturb the backward pass of the named ops by 1%."""
    prev = getattr(_state, "broken", ())
    _state.broken = tuple(prev) + ops
    try:
        yield
    finally:
        _state.broken = prev


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        ``self`` must hold a single element. Calling twice without
        :func:`zero_grads` in between adds the gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.dtype, copy=True)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        names = ("n", "c", "h", "w") if a.ndim == 4 else tuple(f"dim{i}" for i in range(a.ndim))
        if a.ndim == b.ndim:
            bad = [f"{names[i]} ({a.shape[i]} vs {b.shape[i]})" for i in range(a.ndim) if a.shape[i] != b.shape[i]]
            raise ShapeError(f"{op}: shape mismatch in {', '.join(bad)}")
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a Python number (treated as a constant)."""
    if not isinstance(b, Tensor):
        const = a.dtype.type(b)
        return _record(a.data + const, (a,), lambda g: (g,), "add")
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scalar_scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(x.data * x.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),), "scale")


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, returned with shape (1, 1, 1, 1)."""
    n = x.data.size
    shape = x.shape
    out = np.asarray(x.data.mean(dtype=x.dtype), dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0] / n, dtype=g.dtype),)

    return _record(out, (x,), backward, "mean")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),)

    return _record(out, (x,), backward, "sum")


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is taken as 0."""
    sign = np.sign(x.data)
    log = _kink_log()
    if log is not None:
        log.append(np.packbits(sign > 0).tobytes() + np.packbits(sign < 0).tobytes())
    return _record(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log = _kink_log()
    if log is not None:
        log.append(np.packbits(mask).tobytes())

    def backward(g):
        gx = g * mask
        if _is_broken("relu"):
            gx = gx * 1.01
        return (gx,)

    return _record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), backward, "relu")


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _record(np.ascontiguousarray(x.data[index]), (x,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank mismatch {ref.shape} vs {t.shape}")
        for d in range(ref.ndim):
            if d != axis % ref.ndim and t.shape[d] != ref.shape[d]:
                raise ShapeError(f"concat: dimension {d} differs ({ref.shape[d]} vs {t.shape[d]})")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(sl)])
        return out

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (n, c_i, h, w) tensors into (n, sum c_i, h, w)."""
    ref = tensors[0]
    for t in tensors:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels: expected 4-D tensors, got shape {t.shape}")
        for d, name in ((0, "n"), (2, "h"), (3, "w")):
            if t.shape[d] != ref.shape[d]:
                raise ShapeError(f"concat_channels: {name} differs ({ref.shape[d]} vs {t.shape[d]})")
    return concat(tensors, axis=1)


def gather_spatial(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[..., i, j] = x[..., rows[i], cols[j]]; used for padding."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    n, c, h, w = x.shape

    def backward(g):
        tmp = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(tmp, (slice(None), slice(None), rows), g)
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(full, (slice(None), slice(None), slice(None), cols), tmp)
        return (full,)

    return _record(x.data[:, :, rows][:, :, :, cols], (x,), backward, "gather")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ ({a.shape[:-2]} vs {b.shape[:-2]})")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-wise softmax with max subtraction."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), backward, "softmax")


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Pixel-major patches: row (n, y, x) holds the 3x3 window as (ky, kx, c)."""
    n, c, h, w = x.shape
    xpad = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xpad[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xpad[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im3(dcols: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    dcols = dcols.reshape(n, h, w, 3, 3, c)
    gpad = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            gpad[:, ky:ky + h, kx:kx + w, :] += dcols[:, :, :, ky, kx, :]
    return gpad[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding; kernels 1x1 or 3x3."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be (n, c, h, w), got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (c_out, c_in, kh, kw), got shape {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if c != c_in:
        raise ShapeError(f"conv2d: input has c={c} channels but weight expects c_in={c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")

    if kh == 1:
        wmat = weight.data.reshape(c_out, c_in)
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        out = wmat @ cols
        if bias is not None:
            out += bias.data[:, None]
        out = out.reshape(c_out, n, h, w).transpose(1, 0, 2, 3)
    else:
        # weight reordered to (c_out, ky, kx, c_in) to match the patch layout
        wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, 9 * c_in)
        cols = _im2col3(x.data)
        out = cols @ wmat.T
        if bias is not None:
            out += bias.data
        out = out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = gb = gx = None
        if kh == 1:
            g2 = g.transpose(1, 0, 2, 3).reshape(c_out, n * h * w)
            if weight.requires_grad:
                gw = (g2 @ cols.T).reshape(weight.shape)
            if bias is not None and bias.requires_grad:
                gb = g2.sum(axis=1)
            if x.requires_grad:
                gx = (wmat.T @ g2).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        else:
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, n * h * w)
            if weight.requires_grad:
                gw = (gt @ cols).reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
            if bias is not None and bias.requires_grad:
                gb = gt.sum(axis=1)
            if x.requires_grad:
                gx = _col2im3(gt.T @ wmat, n, c, h, w)
        if gx is not None and _is_broken("conv2d"):
            gx = gx * 1.01
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward, "conv2d")


class PoolIndices:
    """Argmax positions of a 2x2/stride-2 max pool.

    ``flat`` has the pooled shape (n, c, h/2, w/2); each entry is the flat
    offset ``row * in_w + col`` of the maximum inside the pre-pool map.
    """

    __slots__ = ("flat", "in_h", "in_w")

    def __init__(self, flat: np.ndarray, in_h: int, in_w: int):
        self.flat = flat
        self.in_h = in_h
        self.in_w = in_w

    @property
    def shape(self) -> tuple:
        return self.flat.shape

    def validate(self) -> None:
        """Raise if any offset falls outside its own 2x2 source window."""
        hp, wp = self.flat.shape[2:]
        row, col = np.divmod(self.flat, self.in_w)
        ii = np.arange(hp)[:, None]
        jj = np.arange(wp)[None, :]
        ok = (row // 2 == ii) & (col // 2 == jj) & (row >= 0) & (row < self.in_h) & (col >= 0)
        if not ok.all():
            bad = np.argwhere(~ok)[0]
            raise ValueError(f"corrupt pool indices: entry {tuple(int(v) for v in bad)} lies outside its 2x2 window")


def maxpool2d(x: Tensor) -> tuple[Tensor, PoolIndices]:
    """2x2 max pool with stride 2; ties go to the first position in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be (n, c, h, w), got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} is odd; pad the input to even h and w first")
    hp, wp = h // 2, w // 2
    win = x.data.reshape(n, c, hp, 2, wp, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp, 4)
    arg = win.argmax(axis=-1)
    vals = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    dy, dx = np.divmod(arg, 2)
    rows = 2 * np.arange(hp)[:, None] + dy
    cols = 2 * np.arange(wp)[None, :] + dx
    flat = (rows * w + cols).astype(np.int64)
    log = _kink_log()
    if log is not None:
        log.append(arg.astype(np.int8).tobytes())

    def backward(g):
        full = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(full, flat.reshape(n, c, -1), g.reshape(n, c, -1), axis=2)
        return (full.reshape(n, c, h, w),)

    return _record(vals, (x,), backward, "maxpool2d"), PoolIndices(flat, h, w)


def maxunpool2d(x: Tensor, indices: PoolIndices, out_h: int, out_w: int) -> Tensor:
    """Scatter ``x`` to the positions in ``indices``; zeros elsewhere."""
    if x.shape != indices.shape:
        raise ShapeError(f"maxunpool2d: input shape {x.shape} does not match indices shape {indices.shape}")
    n, c, h, w = x.shape
    if out_h != 2 * h or out_w != 2 * w:
        raise ShapeError(f"maxunpool2d: output size {out_h}x{out_w} must be twice the input size {h}x{w}")
    if indices.in_h != out_h or indices.in_w != out_w:
        raise ShapeError(
            f"maxunpool2d: indices were recorded on a {indices.in_h}x{indices.in_w} map, not {out_h}x{out_w}"
        )
    indices.validate()
    idx = indices.flat.reshape(n, c, -1)
    full = np.zeros((n, c, out_h * out_w), dtype=x.dtype)
    np.put_along_axis(full, idx, x.data.reshape(n, c, -1), axis=2)

    def backward(g):
        return (np.take_along_axis(g.reshape(n, c, -1), idx, axis=2).reshape(n, c, h, w),)

    return _record(full.reshape(n, c, out_h, out_w), (x,), backward, "maxunpool2d")
