"""Minimal dense-tensor engine with reverse-mode autodiff.

Only the operators the segmentation network needs are implemented. Tensors
wrap contiguous row-major numpy buffers (float32 by default, float64 for
gradient checking), every forward op validates that its output is finite,
and gradients are computed by replaying an explicit operation tape in
reverse. All ops are pure functions of their inputs; a tape is confined to
one logical thread.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

log = logging.getLogger(__name__)

SUPPORTED_DTYPES = (np.float32, np.float64)

# Soft cap on the number of f32/f64 elements an im2col buffer may hold;
# keeps the unrolled convolution workspace around ~128 MB.
_COL_BUDGET = 32_000_000

_UFUNC_POOL: Optional[ThreadPoolExecutor] = None
_PARALLEL_MIN = 2_000_000


def _halved(fn, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Apply a unary out-parameter ufunc over two threads for large arrays.

    Purely elementwise, so splitting the flat buffer is safe; small inputs
    run inline to avoid pool overhead.
    """
    if x.size < _PARALLEL_MIN:
        fn(x, out)
        return out
    global _UFUNC_POOL
    if _UFUNC_POOL is None:
        _UFUNC_POOL = ThreadPoolExecutor(max_workers=2)
    fi, fo = x.reshape(-1), out.reshape(-1)
    h = x.size // 2
    futures = [
        _UFUNC_POOL.submit(fn, fi[:h], fo[:h]),
        _UFUNC_POOL.submit(fn, fi[h:], fo[h:]),
    ]
    for f in futures:
        f.result()
    return out


class EngineError(ValueError):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    pass


class NonFiniteError(EngineError):
    """Raised when a forward op produces NaN or Inf."""


class TapeError(EngineError):
    pass


def _contig(data) -> np.ndarray:
    """C-contiguous view/copy that preserves 0-d shapes."""
    arr = np.asarray(data)
    if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"]:
        return arr
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense N-dimensional array, optionally participating in a gradient tape.

    data is always a C-contiguous numpy array of float32 or float64.
    ``grad`` is populated by ``Tape.backward`` for every tensor with
    ``requires_grad=True`` that the loss depends on.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = _contig(data)
        if arr.dtype.type not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.size == 0:
            raise ShapeError("tensors must have positive extents")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{rg}{tag})"

    # Arithmetic sugar; ops live at module level.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one reverse pass.

    Records are appended in execution order, so every operation's inputs
    precede it. A tape may run ``backward`` exactly once; call ``reset``
    to reuse it.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def reset(self):
        self._nodes.clear()
        self._consumed = False

    def _record(self, out: Tensor, inputs: tuple, backward_fn: Callable):
        self._nodes.append(_Node(out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every requires_grad tensor the loss depends on.

        d(loss)/d(loss) = 1. Raises for a non-scalar loss or a consumed tape.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass; call reset() first")
        if loss.size != 1:
            raise TapeError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            holders.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.requires_grad:
                node.out.grad = g
            input_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] += gi
                else:
                    # Own the buffer: later in-place accumulation must not
                    # write through views into other gradients.
                    gi = _contig(gi)
                    grads[key] = gi if gi.base is None else gi.copy()
                    holders[key] = t
        for key, t in holders.items():
            t.grad = grads[key]


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: output contains NaN/Inf")


def _make(op: str, data: np.ndarray, inputs: Sequence, backward_builder) -> Tensor:
    """Finalize an op: finite-check, wrap, and record on the active tape.

    ``backward_builder`` is called lazily (only when recording) and must
    return a function mapping the upstream gradient to a tuple of input
    gradients aligned with ``inputs``.
    """
    data = _contig(data)
    _check_finite(data, op)
    tape = _active_tape()
    requires = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape._record(out, tuple(inputs), backward_builder())
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _dtype_of(*xs) -> np.dtype:
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return np.dtype(np.float32)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    data = a.data + b.data

    def build():
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _make("add", data, (a, b), build)


def sub(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    data = a.data - b.data

    def build():
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _make("sub", data, (a, b), build)


def mul(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    data = a.data * b.data

    def build():
        ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
        return lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh))

    return _make("mul", data, (a, b), build)


def div(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    data = a.data / b.data

    def build():
        ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
        return lambda g: (
            _unbroadcast(g / bd, ash),
            _unbroadcast(-g * ad / (bd * bd), bsh),
        )

    return _make("div", data, (a, b), build)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return axes


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def build():
        shape = x.shape

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return bw

    return _make("sum", np.asarray(data), (x,), build)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def build():
        shape = x.shape

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g / count, shape).astype(x.dtype, copy=True),)

        return bw

    return _make("mean", np.asarray(data), (x,), build)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)

    def build():
        old = x.shape
        return lambda g: (g.reshape(old),)

    return _make("reshape", data, (x,), build)


def transpose(x: Tensor, perm) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.data.ndim)):
        raise ShapeError(f"invalid permutation {perm} for ndim {x.data.ndim}")
    data = np.transpose(x.data, perm)

    def build():
        inv = tuple(np.argsort(perm))
        return lambda g: (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make("transpose", data, (x,), build)


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(a) for a in axes)
    data = np.roll(x.data, shifts, axis=axes)

    def build():
        neg = tuple(-s for s in shifts)
        return lambda g: (np.roll(g, neg, axis=axes),)

    return _make("roll", data, (x,), build)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeError("concat operands must share rank")
    axis = axis % a.data.ndim
    for i, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if i != axis and sa != sb:
            raise ShapeError(
                f"concat shapes disagree off-axis: {a.shape} vs {b.shape} at axis {i}"
            )
    data = np.concatenate([a.data, b.data], axis=axis)

    def build():
        na = a.shape[axis]

        def bw(g):
            ga, gb = np.split(g, [na], axis=axis)
            return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

        return bw

    return _make("concat", data, (a, b), build)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    axis = axis % x.data.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} "
            f"with extent {x.shape[axis]}"
        )
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(x.data.ndim)
    )
    data = x.data[idx].copy()

    def build():
        shape = x.shape

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return bw

    return _make("narrow", data, (x,), build)


# ---------------------------------------------------------------------------
# nonlinearities


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact error-function GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    xd = x.data
    cdf = _halved(lambda a, o: erf(a, out=o), xd / _SQRT2, np.empty_like(xd))
    cdf += 1.0
    cdf *= 0.5
    data = (xd * cdf).astype(x.dtype, copy=False)

    def build():
        def bw(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return ((g * (cdf + xd * pdf)).astype(x.dtype, copy=False),)

        return bw

    return _make("gelu", data, (x,), build)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    ax = _check_axis(axis, x.data.ndim, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def build():
        def bw(g):
            inner = (g * s).sum(axis=ax, keepdims=True)
            return ((s * (g - inner)).astype(x.dtype, copy=False),)

        return bw

    return _make("softmax", s.astype(x.dtype, copy=False), (x,), build)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    ax = _check_axis(axis, x.data.ndim, "log_softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    data = (shifted - lse).astype(x.dtype, copy=False)

    def build():
        def bw(g):
            return ((g - np.exp(data) * g.sum(axis=ax, keepdims=True)).astype(x.dtype, copy=False),)

        return bw

    return _make("log_softmax", data, (x,), build)


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the trailing axis: (..., Cin) @ w[Cout, Cin].T + b."""
    cin = x.shape[-1]
    if w.data.ndim != 2 or w.shape[1] != cin:
        raise ShapeError(f"linear: weight {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} must be ({w.shape[0]},)")
    data = x.data @ w.data.T + b.data

    def build():
        def bw(g):
            gmat = g.reshape(-1, g.shape[-1])
            xmat = x.data.reshape(-1, cin)
            dx = (g @ w.data).reshape(x.shape)
            dw = gmat.T @ xmat
            db = gmat.sum(axis=0)
            return dx, dw, db

        return bw

    return _make("linear", data, (x, w, b), build)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands need >= 2 dims")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def build():
        def bw(g):
            da = g @ np.swapaxes(b.data, -1, -2)
            db = np.swapaxes(a.data, -1, -2) @ g
            return da, db

        return bw

    return _make("matmul", data, (a, b), build)


def index_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather columns of ``table[H, S]`` by a flat integer ``index``; used to
    expand a compact bias table into per-pair biases. Backward scatter-adds."""
    if index.min() < 0 or index.max() >= table.shape[1]:
        raise ShapeError("index out of range for table")
    flat = index.reshape(-1)
    data = table.data[:, flat].reshape((table.shape[0],) + index.shape)

    def build():
        def bw(g):
            dt = np.zeros_like(table.data)
            np.add.at(dt, (slice(None), flat), g.reshape(table.shape[0], -1))
            return (dt,)

        return bw

    return _make("index_rows", data, (table,), build)


# ---------------------------------------------------------------------------
# convolution and normalization


def _conv_out_extent(size: int, k: int, stride: int, pad: int, axis: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"conv3d: non-positive output extent on axis {axis + 1} "
            f"(size {size}, kernel {k}, stride {stride}, pad {pad})"
        )
    if k > size + 2 * pad:
        raise ShapeError(f"conv3d: kernel {k} exceeds padded input {size + 2 * pad}")
    return out


def _pad_channels_last(x: np.ndarray, padding) -> np.ndarray:
    """(N, C, D, H, W) -> padded (N, Dp, Hp, Wp, C); channels-last keeps the
    window gather below on contiguous channel runs."""
    xcl = np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1))
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return xcl
    return np.pad(xcl, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride, padding) -> Tensor:
    """3D cross-correlation (no kernel flip) with per-axis stride and padding.

    x: (N, Cin, D, H, W); w: (Cout, Cin, kd, kh, kw); b: (Cout,).
    Output extent per axis: (size + 2*pad - kernel) // stride + 1.
    """
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv3d expects 5D input and weight")
    if any(s < 1 for s in stride):
        raise ShapeError(f"conv3d: stride components must be >= 1, got {stride}")
    n, cin, d, h, wd = x.shape
    cout, cin_w, kd, kh, kw = w.shape
    if cin_w != cin:
        raise ShapeError(f"conv3d: weight expects {cin_w} input channels, input has {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv3d: bias {b.shape} must be ({cout},)")
    out_sp = tuple(
        _conv_out_extent(sz, k, st, p, ax)
        for ax, (sz, k, st, p) in enumerate(zip((d, h, wd), (kd, kh, kw), stride, padding))
    )
    xcl = _pad_channels_last(x.data, padding)
    data = _conv_forward_cols(xcl, w.data, out_sp, stride) + b.data.reshape(1, -1, 1, 1, 1)

    def build():
        padded_shape = (n, cin) + tuple(xcl.shape[1:4])

        def bw(g):
            dx = _conv_backward_input(g, w.data, padded_shape, stride, padding, x.shape)
            dw = _conv_backward_weight(xcl, g, w.shape, stride)
            db = g.sum(axis=(0, 2, 3, 4))
            return dx, dw, db

        return bw

    return _make("conv3d", data, (x, w, b), build)


def _weight_cols(w: np.ndarray) -> np.ndarray:
    """(Cout, Cin, kd, kh, kw) -> (kd*kh*kw*Cin, Cout), matching the
    channels-last window layout."""
    cout = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).reshape(-1, cout)


_TILE_SRC_BYTES = 1_600_000  # keep each gathered source block L2-resident


def _conv_tile_steps(out_sp, kernel, stride, wp, c, itemsize):
    """(depth, height) tile extents whose source block stays cache-resident
    and whose unrolled column buffer respects the global budget."""
    do, ho, wo = out_sp
    kd, kh, kw = kernel
    sd, sh, _ = stride

    def src_bytes(dstep, hstep):
        din = (dstep - 1) * sd + kd
        hin = (hstep - 1) * sh + kh
        return din * hin * wp * c * itemsize

    hstep = ho
    while hstep > 1 and src_bytes(1, hstep) > _TILE_SRC_BYTES:
        hstep = max(1, hstep // 2)
    dstep = 1
    while dstep < do and src_bytes(dstep * 2, hstep) <= _TILE_SRC_BYTES:
        dstep *= 2
    cols = kd * kh * kw * c
    max_rows = max(wo, _COL_BUDGET // cols)
    while dstep * hstep * wo > max_rows and dstep > 1:
        dstep //= 2
    while dstep * hstep * wo > max_rows and hstep > 1:
        hstep //= 2
    return min(dstep, do), min(hstep, ho)


def _conv_forward_cols(xcl, w, out_sp, stride):
    """Channels-last tiled im2col + GEMM. Tiles are sized so the strided
    window gather reads a cache-resident source block."""
    do, ho, wo = out_sp
    n = xcl.shape[0]
    cout, cin, kd, kh, kw = w.shape
    sd, sh, sw = stride
    cols = kd * kh * kw * cin
    wmat = _weight_cols(w)
    out = np.empty((n, do, ho, wo, cout), dtype=w.dtype)
    dstep, hstep = _conv_tile_steps(out_sp, (kd, kh, kw), stride, xcl.shape[3], cin,
                                    xcl.itemsize)
    for d0 in range(0, do, dstep):
        d1 = min(do, d0 + dstep)
        for h0 in range(0, ho, hstep):
            h1 = min(ho, h0 + hstep)
            sub = xcl[:, d0 * sd : (d1 - 1) * sd + kd, h0 * sh : (h1 - 1) * sh + kh]
            ss = sub.strides
            view = np.lib.stride_tricks.as_strided(
                sub,
                (n, d1 - d0, h1 - h0, wo, kd, kh, kw, cin),
                (ss[0], ss[1] * sd, ss[2] * sh, ss[3] * sw, ss[1], ss[2], ss[3], ss[4]),
                writeable=False,
            )
            col = view.reshape(-1, cols)
            out[:, d0:d1, h0:h1] = (col @ wmat).reshape(n, d1 - d0, h1 - h0, wo, cout)
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _conv_backward_weight(xcl, g, wshape, stride):
    cout, cin, kd, kh, kw = wshape
    n, _, do, ho, wo = g.shape
    sd, sh, sw = stride
    cols = kd * kh * kw * cin
    gcl = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
    acc = np.zeros((cols, cout), dtype=g.dtype)
    dstep, hstep = _conv_tile_steps((do, ho, wo), (kd, kh, kw), stride, xcl.shape[3],
                                    cin, xcl.itemsize)
    for d0 in range(0, do, dstep):
        d1 = min(do, d0 + dstep)
        for h0 in range(0, ho, hstep):
            h1 = min(ho, h0 + hstep)
            sub = xcl[:, d0 * sd : (d1 - 1) * sd + kd, h0 * sh : (h1 - 1) * sh + kh]
            ss = sub.strides
            view = np.lib.stride_tricks.as_strided(
                sub,
                (n, d1 - d0, h1 - h0, wo, kd, kh, kw, cin),
                (ss[0], ss[1] * sd, ss[2] * sh, ss[3] * sw, ss[1], ss[2], ss[3], ss[4]),
                writeable=False,
            )
            col = view.reshape(-1, cols)
            gmat = gcl[:, d0:d1, h0:h1].reshape(-1, cout)
            acc += col.T @ gmat
    # (kd, kh, kw, Cin, Cout) -> (Cout, Cin, kd, kh, kw)
    return np.ascontiguousarray(acc.reshape(kd, kh, kw, cin, cout).transpose(4, 3, 0, 1, 2))


def _conv_backward_input(g, w, padded_shape, stride, padding, xshape):
    n, cin, dp, hp, wp = padded_shape
    cout = w.shape[0]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    do, ho, wo = g.shape[2:]
    dxp = np.zeros(padded_shape, dtype=g.dtype)
    # Accumulate one kernel offset at a time; strided slice assignment avoids
    # any scatter over overlapping windows.
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                contrib = np.tensordot(g, w[:, :, i, j, k], axes=([1], [0]))
                dxp[
                    :,
                    :,
                    i : i + sd * do : sd,
                    j : j + sh * ho : sh,
                    k : k + sw * wo : sw,
                ] += contrib.transpose(0, 4, 1, 2, 3)
    pd, ph, pw = padding
    d, h, wd = xshape[2:]
    return np.ascontiguousarray(dxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wd])


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor, stride) -> Tensor:
    """Strided deconvolution whose kernel extents equal the stride.

    x: (N, Cin, D, H, W); w: (Cin, Cout, kd, kh, kw) with (kd, kh, kw) == stride.
    Each input voxel populates a disjoint kernel-sized output block, so the
    output spatial extents are the input extents times the stride.
    """
    stride = tuple(int(s) for s in stride)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv_transpose3d expects 5D input and weight")
    n, cin, d, h, wd = x.shape
    cin_w, cout, kd, kh, kw = w.shape
    if (kd, kh, kw) != stride:
        raise ShapeError(
            f"conv_transpose3d: kernel extents {(kd, kh, kw)} must equal stride {stride}"
        )
    if cin_w != cin:
        raise ShapeError(f"conv_transpose3d: weight expects {cin_w} channels, input has {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv_transpose3d: bias {b.shape} must be ({cout},)")
    t = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N,D,H,W,Cout,kd,kh,kw)
    t = t.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    data = t.reshape(n, cout, d * kd, h * kh, wd * kw) + b.data.reshape(1, -1, 1, 1, 1)

    def build():
        def bw(g):
            g8 = g.reshape(n, cout, d, kd, h, kh, wd, kw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
            dx = np.tensordot(g8, w.data, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
            dx = np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3))
            dw = np.tensordot(x.data, g8, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
            db = g.sum(axis=(0, 2, 3, 4))
            return dx, np.ascontiguousarray(dw), db

        return bw

    return _make("conv_transpose3d", data, (x, w, b), build)


def _norm_core(x, axes, gamma_b, beta_b, eps, op):
    m = int(np.prod([x.data.shape[a] for a in axes]))
    if m < 2:
        log.warning("%s: degenerate 1-element normalization slice (shape %s)", op, x.shape)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = (gamma_b * xhat + beta_b).astype(x.dtype, copy=False)
    return data, xhat, inv, m


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over the spatial volume, biased
    variance, then channel-wise affine."""
    if x.data.ndim != 5:
        raise ShapeError("instance_norm expects (N, C, D, H, W)")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine params must have shape ({c},)")
    axes = (2, 3, 4)
    gb = gamma.data.reshape(1, c, 1, 1, 1)
    bb = beta.data.reshape(1, c, 1, 1, 1)
    data, xhat, inv, m = _norm_core(x, axes, gb, bb, eps, "instance_norm")

    def build():
        def bw(g):
            dxhat = g * gb
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
            dgamma = (g * xhat).sum(axis=(0, 2, 3, 4))
            dbeta = g.sum(axis=(0, 2, 3, 4))
            return dx.astype(x.dtype, copy=False), dgamma, dbeta

        return bw

    return _make("instance_norm", data, (x, gamma, beta), build)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the trailing (channel) axis with affine params."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine params must have shape ({c},)")
    axes = (x.data.ndim - 1,)
    data, xhat, inv, m = _norm_core(x, axes, gamma.data, beta.data, eps, "layer_norm")

    def build():
        def bw(g):
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
            red = tuple(range(x.data.ndim - 1))
            dgamma = (g * xhat).sum(axis=red)
            dbeta = g.sum(axis=red)
            return dx.astype(x.dtype, copy=False), dgamma, dbeta

        return bw

    return _make("layer_norm", data, (x, gamma, beta), build)


# ---------------------------------------------------------------------------
# parameter initialization helpers


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with redraw outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)
