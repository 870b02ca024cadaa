"""Reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps a float array, every
differentiable operation records a ``TapeNode`` (inputs, output, backward
rule) onto the active ``Tape``, and ``backward`` replays the tape in reverse
insertion order, accumulating gradients into ``Tensor.grad``.

Conventions:

* ``backward`` is only defined for scalar roots.
* A tape is one-shot per subgraph: replaying the same nodes twice raises
  instead of silently double-accumulating.
* Tapes form a stack; ``with Tape():`` confines an episode's graph so the
  nodes can be dropped wholesale when the block exits.  A module-level
  default tape backs ad-hoc use (tests, small scripts).
* ``no_grad()`` disables recording, e.g. for finite-difference probes and
  pure evaluation.
* Every operation checks its operands for NaN/Inf while the guard is
  enabled (default); ``set_nan_guard(False)`` turns the check off for
  speed once a model is trusted.
"""

from __future__ import annotations

import ctypes
import ctypes.util
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


def _pin_mmap_threshold(threshold: int = 1 << 20) -> None:
    """Keep large transient buffers mmap-backed so they return to the OS.

    Convolution forward/backward passes allocate tens-of-megabyte scratch
    arrays (column matrices) that are freed within the same episode.  glibc's
    malloc adaptively raises its mmap threshold the first time such a block
    is freed, after which blocks this size are carved from the heap; the
    freed holes fragment across episodes and resident memory climbs far past
    the true working set.  Fixing the threshold disables that adaptation:
    every allocation of ``threshold`` bytes or more stays mmap-backed and is
    unmapped on free.  Skipped silently on non-glibc platforms.
    """
    M_MMAP_THRESHOLD = -3
    try:
        path = ctypes.util.find_library("c")
        libc = ctypes.CDLL(path) if path else ctypes.CDLL(None)
        libc.mallopt(M_MMAP_THRESHOLD, threshold)
    except (AttributeError, OSError, TypeError):
        pass


_pin_mmap_threshold()

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "no_grad",
    "set_nan_guard",
    "nan_guard_enabled",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "square",
    "sqrt",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "flatten",
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "pairwise_sqdist",
    "log_softmax",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operands have shapes the operation cannot accept."""


class NonFiniteError(FloatingPointError):
    """An operand (or domain-restricted input) contains NaN or Inf."""


class TapeError(RuntimeError):
    """Backward misuse: non-scalar root, consumed subgraph, detached root."""


_nan_guard = True


def set_nan_guard(enabled: bool) -> bool:
    """Enable/disable the per-operation NaN/Inf operand check.

    Returns the previous setting so callers can restore it.
    """
    global _nan_guard
    previous = _nan_guard
    _nan_guard = bool(enabled)
    return previous


def nan_guard_enabled() -> bool:
    return _nan_guard


_grad_enabled = True


@contextmanager
def no_grad():
    """Context manager that suspends tape recording."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A dense float array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "node", "_detached")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d if unconditional
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: "TapeNode" | None = None
        self._detached = False

    # ------------------------------------------------------------------
    # basic protocol
    # ------------------------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same data cut out of the graph.

        Calling ``backward`` on a detached tensor raises ``TapeError``.
        """
        out = Tensor(self.data, requires_grad=False)
        out._detached = True
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # ------------------------------------------------------------------
    # operator sugar
    # ------------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add(self, Tensor(np.asarray(other, dtype=self.data.dtype)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return sub(self, Tensor(np.asarray(other, dtype=self.data.dtype)))

    def __rsub__(self, other):
        return sub(Tensor(np.asarray(other, dtype=self.data.dtype)), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # method aliases for the functional ops
    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis=axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return flatten(self)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_rule", "tape", "consumed")

    def __init__(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward_rule: Callable[[np.ndarray], tuple],
        tape: "Tape",
    ):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule
        self.tape = tape
        self.consumed = False


class Tape:
    """Insertion-ordered record of operations, replayed once by ``backward``.

    Usable as a context manager; entering pushes it onto the tape stack so
    all recording inside the block lands here.  Exiting pops it and releases
    the recorded graph: node links (inputs, outputs, backward closures) are
    severed so the block's intermediate arrays free by reference count the
    moment the last outside reference drops, instead of lingering in
    ``Tensor <-> TapeNode`` cycles until the garbage collector runs.  Leaf
    ``.grad`` values and tensors still referenced by the caller survive;
    ``backward`` over a released graph raises ``TapeError``.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def release(self) -> None:
        """Sever node links so the graph's arrays free by refcount.

        Tensors keep their ``.node`` backreference (now a husk) so reuse on
        another tape is still rejected with ``TapeError`` rather than being
        silently treated as a leaf.
        """
        for node in self.nodes:
            node.inputs = ()
            node.output = None
            node.backward_rule = None
            node.tape = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tape stack corrupted"
        self.release()


_default_tape = Tape()
_tape_stack: list[Tape] = [_default_tape]


def active_tape() -> Tape:
    return _tape_stack[-1]


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    if not _nan_guard:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: operand contains NaN or Inf")


def _record(
    op: str,
    inputs: tuple[Tensor, ...],
    out_data: np.ndarray,
    backward_rule: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap an op result in a Tensor, recording a node if grads are live."""
    _check_finite(op, *(t.data for t in inputs))
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = active_tape()
        for t in inputs:
            if t.node is not None and t.node.tape is not tape:
                if t.node.tape is None:
                    raise TapeError(
                        f"{op}: operand's graph was released when its tape "
                        "context exited; detach() it to reuse the value"
                    )
                raise TapeError(
                    f"{op}: operand was recorded on a different tape; "
                    "detach() it or rebuild the graph on one tape"
                )
        node = TapeNode(op, inputs, out, backward_rule, tape)
        out.node = node
        tape.record(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for da, db in zip(a[::-1], b[::-1]):
        if da != db and da != 1 and db != 1:
            return False
    return True


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g):
        return (g * c,)

    return _record("scale", (a,), a.data * c, rule)


def neg(a: Tensor) -> Tensor:
    def rule(g):
        return (-g,)

    return _record("neg", (a,), -a.data, rule)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), a.data @ b.data, rule)


# ----------------------------------------------------------------------
# elementwise nonlinearities
# ----------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g):
        return (g * mask,)

    return _record("relu", (a,), np.where(mask, a.data, 0.0), rule)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(g):
        return (g * out_data,)

    return _record("exp", (a,), out_data, rule)


def log(a: Tensor) -> Tensor:
    if _nan_guard and np.any(a.data <= 0):
        raise NonFiniteError("log: operand has entries <= 0")

    def rule(g):
        return (g / a.data,)

    return _record("log", (a,), np.log(a.data), rule)


def square(a: Tensor) -> Tensor:
    def rule(g):
        return (2.0 * a.data * g,)

    return _record("square", (a,), a.data * a.data, rule)


def sqrt(a: Tensor) -> Tensor:
    if _nan_guard and np.any(a.data < 0):
        raise NonFiniteError("sqrt: operand has negative entries")
    out_data = np.sqrt(a.data)

    def rule(g):
        return (g * (0.5 / out_data),)

    return _record("sqrt", (a,), out_data, rule)


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out_data = np.asarray(a.data.sum())

        def rule(g):
            return (np.broadcast_to(g, a.shape).copy(),)

    else:
        ax = axis if axis >= 0 else a.ndim + axis
        if not 0 <= ax < a.ndim:
            raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
        out_data = a.data.sum(axis=ax)

        def rule(g):
            return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _record("sum", (a,), out_data, rule)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        count = a.size
        out_data = np.asarray(a.data.mean())

        def rule(g):
            return (np.broadcast_to(g / count, a.shape).copy(),)

    else:
        ax = axis if axis >= 0 else a.ndim + axis
        if not 0 <= ax < a.ndim:
            raise ShapeError(f"mean: axis {axis} out of range for shape {a.shape}")
        count = a.shape[ax]
        out_data = a.data.mean(axis=ax)

        def rule(g):
            return (np.broadcast_to(np.expand_dims(g / count, ax), a.shape).copy(),)

    return _record("mean", (a,), out_data, rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    in_shape = a.shape

    def rule(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (a,), out_data, rule)


def flatten(a: Tensor) -> Tensor:
    """Collapse all axes after the first: [B, ...] -> [B, prod(...)]."""
    if a.ndim < 2:
        raise ShapeError(f"flatten: need at least 2 dims, got {a.shape}")
    return reshape(a, (a.shape[0], -1))


# ----------------------------------------------------------------------
# convolution family (im2col / col2im based)
# ----------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Gather conv windows: [B,C,H,W] -> [B, OH*OW, C*kh*kw]."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,OH,OW,kh,kw]
    b, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(
    cols: np.ndarray,
    b: int,
    c: int,
    h: int,
    w: int,
    kh: int,
    kw: int,
    stride: int,
    pad: int,
    oh: int,
    ow: int,
) -> np.ndarray:
    """Scatter-add conv windows back: inverse of ``_im2col`` layout.

    ``cols`` is [B, OH*OW, C*kh*kw]; the result is [B, C, H, W] where each
    window element is accumulated at the pixel it was read from.
    """
    hp, wp = h + 2 * pad, w + 2 * pad
    buf = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    # [kh, kw, B, C, OH, OW]: one big transpose instead of one per tap
    blocks = cols.reshape(b, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    for di in range(kh):
        for dj in range(kw):
            buf[:, :, di : di + oh * stride : stride, dj : dj + ow * stride : stride] += blocks[di, dj]
    if pad:
        buf = buf[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(buf)


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"conv2d: kernel {k} (stride {stride}, pad {pad}) too large for input size {size}")
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.  x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D x and w, got {x.shape} and {w.shape}")
    bs, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(wd, kw, stride, pad)

    cols = _im2col(x.data, kh, kw, stride, pad)  # [B, OH*OW, Cin*kh*kw]
    wm = w.data.reshape(cout, -1)
    out = (cols @ wm.T).transpose(0, 2, 1).reshape(bs, cout, oh, ow)
    if b is not None:
        out = out + b.data[:, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(bs, oh * ow, cout)
        dw = np.tensordot(gm, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        dx = _col2im(gm @ wm, bs, cin, h, wd, kh, kw, stride, pad, oh, ow)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _record("conv2d", inputs, out, rule)


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed 2-D convolution (the adjoint of ``conv2d``'s linear map).

    x: [B,Cin,H,W], w: [Cin,Cout,kh,kw], b: [Cout].
    Output spatial size is ``(H-1)*stride - 2*pad + kh + output_padding``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-D x and w, got {x.shape} and {w.shape}")
    bs, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d: input channels {cin} != kernel channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
    if output_padding >= stride:
        raise ShapeError(f"conv_transpose2d: output_padding {output_padding} must be < stride {stride}")
    oh = (h - 1) * stride - 2 * pad + kh + output_padding
    ow = (wd - 1) * stride - 2 * pad + kw + output_padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: geometry yields empty output ({oh}x{ow})")

    xm = x.data.transpose(0, 2, 3, 1).reshape(bs, h * wd, cin)
    wm = w.data.reshape(cin, cout * kh * kw)
    # each input pixel emits a Cout*kh*kw block; scatter-add at stride
    out = _col2im(xm @ wm, bs, cout, oh, ow, kh, kw, stride, pad, h, wd)
    if b is not None:
        out = out + b.data[:, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def rule(g):
        gcols = _im2col(g, kh, kw, stride, pad)[:, : h * wd, :]  # [B, H*W, Cout*kh*kw]
        dx = (gcols @ wm.T).reshape(bs, h, wd, cin).transpose(0, 3, 1, 2)
        dw = np.tensordot(xm, gcols, axes=([0, 1], [0, 1])).reshape(w.shape)
        if b is None:
            return np.ascontiguousarray(dx), dw
        return np.ascontiguousarray(dx), dw, g.sum(axis=(0, 2, 3))

    return _record("conv_transpose2d", inputs, out, rule)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pool with window/stride ``k``.

    Trailing rows/columns that do not fill a window are dropped, so odd
    sizes shrink by floor division.  Ties route the gradient to the first
    maximum in row-major window order (deterministic).
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-D input, got {x.shape}")
    bs, c, h, w = x.shape
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d: window {k} larger than input {h}x{w}")
    cropped = x.data[:, :, : oh * k, : ow * k]
    tiles = cropped.reshape(bs, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(bs, c, oh, ow, k * k)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gt = np.zeros((bs, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        gt = gt.reshape(bs, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(bs, c, oh * k, ow * k)
        if oh * k == h and ow * k == w:
            return (np.ascontiguousarray(gt),)
        dx = np.zeros((bs, c, h, w), dtype=g.dtype)
        dx[:, :, : oh * k, : ow * k] = gt
        return (dx,)

    return _record("max_pool2d", (x,), np.ascontiguousarray(out), rule)


# ----------------------------------------------------------------------
# metric-space ops
# ----------------------------------------------------------------------


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between row vectors: [M,E],[N,E] -> [M,N]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]  # [M,N,E]
    out = np.einsum("mne,mne->mn", diff, diff)

    def rule(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return _record("pairwise_sqdist", (a, b), out, rule)


def log_softmax(x: Tensor) -> Tensor:
    """Log of the softmax along the last axis, computed max-shifted."""
    if x.ndim < 1:
        raise ShapeError("log_softmax: scalar input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def rule(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, rule)


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable tensor.

    ``root`` must be scalar.  The sub-tape that produced ``root`` is
    consumed; replaying it again (same root or an overlapping one) raises
    ``TapeError`` until the graph is rebuilt or the tape is reset.
    """
    if root._detached:
        raise TapeError("backward: root tensor is detached from the graph")
    if root.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data)
        return  # constant root: nothing depends on parameters
    if root.node.tape is None:
        raise TapeError(
            "backward: the graph was released when its tape context exited; "
            "rebuild it inside an active tape"
        )

    # collect the nodes this root actually depends on
    reachable: set[int] = set()
    stack = [root.node]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        if node.consumed:
            raise TapeError(
                "backward: subgraph already replayed; rebuild the graph "
                "or reset the tape before differentiating again"
            )
        reachable.add(id(node))
        for t in node.inputs:
            if t.node is not None:
                stack.append(t.node)

    root.grad = np.ones_like(root.data)
    for node in reversed(root.node.tape.nodes):
        if id(node) not in reachable:
            continue
        node.consumed = True
        g_out = node.output.grad
        if g_out is None:
            continue  # grad never flowed here (dead branch)
        grads = node.backward_rule(g_out)
        for t, g in zip(node.inputs, grads):
            if not t.requires_grad or g is None:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# finite-difference gradient checking
# ----------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    num_checked: int

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max relative error {self.max_rel_error:.3e} "
            f"(tolerance {self.tolerance:.1e}, {self.num_checked} coordinates)"
        )


def grad_check(
    f: Callable[..., Tensor],
    points: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps the given tensors to a scalar ``Tensor``.  Every coordinate
    of every point is perturbed by ``+-h``; the relative error uses the
    larger of the two gradient magnitudes, floored at 1, as denominator.
    """
    if isinstance(points, Tensor):
        points = [points]
    points = list(points)
    for p in points:
        p.requires_grad = True
        p.grad = None

    with Tape():
        out = f(*points)
        if not isinstance(out, Tensor) or out.size != 1:
            raise TapeError("grad_check: function under test must return a scalar Tensor")
        backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]

    max_rel = 0.0
    checked = 0
    with no_grad():
        for p, ga in zip(points, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                f_plus = float(f(*points).data)
                flat[i] = saved - h
                f_minus = float(f(*points).data)
                flat[i] = saved
                fd = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(gflat[i]), abs(fd), 1.0)
                max_rel = max(max_rel, abs(gflat[i] - fd) / denom)
                checked += 1
    return GradCheckReport(max_rel_error=max_rel, tolerance=tol, passed=max_rel < tol, num_checked=checked)
