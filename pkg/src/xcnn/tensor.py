"""Dense tensors on a reverse-mode autodiff tape.

Operations record themselves on the innermost active :class:`Tape`.  Outside
a tape they compute values only, which is how inference runs.

    >>> x = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 2., 2.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "conv2d",
    "maxpool2d",
    "dense",
    "backward",
    "grad_check",
]


_COL_BUDGET = 64 * 2**20


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the graph.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, inputs: tuple["Tensor", ...], output: "Tensor", fn: BackwardFn) -> None:
        output._tape = self
        output._index = len(self.nodes)
        self.nodes.append(Node(inputs, output, fn))

    def backward(self, loss: "Tensor") -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Gradients add into existing ``.grad`` buffers, both across fan-out
        within this pass and across repeated passes; call ``zero_grad`` on the
        owners between steps.
        """
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._index + 1]):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                    else:
                        inp.grad += gi
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi

    def clear(self) -> None:
        self.nodes.clear()


class Tensor:
    """An N-dimensional float array with optional gradient tracking.

    Integer input is promoted to float32; float64 input stays float64, which
    is what gradient-check builds rely on.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # elementwise arithmetic ------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return _op(self.data + other.data, (self, other),
                   lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return _op(a * b, (self, other),
                   lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        shape = self.shape
        return _op(np.asarray(self.data.sum()), (self,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self) -> "Tensor":
        n = self.size
        return self.sum() * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def flatten(self) -> "Tensor":
        """[N, ...] -> [N, prod(...)] in row-major order."""
        return self.reshape(self.shape[0], -1)

    def channels(self, start: int, stop: int) -> "Tensor":
        """Slice ``[:, start:stop]`` along the channel axis."""
        full = self.shape

        def back(g):
            out = np.zeros(full, dtype=g.dtype)
            out[:, start:stop] = g
            return (out,)

        return _op(self.data[:, start:stop], (self,), back)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _op(data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, fn)
    return out


# convolution / pooling / dense ---------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an (F, C, kH, kW) kernel.

    1x1 kernels are a channel mix; larger ones go through im2col and a
    single matrix product.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output size is not an integer for input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    wdata = kernel.data

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        w2 = wdata[:, :, 0, 0]
        out = np.einsum("fc,nchw->nfhw", w2, xs, optimize=True)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def back(g):
            gx = np.einsum("fc,nfhw->nchw", w2, g, optimize=True)
            if stride != 1:
                full = np.zeros(x.shape, dtype=g.dtype)
                full[:, :, ::stride, ::stride] = gx
                gx = full
            gw = np.einsum("nfhw,nchw->fc", g, xs, optimize=True)[:, :, None, None]
            return gx, gw, (g.sum(axis=(0, 2, 3)) if bias is not None else None)

    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        wmat = wdata.reshape(f, -1)
        # batch chunks keep each im2col buffer near _COL_BUDGET bytes
        per_image = ho * wo * c * kh * kw * xp.itemsize
        step = max(1, min(n, _COL_BUDGET // max(per_image, 1)))
        chunks = [(i, min(i + step, n)) for i in range(0, n, step)]

        def im2col(a, b):
            win = sliding_window_view(xp[a:b], (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            return win.transpose(0, 2, 3, 1, 4, 5).reshape((b - a) * ho * wo, c * kh * kw)

        out = np.empty((n, f, ho, wo), dtype=np.result_type(x.data, wdata))
        for a, b in chunks:
            o = im2col(a, b) @ wmat.T
            if bias is not None:
                o += bias.data
            out[a:b] = o.reshape(b - a, ho, wo, f).transpose(0, 3, 1, 2)

        def back(g):
            # columns are rebuilt per chunk rather than kept alive on the tape
            gw = np.zeros((f, c * kh * kw), dtype=g.dtype)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a, b in chunks:
                gmat = g[a:b].transpose(0, 2, 3, 1).reshape(-1, f)
                gw += gmat.T @ im2col(a, b)
                dcols = (gmat @ wmat).reshape(b - a, ho, wo, c, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        gxp[a:b, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            db = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw.reshape(wdata.shape), db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _op(np.ascontiguousarray(out), inputs, back)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximum
    of each window in row-major order."""
    stride = window if stride is None else stride
    if stride != window:
        raise ShapeError("maxpool2d supports window == stride only")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} not divisible by {window}")
    ho, wo = h // window, w // window
    blocks = (x.data.reshape(n, c, ho, window, wo, window)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window))
    arg = blocks.argmax(axis=-1).astype(np.int8 if window * window < 128 else np.int64)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        gx = (routed.reshape(n, c, ho, wo, window, window)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        return (gx,)

    return _op(out, (x,), back)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weights + bias`` with x [N, D] and weights [D, K]."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    a, wm = x.data, weights.data
    out = a @ wm
    if bias is not None:
        out = out + bias.data

    def back(g):
        return g @ wm.T, a.T @ g, (g.sum(axis=0) if bias is not None else None)

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return _op(out, inputs, back)


# gradients ------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar produced on a tape."""
    if loss._tape is None:
        raise ValueError("backward called on a tensor that is not on any tape")
    loss._tape.backward(loss)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               samples: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` maps ``inputs`` to a scalar tensor.  With ``samples`` set, only that
    many randomly chosen coordinates per input are perturbed.  The relative
    error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    tape.backward(out)
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*inputs).item()
            flat[i] = orig - eps
            fm = f(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
