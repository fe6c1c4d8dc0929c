"""Layer catalogue: functional tape operations and their materialized modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .init import xavier_init
from .tensor import ShapeError, Tensor, _op, conv2d, dense, maxpool2d

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

KINDS = (
    "conv", "relu", "maxout", "maxpool", "global_maxpool", "batchnorm",
    "dropout", "dense", "flatten", "concat", "identity", "softmax",
)


# ---------------------------------------------------------------------------
# functional ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def maxout(x: Tensor, k: int) -> Tensor:
    """Max over k contiguous channel pieces: output channel c sees inputs k*c .. k*c+k-1."""
    c = x.shape[1]
    if c % k:
        raise ShapeError(f"maxout: {c} channels not divisible into {k} pieces")
    if k == 1:
        return x
    shape = x.shape
    grouped = x.data.reshape(shape[0], c // k, k, *shape[2:])
    arg = grouped.argmax(axis=2).astype(np.int8 if k < 128 else np.int64)
    out = np.take_along_axis(grouped, arg[:, :, None], axis=2)[:, :, 0]

    def back(g):
        routed = np.zeros(grouped.shape, dtype=g.dtype)
        np.put_along_axis(routed, arg[:, :, None], g[:, :, None], axis=2)
        return (routed.reshape(shape),)

    return _op(out, (x,), back)


@dataclass
class BatchNormState:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _bn_axes(x: Tensor) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects [N,C,H,W] or [N,D], got {x.shape}")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
              state: BatchNormState | None = None, eps: float = BN_EPS,
              momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization.

    Train mode uses batch statistics over every axis but the channel one and,
    when ``state`` is given, folds them into its running averages.  Infer
    mode uses ``state`` as is.
    """
    axes, bshape = _bn_axes(x)
    gam = gamma.data.reshape(bshape)
    if mode == "train":
        m = x.size // x.shape[1]
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least two values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            state.mean[...] = momentum * state.mean + (1 - momentum) * mu
            state.var[...] = momentum * state.var + (1 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)

        def back(g):
            dxhat = g * gam
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "infer":
        if state is None:
            raise ValueError("batchnorm in infer mode needs running statistics")
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean.reshape(bshape)) * inv.reshape(bshape)

        def back(g):
            return g * gam * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = (xhat * gam + beta.data.reshape(bshape)).astype(x.dtype)
    return _op(out, (x, gamma, beta), back)


def dropout(x: Tensor, p: float, mode: str = "train",
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in infer mode or when p == 0."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if mode == "infer" or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return _op(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, probs)``; only the loss carries gradient.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _op(np.asarray(loss, dtype=logits.dtype), (logits,), back), Tensor(probs)


def l2_penalty(params: Sequence[Tensor], lam: float) -> Tensor:
    """``lam * sum(||w||^2)``.  Pass weight tensors only; the caller decides
    what counts as a weight."""
    if lam < 0:
        raise ValueError("l2 lambda must be non-negative")
    params = list(params)
    dtype = params[0].dtype if params else np.float32
    total = sum(float(np.dot(p.data.ravel(), p.data.ravel())) for p in params)
    return _op(np.asarray(lam * total, dtype=dtype), tuple(params),
               lambda g: tuple(2 * lam * g * p.data for p in params))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Channel-axis concatenation in argument order."""
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _op(np.concatenate([t.data for t in xs], axis=1), tuple(xs), back)


# ---------------------------------------------------------------------------
# declarative specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int | None = None   # conv output maps, dense units
    kernel: int | None = None
    pieces: int | None = None     # maxout
    rate: float | None = None     # dropout
    window: int | None = None     # maxpool

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "maxout" and (self.pieces is None or self.pieces < 1):
            raise ValueError("maxout needs a positive piece count")
        if self.kind == "dropout" and not 0 <= (self.rate or 0) < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.kind == "conv" and self.kernel not in (1, 3):
            raise ValueError(f"conv kernel must be 1 or 3, got {self.kernel}")

    def __str__(self) -> str:
        k = self.kind
        if k == "conv":
            return f"conv {self.channels} {self.kernel}"
        if k == "dense":
            return f"dense {self.channels}"
        if k == "maxout":
            return f"maxout {self.pieces}"
        if k == "dropout":
            return f"dropout {self.rate:g}"
        if k == "maxpool":
            return f"maxpool {self.window}"
        return k

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        kind, *args = text.split()
        if kind == "conv":
            return cls("conv", channels=int(args[0]), kernel=int(args[1]))
        if kind == "dense":
            return cls("dense", channels=int(args[0]))
        if kind == "maxout":
            return cls("maxout", pieces=int(args[0]))
        if kind == "dropout":
            return cls("dropout", rate=float(args[0]))
        if kind == "maxpool":
            return cls("maxpool", window=int(args[0]))
        if args:
            raise ValueError(f"layer {kind!r} takes no arguments: {text!r}")
        return cls(kind)


def conv(channels: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel)


def fc(units: int) -> LayerSpec:
    return LayerSpec("dense", channels=units)


def maxout_spec(pieces: int) -> LayerSpec:
    return LayerSpec("maxout", pieces=pieces)


def drop(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def pool(window: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", window=window)


RELU = LayerSpec("relu")
BATCHNORM = LayerSpec("batchnorm")
FLATTEN = LayerSpec("flatten")
GLOBAL_MAXPOOL = LayerSpec("global_maxpool")
SOFTMAX = LayerSpec("softmax")
IDENTITY = LayerSpec("identity")


# ---------------------------------------------------------------------------
# materialized modules


@dataclass
class ForwardContext:
    mode: str = "infer"
    rng: np.random.Generator | None = None


@dataclass
class Layer:
    id: str
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: dict[str, Tensor] = field(default_factory=dict)
    state: BatchNormState | None = None

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        k, s = self.spec.kind, self.spec
        if k == "conv":
            return conv2d(x, self.params["W"], self.params["b"], 1, (s.kernel - 1) // 2)
        if k == "dense":
            return dense(x, self.params["W"], self.params["b"])
        if k == "relu":
            return relu(x)
        if k == "maxout":
            return maxout(x, s.pieces)
        if k == "maxpool":
            return maxpool2d(x, s.window)
        if k == "global_maxpool":
            return maxpool2d(x, x.shape[2])
        if k == "batchnorm":
            return batchnorm(x, self.params["gamma"], self.params["beta"], ctx.mode, self.state)
        if k == "dropout":
            return dropout(x, s.rate, ctx.mode, ctx.rng)
        if k == "flatten":
            return x.flatten()
        if k in ("identity", "softmax"):
            return x
        raise ValueError(f"layer kind {k!r} is not executable on its own")

    @property
    def weights(self) -> list[Tensor]:
        """Tensors subject to L2: kernels and dense matrices, never biases or BN affine terms."""
        return [self.params["W"]] if "W" in self.params else []


def make_layer(spec: LayerSpec, layer_id: str, in_shape: tuple[int, ...],
               rng: np.random.Generator, dtype=np.float32) -> Layer:
    """Materialize one layer for per-sample input shape ``in_shape``."""
    k = spec.kind
    params: dict[str, Tensor] = {}
    state = None
    out_shape = in_shape

    def param(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=f"{layer_id}.{name}")

    if k == "conv":
        if len(in_shape) != 3:
            raise ShapeError(f"{layer_id}: conv needs [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        shape = (spec.channels, c, spec.kernel, spec.kernel)
        param("W", xavier_init(shape, rng, dtype))
        param("b", np.zeros(spec.channels, dtype=dtype))
        out_shape = (spec.channels, h, w)
    elif k == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"{layer_id}: dense needs flat input, got {in_shape}")
        shape = (in_shape[0], spec.channels)
        param("W", xavier_init(shape, rng, dtype))
        param("b", np.zeros(spec.channels, dtype=dtype))
        out_shape = (spec.channels,)
    elif k == "maxout":
        if in_shape[0] % spec.pieces:
            raise ShapeError(f"{layer_id}: {in_shape[0]} channels not divisible by {spec.pieces}")
        out_shape = (in_shape[0] // spec.pieces,) + in_shape[1:]
    elif k == "maxpool":
        c, h, w = in_shape
        if h % spec.window or w % spec.window:
            raise ShapeError(f"{layer_id}: {h}x{w} not divisible by pool window {spec.window}")
        out_shape = (c, h // spec.window, w // spec.window)
    elif k == "global_maxpool":
        c, h, w = in_shape
        if h != w:
            raise ShapeError(f"{layer_id}: global pooling expects square maps, got {h}x{w}")
        out_shape = (c, 1, 1)
    elif k == "batchnorm":
        c = in_shape[0]
        param("gamma", np.ones(c, dtype=dtype))
        param("beta", np.zeros(c, dtype=dtype))
        state = BatchNormState.fresh(c, dtype)
    elif k == "flatten":
        out_shape = (int(np.prod(in_shape)),)
    return Layer(layer_id, spec, tuple(in_shape), tuple(out_shape), params, state)
