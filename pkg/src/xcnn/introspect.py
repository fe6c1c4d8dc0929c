"""Looking inside trained networks: 1x1 weight heatmaps, activation
maximization and a colour mapping for deep feature maps.

Images are written as binary PPM (P6) so the output is bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import NetworkGraph
from .tensor import Tape, Tensor

CELL = 16


class IntrospectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM


def write_ppm(path, pixels: np.ndarray) -> Path:
    """Write an [H, W, 3] uint8 array as binary PPM."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected [H, W, 3] uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[H, W, 3] or [3, H, W] floats in [0, 1] to uint8 HWC."""
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[2] != 3:
        image = image.transpose(1, 2, 0)
    return np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# weight heatmaps


@dataclass
class HeatmapImage:
    pixels: np.ndarray  # [rows*cell, cols*cell, 3] uint8
    rows: int           # output channels
    cols: int           # input channels
    max_abs: float
    cell: int = CELL
    layer_id: str = ""

    @property
    def legend(self) -> str:
        return (f"{self.layer_id}: {self.rows} outputs x {self.cols} inputs; green = positive, "
                f"blue = negative, full colour = |w| {self.max_abs:.4g}")


def weight_colours(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """One RGB triple per weight; white at zero, full green/blue at the largest |w|."""
    m = np.asarray(matrix, dtype=np.float64)
    peak = float(np.abs(m).max()) if m.size else 0.0
    a = np.abs(m) / peak if peak > 0 else np.zeros_like(m)
    fade = np.rint(255 * (1 - a))
    fade = np.where(m != 0, np.minimum(fade, 254), 255).astype(np.uint8)  # tiny weights keep a tint
    full = np.full_like(fade, 255)
    pos = m > 0
    rgb = np.stack([fade, np.where(pos, full, fade), np.where(pos, fade, full)], axis=-1)
    return rgb, peak


def heatmap_from_matrix(matrix: np.ndarray, cell: int = CELL, layer_id: str = "") -> HeatmapImage:
    """Render an [out, in] weight table, one ``cell`` x ``cell`` block per weight."""
    rgb, peak = weight_colours(matrix)
    pixels = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    return HeatmapImage(pixels, matrix.shape[0], matrix.shape[1], peak, cell, layer_id)


def weight_heatmap(graph: NetworkGraph, layer_id: str, cell: int = CELL) -> HeatmapImage:
    layer = graph.layer(layer_id)
    if layer.spec.kind != "conv" or layer.spec.kernel != 1:
        raise IntrospectionError(f"{layer_id} is not a 1x1 convolution")
    return heatmap_from_matrix(layer.params["W"].data[:, :, 0, 0], cell, layer_id)


def decode_heatmap(pixels: np.ndarray, cell: int = CELL) -> tuple[np.ndarray, np.ndarray]:
    """(sign, |w|/max|w|) per cell, read back from the centre pixel of each cell."""
    centre = pixels[cell // 2::cell, cell // 2::cell].astype(np.int64)
    r, g, b = centre[..., 0], centre[..., 1], centre[..., 2]
    sign = np.sign(g - b)
    mag = np.where(sign == 0, 0.0, 1 - r / 255.0)
    return sign, mag


def cross_layer_ids(graph: NetworkGraph, between: bool = False) -> list[str]:
    """Ids of every 1x1 convolution inside cross-connection segments.

    ``between`` keeps only edges joining two different superlayers.
    """
    out = []
    for layer in graph.layers():
        if not (layer.id.startswith("x") and layer.spec.kind == "conv" and layer.spec.kernel == 1):
            continue
        src, dst = layer.id.split(".")[1].split("->")
        if not between or src != dst:
            out.append(layer.id)
    return out


# ---------------------------------------------------------------------------
# activation maximization


@dataclass(frozen=True)
class AscentConfig:
    lam: float = 0.05
    steps: int = 200
    step_size: float = 1.0
    init_scale: float = 0.1
    min_step: float = 1e-12

    def __post_init__(self):
        if self.steps < 1 or self.lam < 0 or self.step_size <= 0 or self.init_scale < 0:
            raise ValueError("need steps >= 1, lam >= 0, step_size > 0, init_scale >= 0")


@dataclass
class AscentResult:
    image: np.ndarray            # [C, H, W] min-max rescaled to [0, 1]
    raw: np.ndarray              # [C, H, W] final ascent iterate
    objectives: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)


def _objective(graph: NetworkGraph, image: np.ndarray, layer_id: str, channel: int,
               lam: float, grad: bool):
    x = Tensor(image[None], requires_grad=grad)
    with Tape() as tape:
        act = graph.forward(x, "infer", stop_at=layer_id)
        if not 0 <= channel < act.shape[1]:
            raise IntrospectionError(f"{layer_id} has {act.shape[1]} channels, got channel {channel}")
        j = act.channels(channel, channel + 1).mean() - (x * x).sum() * lam
    if grad:
        tape.backward(j)
        g = x.grad[0]
        tape.clear()
        return j.item(), g
    return j.item(), None


def rescale(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if not hi > lo:
        return np.full_like(image, 0.5)
    return (image - lo) / (hi - lo)


def activation_maximize(graph: NetworkGraph, layer_id: str, channel: int,
                        config: AscentConfig = AscentConfig(),
                        rng: np.random.Generator | int | None = 0) -> AscentResult:
    """Gradient ascent on J(I) = mean activation of ``channel`` - lam * ||I||^2.

    Starts from seeded white noise.  A step is accepted only if it does not
    lower J; otherwise the step size is halved and retried, so the recorded
    objective sequence is non-decreasing.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    c, s = graph.spec.input_channels, graph.spec.input_size
    image = (config.init_scale * rng.standard_normal((c, s, s))).astype(graph.dtype)
    j, g = _objective(graph, image, layer_id, channel, config.lam, True)
    objectives, sizes = [j], []
    step = config.step_size
    for i in range(config.steps):
        if not (math.isfinite(j) and np.all(np.isfinite(g))):
            raise IntrospectionError(f"non-finite ascent at step {i}")
        while step >= config.min_step:
            cand = (image + step * g).astype(graph.dtype)
            j_new, _ = _objective(graph, cand, layer_id, channel, config.lam, False)
            if not math.isfinite(j_new):
                raise IntrospectionError(f"non-finite ascent at step {i}")
            if j_new >= j:
                break
            step /= 2
        else:
            break  # no ascent direction left at representable step sizes
        image = cand
        j, g = _objective(graph, image, layer_id, channel, config.lam, True)
        objectives.append(j)
        sizes.append(step)
    return AscentResult(rescale(image), image, objectives, sizes)


# ---------------------------------------------------------------------------
# feature maps


def projection(channels: int, seed: int = 0) -> np.ndarray:
    """[3, C] display projection; identity for C = 3, else seeded Gaussian rows of unit norm."""
    if channels < 1:
        raise ValueError("need at least one channel")
    if channels == 3:
        return np.eye(3)
    p = np.random.default_rng([seed, channels]).standard_normal((3, channels))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def feature_map_rgb(features: np.ndarray, seed: int = 0) -> np.ndarray:
    """Project [C, H, W] features onto RGB and rescale to [0, 1]; returns [H, W, 3]."""
    f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"expected [C, H, W] features, got shape {f.shape}")
    rgb = np.einsum("dc,chw->hwd", projection(f.shape[0], seed), f)
    return rescale(rgb)


def layer_features(graph: NetworkGraph, image: np.ndarray, layer_id: str) -> np.ndarray:
    """Activations of ``layer_id`` (a layer id or step name) for one [C, H, W] image."""
    act = graph.forward(np.asarray(image, dtype=graph.dtype)[None], "infer", stop_at=layer_id)
    if act.ndim != 4:
        raise IntrospectionError(f"{layer_id} output is not a feature map (shape {act.shape})")
    return act.data[0]
