"""Cross-modal network construction.

An :class:`ArchitectureSpec` describes one or more superlayers (each a CNN
over a subset of input channels), optional cross-connection segments placed
after pooling points, and a single shared tail fed by the channel
concatenation of every superlayer's output.  A baseline CNN is the special
case of one superlayer that sees all channels and has no cross segments.

:func:`build` materializes a spec into a :class:`NetworkGraph`;
:func:`build_preset` does so for the four reference architectures.
"""

from __future__ import annotations

import configparser
import graphlib
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import layers as L
from .layers import ForwardContext, Layer, LayerSpec, concat, make_layer
from .tensor import ShapeError, Tensor

PRESETS = ("kerasnet", "x-kerasnet", "fitnet4", "x-fitnet4")

# Reported parameter counts of the reference architectures (10 classes).
REFERENCE_PARAMS = {
    "kerasnet": 4.46e6,
    "x-kerasnet": 4.37e6,
    "fitnet4": 2.75e6,
    "x-fitnet4": 2.72e6,
}

BASELINE_OF = {"x-kerasnet": "kerasnet", "x-fitnet4": "fitnet4"}


@dataclass
class SuperlayerSpec:
    name: str
    channels: tuple[int, ...]
    stages: list[list[LayerSpec]]

    def __post_init__(self):
        ch = tuple(self.channels)
        if not ch or list(ch) != list(range(ch[0], ch[0] + len(ch))):
            raise ValueError(f"superlayer {self.name}: channels must be a contiguous range, got {ch}")
        self.channels = ch

    @property
    def pool_count(self) -> int:
        return sum(s.kind in ("maxpool", "global_maxpool") for stage in self.stages for s in stage)


@dataclass
class CrossConnectionSpec:
    """Exchange between superlayers after pooling point ``after_pool_index`` (0-based).

    ``self_edges`` maps a superlayer to the layers applied to its own maps
    (empty list or a missing entry means identity).  ``cross_edges`` maps
    ``(source, destination)`` to the layers applied before the maps join the
    destination.  Each destination concatenates its self edge first, then
    incoming edges in superlayer order.
    """

    after_pool_index: int
    self_edges: dict[str, list[LayerSpec]] = field(default_factory=dict)
    cross_edges: dict[tuple[str, str], list[LayerSpec]] = field(default_factory=dict)


@dataclass
class ArchitectureSpec:
    name: str
    superlayers: list[SuperlayerSpec]
    cross: list[CrossConnectionSpec]
    tail: list[LayerSpec]
    num_classes: int
    input_channels: int = 3
    input_size: int = 32

    def validate(self) -> None:
        names = [s.name for s in self.superlayers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate superlayer names in {names}")
        counts = {s.name: s.pool_count for s in self.superlayers}
        if len(set(counts.values())) > 1:
            raise ValueError(f"superlayers disagree on pooling points: {counts}")
        stages = {len(s.stages) for s in self.superlayers}
        if len(stages) > 1:
            raise ValueError("superlayers must have the same number of stages")
        n_stages = stages.pop()
        for sl in self.superlayers:
            if sl.channels[-1] >= self.input_channels:
                raise ValueError(f"superlayer {sl.name} reads channel beyond input ({self.input_channels})")
        seen = set()
        for seg in self.cross:
            if not 0 <= seg.after_pool_index < n_stages:
                raise ValueError(f"cross segment after pool {seg.after_pool_index} has no matching stage")
            if seg.after_pool_index in seen:
                raise ValueError(f"two cross segments after pool {seg.after_pool_index}")
            seen.add(seg.after_pool_index)
            for src, dst in seg.cross_edges:
                if src == dst or src not in names or dst not in names:
                    raise ValueError(f"invalid cross edge {src}->{dst}")
            for s in seg.self_edges:
                if s not in names:
                    raise ValueError(f"self edge for unknown superlayer {s}")


# ---------------------------------------------------------------------------
# presets


def _repeat(block: list[LayerSpec], n: int) -> list[LayerSpec]:
    return [s for _ in range(n) for s in block]


def _relu_conv(c: int) -> list[LayerSpec]:
    return [L.conv(c, 3), L.RELU]


def _maxout_conv(c: int, kernel: int = 3, bn_position: str = "post") -> list[LayerSpec]:
    """A maxout conv layer with ``c`` output maps (2c linear pieces) plus batch norm."""
    if bn_position == "post":
        return [L.conv(2 * c, kernel), L.maxout_spec(2), L.BATCHNORM]
    if bn_position == "pre":
        return [L.conv(2 * c, kernel), L.BATCHNORM, L.maxout_spec(2)]
    raise ValueError(f"bn_position must be 'pre' or 'post', got {bn_position!r}")


def _kerasnet_stages(c1: int, c2: int) -> list[list[LayerSpec]]:
    return [
        _repeat(_relu_conv(c1), 2) + [L.pool(2), L.drop(0.25)],
        _repeat(_relu_conv(c2), 2) + [L.pool(2), L.drop(0.25)],
    ]


def _kerasnet_tail(num_classes: int) -> list[LayerSpec]:
    return [L.FLATTEN, L.fc(512), L.RELU, L.drop(0.5), L.fc(num_classes), L.SOFTMAX]


def _fitnet_stages(widths: tuple[int, int, int, int], bn: str) -> list[list[LayerSpec]]:
    a, b, c, d = widths
    mx = lambda n: _maxout_conv(n, 3, bn)  # noqa: E731
    return [
        [L.drop(0.2)] + _repeat(mx(a), 3) + _repeat(mx(b), 2) + [L.pool(2), L.drop(0.2)],
        _repeat(mx(c), 6) + [L.pool(2), L.drop(0.2)],
        _repeat(mx(d), 6) + [L.GLOBAL_MAXPOOL, L.drop(0.2)],
    ]


def _fitnet_tail(num_classes: int, bn: str) -> list[LayerSpec]:
    if bn == "post":
        hidden = [L.fc(2500), L.maxout_spec(5), L.BATCHNORM]
    else:
        hidden = [L.fc(2500), L.BATCHNORM, L.maxout_spec(5)]
    return [L.FLATTEN] + hidden + [L.drop(0.2), L.fc(num_classes), L.SOFTMAX]


def _fitnet_cross_edge(c: int, maxout: bool, bn: str) -> list[LayerSpec]:
    if maxout:
        return _maxout_conv(c, 1, bn)
    return [L.conv(c, 1), L.BATCHNORM]


def preset_spec(name: str, num_classes: int = 10, *, input_size: int = 32,
                cross_maxout: bool = False, bn_position: str = "post") -> ArchitectureSpec:
    """Declarative description of one of the four reference networks.

    ``cross_maxout`` makes the X-FitNet4 1x1 cross/self edges 2-way maxout
    layers instead of linear maps; ``bn_position`` puts FitNet batch norm
    before or after the maxout.
    """
    if name == "kerasnet":
        sls = [SuperlayerSpec("YUV", (0, 1, 2), _kerasnet_stages(64, 128))]
        return ArchitectureSpec(name, sls, [], _kerasnet_tail(num_classes), num_classes,
                                input_size=input_size)
    if name == "x-kerasnet":
        sls = [
            SuperlayerSpec("Y", (0,), _kerasnet_stages(32, 64)),
            SuperlayerSpec("U", (1,), _kerasnet_stages(16, 32)),
            SuperlayerSpec("V", (2,), _kerasnet_stages(16, 32)),
        ]
        edge = lambda c: [L.conv(c, 1), L.RELU]  # noqa: E731
        seg = CrossConnectionSpec(
            0,
            {"Y": [], "U": [], "V": []},
            {("Y", "U"): edge(32), ("Y", "V"): edge(32), ("U", "Y"): edge(16), ("V", "Y"): edge(16)},
        )
        return ArchitectureSpec(name, sls, [seg], _kerasnet_tail(num_classes), num_classes,
                                input_size=input_size)
    if name == "fitnet4":
        sls = [SuperlayerSpec("YUV", (0, 1, 2), _fitnet_stages((32, 48, 80, 128), bn_position))]
        return ArchitectureSpec(name, sls, [], _fitnet_tail(num_classes, bn_position), num_classes,
                                input_size=input_size)
    if name == "x-fitnet4":
        sls = [
            SuperlayerSpec("Y", (0,), _fitnet_stages((24, 36, 60, 96), bn_position)),
            SuperlayerSpec("U", (1,), _fitnet_stages((12, 18, 30, 48), bn_position)),
            SuperlayerSpec("V", (2,), _fitnet_stages((12, 18, 30, 48), bn_position)),
        ]
        e = lambda c: _fitnet_cross_edge(c, cross_maxout, bn_position)  # noqa: E731
        segs = [
            CrossConnectionSpec(
                0,
                {"Y": e(36), "U": e(18), "V": e(18)},
                {("Y", "U"): e(12), ("Y", "V"): e(12), ("U", "Y"): e(12), ("V", "Y"): e(12)},
            ),
            CrossConnectionSpec(
                1,
                {"Y": e(60), "U": e(30), "V": e(30)},
                {("Y", "U"): e(18), ("Y", "V"): e(18), ("U", "Y"): e(18), ("V", "Y"): e(18)},
            ),
        ]
        return ArchitectureSpec(name, sls, segs, _fitnet_tail(num_classes, bn_position), num_classes,
                                input_size=input_size)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# materialized graph


def _run(layers_: Iterable[Layer], x: Tensor, ctx: ForwardContext, capture: dict | None) -> Tensor:
    for layer in layers_:
        x = layer(x, ctx)
        if capture is not None:
            capture[layer.id] = x
    return x


@dataclass
class CrossSegment:
    """Materialized cross-connection segment."""

    name: str
    order: list[str]
    edges: dict[tuple[str, str], list[Layer]]
    out_channels: dict[str, int]

    def __call__(self, features: Mapping[str, Tensor], ctx: ForwardContext,
                 capture: dict | None = None) -> dict[str, Tensor]:
        return make_cross_segment(features, self, ctx, capture)


def make_cross_segment(features: Mapping[str, Tensor], segment: CrossSegment,
                       ctx: ForwardContext | None = None,
                       capture: dict | None = None) -> dict[str, Tensor]:
    """Apply a cross segment: per destination, concatenate its self edge and incoming edges."""
    ctx = ctx or ForwardContext()
    spatial = {k: v.shape[2:] for k, v in features.items()}
    if len(set(spatial.values())) > 1:
        raise ShapeError(f"cross segment {segment.name}: spatial sizes differ {spatial}")
    out = {}
    for dst in segment.order:
        parts = []
        for src in [dst] + [s for s in segment.order if s != dst]:
            if (src, dst) not in segment.edges:
                continue
            y = _run(segment.edges[(src, dst)], features[src], ctx, capture)
            if capture is not None:
                capture[f"{segment.name}.{src}->{dst}"] = y
            parts.append(y)
        out[dst] = concat(parts)
        if capture is not None:
            capture[f"{segment.name}.{dst}"] = out[dst]
    return out


def _build_segment(seg: CrossConnectionSpec, name: str, order: list[str],
                   shapes: dict[str, tuple[int, ...]], rng, dtype) -> CrossSegment:
    edges: dict[tuple[str, str], list[Layer]] = {}
    out_channels = {}
    for dst in order:
        total = 0
        for src in [dst] + [s for s in order if s != dst]:
            if src == dst:
                specs = seg.self_edges.get(dst, [])
            elif (src, dst) in seg.cross_edges:
                specs = seg.cross_edges[(src, dst)]
            else:
                continue
            shape = shapes[src]
            built = []
            for i, s in enumerate(specs):
                layer = make_layer(s, f"{name}.{src}->{dst}.{i}.{s.kind}", shape, rng, dtype)
                built.append(layer)
                shape = layer.out_shape
            edges[(src, dst)] = built
            total += shape[0]
        out_channels[dst] = total
    return CrossSegment(name, list(order), edges, out_channels)


@dataclass
class Step:
    name: str
    kind: str  # slice | seq | cross | alias | concat
    inputs: list[str]
    layers: list[Layer] = field(default_factory=list)
    segment: CrossSegment | None = None
    channels: tuple[int, int] | None = None


class NetworkGraph:
    """Parameters plus an executable forward program for one architecture."""

    def __init__(self, spec: ArchitectureSpec, steps: list[Step], dtype):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self._steps = {s.name: s for s in steps}
        self.order = [n for n in graphlib.TopologicalSorter(self.dag()).static_order() if n != "input"]

    # structure -----------------------------------------------------------

    def dag(self) -> dict[str, set[str]]:
        """Step name -> names of the steps it reads from."""
        return {name: set(step.inputs) for name, step in self._steps.items()}

    @property
    def steps(self) -> list[Step]:
        return [self._steps[n] for n in self.order]

    def layers(self) -> list[Layer]:
        out = []
        for step in self.steps:
            out.extend(step.layers)
            if step.segment is not None:
                for edge in step.segment.edges.values():
                    out.extend(edge)
        return out

    def layer(self, layer_id: str) -> Layer:
        for layer in self.layers():
            if layer.id == layer_id:
                return layer
        raise KeyError(f"no layer {layer_id!r}")

    @property
    def params(self) -> dict[str, Tensor]:
        return {t.name: t for layer in self.layers() for t in layer.params.values()}

    def weights(self) -> list[Tensor]:
        return [w for layer in self.layers() for w in layer.weights]

    def bn_states(self) -> dict[str, L.BatchNormState]:
        return {layer.id: layer.state for layer in self.layers() if layer.state is not None}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # execution -----------------------------------------------------------

    def forward(self, x, mode: str = "infer", rng: np.random.Generator | None = None,
                capture: bool = False, stop_at: str | None = None):
        """Logits for an [N, C, S, S] batch.

        With ``capture`` the return value is ``(output, activations)`` where
        activations maps every step name and layer id to its output.
        ``stop_at`` ends execution once that step or layer has been produced
        and returns its value instead of the logits.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        c, s = self.spec.input_channels, self.spec.input_size
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError(f"expected input with {c} channels [N,{c},{s},{s}], got {x.shape}")
        if x.shape[2:] != (s, s):
            raise ShapeError(f"expected {s}x{s} input, got {x.shape[2]}x{x.shape[3]}")
        ctx = ForwardContext(mode, rng)
        acts: dict[str, Tensor] = {"input": x}
        for step in self.steps:
            if step.kind == "slice":
                a, b = step.channels
                src = acts[step.inputs[0]]
                acts[step.name] = src if (a, b) == (0, c) else src.channels(a, b)
            elif step.kind == "seq":
                acts[step.name] = _run(step.layers, acts[step.inputs[0]], ctx, acts)
            elif step.kind == "concat":
                acts[step.name] = concat([acts[i] for i in step.inputs])
            elif step.kind == "cross":
                feats = dict(zip(step.segment.order, (acts[i] for i in step.inputs)))
                acts.update(step.segment(feats, ctx, acts))
            if stop_at is not None and stop_at in acts:
                return (acts[stop_at], acts) if capture else acts[stop_at]
        if stop_at is not None:
            raise KeyError(f"no step or layer {stop_at!r}")
        out = acts["tail"]
        return (out, acts) if capture else out

    def predict(self, x, batch_size: int = 100) -> np.ndarray:
        """Class probabilities (infer mode)."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        parts = [L.softmax(self.forward(x[i:i + batch_size]).data)
                 for i in range(0, len(x), batch_size)]
        return np.concatenate(parts) if parts else np.zeros((0, self.spec.num_classes))


def build(spec: ArchitectureSpec, rng: np.random.Generator | int | None = 0,
          dtype=np.float32) -> NetworkGraph:
    spec.validate()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s = spec.input_size
    steps: list[Step] = []
    current: dict[str, str] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    order = [sl.name for sl in spec.superlayers]
    for sl in spec.superlayers:
        a, b = sl.channels[0], sl.channels[-1] + 1
        steps.append(Step(f"{sl.name}.in", "slice", ["input"], channels=(a, b)))
        current[sl.name] = f"{sl.name}.in"
        shapes[sl.name] = (b - a, s, s)
    cross_at = {seg.after_pool_index: seg for seg in spec.cross}
    n_stages = len(spec.superlayers[0].stages)
    for i in range(n_stages):
        for sl in spec.superlayers:
            name = f"{sl.name}.s{i}"
            built, shape = [], shapes[sl.name]
            for j, ls in enumerate(sl.stages[i]):
                layer = make_layer(ls, f"{name}.{j}.{ls.kind}", shape, rng, dtype)
                built.append(layer)
                shape = layer.out_shape
            steps.append(Step(name, "seq", [current[sl.name]], built))
            current[sl.name], shapes[sl.name] = name, shape
        if i in cross_at:
            name = f"x{spec.cross.index(cross_at[i])}"
            seg = _build_segment(cross_at[i], name, order, shapes, rng, dtype)
            steps.append(Step(name, "cross", [current[n] for n in order], segment=seg))
            for n in order:
                # zero-work alias so the merged maps are a named DAG node
                steps.append(Step(f"{name}.{n}", "alias", [name]))
                current[n] = f"{name}.{n}"
                shapes[n] = (seg.out_channels[n],) + shapes[n][1:]
    spatial = {shapes[n][1:] for n in order}
    if len(spatial) > 1:
        raise ShapeError(f"superlayer outputs disagree on spatial size: {spatial}")
    tail_in = [current[n] for n in order]
    steps.append(Step("tail.in", "concat", tail_in))
    shape = (sum(shapes[n][0] for n in order),) + shapes[order[0]][1:]
    built = []
    for j, ls in enumerate(t for t in spec.tail if t.kind != "softmax"):
        layer = make_layer(ls, f"tail.{j}.{ls.kind}", shape, rng, dtype)
        built.append(layer)
        shape = layer.out_shape
    if shape != (spec.num_classes,):
        raise ShapeError(f"tail produces {shape}, expected ({spec.num_classes},)")
    steps.append(Step("tail", "seq", ["tail.in"], built))
    return NetworkGraph(spec, steps, dtype)


def build_preset(name: str, num_classes: int = 10, rng: np.random.Generator | int | None = 0,
                 dtype=np.float32, **options) -> NetworkGraph:
    if num_classes not in (10, 100):
        raise ValueError("presets are defined for 10 or 100 classes")
    return build(preset_spec(name, num_classes, **options), rng, dtype)


def count_params(graph: NetworkGraph) -> int:
    """Number of trainable scalars: kernels, biases, dense weights, batch-norm gamma and beta."""
    return int(sum(p.size for p in graph.params.values()))


# ---------------------------------------------------------------------------
# plain-text architecture config


def spec_to_config(spec: ArchitectureSpec) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["network"] = {
        "name": spec.name,
        "num_classes": str(spec.num_classes),
        "input_channels": str(spec.input_channels),
        "input_size": str(spec.input_size),
    }
    join = lambda specs: ", ".join(str(s) for s in specs) if specs else "identity"  # noqa: E731
    for sl in spec.superlayers:
        sec = {"channels": ",".join(map(str, sl.channels))}
        for i, stage in enumerate(sl.stages):
            sec[f"stage{i}"] = join(stage)
        cp[f"superlayer {sl.name}"] = sec
    for k, seg in enumerate(spec.cross):
        sec = {"after_pool": str(seg.after_pool_index)}
        for n, specs in seg.self_edges.items():
            sec[f"{n}->{n}"] = join(specs)
        for (a, b), specs in seg.cross_edges.items():
            sec[f"{a}->{b}"] = join(specs)
        cp[f"cross {k}"] = sec
    cp["tail"] = {"layers": join(spec.tail)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _parse_layers(text: str) -> list[LayerSpec]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if items == ["identity"]:
        return []
    return [LayerSpec.parse(t) for t in items]


def spec_from_config(text: str) -> ArchitectureSpec:
    """Parse the INI-style architecture description written by :func:`spec_to_config`."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    net = cp["network"]
    superlayers, cross = [], []
    for section in cp.sections():
        if section.startswith("superlayer "):
            sec = cp[section]
            stages = []
            i = 0
            while f"stage{i}" in sec:
                stages.append(_parse_layers(sec[f"stage{i}"]))
                i += 1
            chans = tuple(int(c) for c in sec["channels"].split(","))
            superlayers.append(SuperlayerSpec(section.split(None, 1)[1], chans, stages))
        elif section.startswith("cross "):
            sec = cp[section]
            seg = CrossConnectionSpec(int(sec["after_pool"]))
            for key, value in sec.items():
                if "->" not in key:
                    continue
                a, b = (p.strip() for p in key.split("->"))
                if a == b:
                    seg.self_edges[a] = _parse_layers(value)
                else:
                    seg.cross_edges[(a, b)] = _parse_layers(value)
            cross.append(seg)
    spec = ArchitectureSpec(
        net["name"], superlayers, cross, _parse_layers(cp["tail"]["layers"]),
        int(net["num_classes"]), int(net.get("input_channels", "3")), int(net.get("input_size", "32")),
    )
    spec.validate()
    return spec
