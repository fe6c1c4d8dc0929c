"""Adam and the epoch-driven training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import layers as L
from .checkpoint import save_checkpoint
from .data import AugmentConfig, Dataset, augment
from .graph import NetworkGraph
from .init import xavier_init  # noqa: F401  (re-exported)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> AdamState:
    """One Adam update applied in place to ``params``.

    Parameters with no gradient are treated as having a zero gradient, so
    their moments still decay.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


class Adam:
    """Adam over a fixed set of named tensors, reading their ``.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self) -> None:
        adam_step({n: t.data for n, t in self.params.items()},
                  {n: t.grad for n, t in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# ---------------------------------------------------------------------------
# training


REGIMES = {
    "kerasnet": dict(epochs=200, batch_size=32, l2_lambda=0.0),
    "fitnet4": dict(epochs=230, batch_size=128, l2_lambda=5e-4),
}


def regime_for(preset: str) -> dict:
    key = preset.lower().removeprefix("x-")
    if key not in REGIMES:
        raise ValueError(f"unknown preset {preset!r}")
    return dict(REGIMES[key])


@dataclass
class TrainConfig:
    preset: str = "kerasnet"
    epochs: int = 200
    batch_size: int = 32
    l2_lambda: float = 0.0
    augment: bool = True
    seed: int = 0
    lr: float = 1e-3
    test_subset: int | None = None  # evaluate on the first n test images
    max_shift: int = 4
    eval_every: int = 1  # 0 = evaluate after the final epoch only

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise ValueError("epochs and eval_every must be >= 0, batch_size >= 1")
        if self.l2_lambda < 0 or self.lr < 0:
            raise ValueError("l2_lambda and lr must be non-negative")

    @classmethod
    def for_preset(cls, preset: str, **overrides) -> "TrainConfig":
        """The published regime for ``preset`` with any fields overridden."""
        kw = regime_for(preset)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(preset=preset, **kw)


@dataclass
class TrainResult:
    history: list[dict]
    final_accuracy: float
    seconds: float
    checkpoint: Path | None = None


def accuracy(graph: NetworkGraph, data: Dataset, limit: int | None = None,
             batch_size: int = 100) -> float:
    """Top-1 accuracy in infer mode, as a fraction of ``data`` (or its first ``limit`` images)."""
    n = len(data) if limit is None else min(limit, len(data))
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = graph.predict(data.images[:n], batch_size)
    return float(np.mean(probs.argmax(axis=1) == data.labels[:n]))


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton joins the previous batch (batch norm needs m >= 2)."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def train_step(graph: NetworkGraph, opt: Adam, x: np.ndarray, y: np.ndarray,
               l2_lambda: float, rng: np.random.Generator) -> float:
    with Tape() as tape:
        logits = graph.forward(x, "train", rng)
        loss, _ = L.softmax_ce(logits, y)
        if l2_lambda:
            loss = loss + L.l2_penalty(graph.weights(), l2_lambda)
    value = loss.item()
    if not math.isfinite(value):
        tape.clear()
        return value
    tape.backward(loss)
    tape.clear()
    opt.step()
    opt.zero_grad()
    return value


def write_history(path, history: Sequence[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "test_accuracy"])
        w.writeheader()
        for row in history:
            w.writerow({"epoch": row["epoch"], "train_loss": f"{row['train_loss']:.6f}",
                        "test_accuracy": f"{row['test_accuracy']:.6f}"})
    return path


def train(graph: NetworkGraph, train_data: Dataset, test_data: Dataset | None,
          config: TrainConfig, out_dir=None) -> TrainResult:
    """Train ``graph`` in place.

    Batch order, dropout masks and augmentation draw from generators seeded
    by (seed, epoch) and (seed, epoch, batch), so a run is reproducible.
    With ``out_dir`` the history CSV, a history plot and the final
    checkpoint are written there.
    """
    n = len(train_data)
    if n == 0:
        raise TrainingError("training set is empty")
    opt = Adam(graph.params, lr=config.lr)
    aug = AugmentConfig(config.max_shift, True)
    history: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        losses = []
        for b, idx in enumerate(batches(n, config.batch_size, np.random.default_rng([config.seed, epoch]))):
            rng = np.random.default_rng([config.seed, epoch, b])
            x = train_data.images[idx]
            if config.augment:
                x = augment(x, aug, rng)
            value = train_step(graph, opt, x, train_data.labels[idx], config.l2_lambda, rng)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss ({value}) at epoch {epoch}, batch {b}")
            losses.append(value)
        due = epoch == config.epochs or (config.eval_every and epoch % config.eval_every == 0)
        acc = accuracy(graph, test_data, config.test_subset) if test_data is not None and due else float("nan")
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "test_accuracy": acc})
        log.info("%s seed %d epoch %d/%d loss %.4f test acc %.2f%%", graph.spec.name, config.seed,
                 epoch, config.epochs, history[-1]["train_loss"], 100 * acc)
    seconds = time.perf_counter() - t0
    final = history[-1]["test_accuracy"] if history else (
        accuracy(graph, test_data, config.test_subset) if test_data is not None else float("nan"))
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history(out / "history.csv", history)
        extras = {}
        if train_data.stats is not None:
            extras = {"input_mean": train_data.stats.mean, "input_std": train_data.stats.std}
        meta = {"train_config": asdict(config), "colourspace": train_data.colourspace,
                "train_size": n, "final_accuracy": final}
        ckpt = save_checkpoint(out / "checkpoint.xcnn", graph, extras, json.loads(json.dumps(meta)))
        if history:
            from .plotting import plot_history
            plot_history(history, out / "history.png", title=f"{graph.spec.name} seed {config.seed}")
    return TrainResult(history, final, seconds, ckpt)
