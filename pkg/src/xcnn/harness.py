"""Data-sparsity sweep, significance tests and report emission.

A sweep trains every requested model on the first p% of the training set
for each scheduled p and seed, then writes ``results.csv``, ``report.md``
and an accuracy-vs-p figure.  When no explicit points are given the
schedule is adaptive: 1, 5, 10, 15, 20, 30, 40, 50, then steps of 10 while
the baseline/cross-modal accuracy gap stays above half a point, then 100.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .data import Dataset, load_or_synthesize, prepare
from .graph import BASELINE_OF, build_preset, count_params
from .optim import TrainConfig, accuracy, train

log = logging.getLogger(__name__)

BASE_POINTS = (1, 5, 10, 15, 20, 30, 40, 50)
ALL_POINTS = BASE_POINTS + (60, 70, 80, 90, 100)
GAP = 0.005  # half a percentage point, as a fraction


# ---------------------------------------------------------------------------
# schedule


def _pairs(entry) -> list[tuple[float, float]]:
    """Normalize a history entry to a list of (baseline, cross-modal) accuracy pairs."""
    if isinstance(entry, Mapping):
        entry = list(entry.values())
    if len(entry) == 2 and all(isinstance(v, (int, float, np.floating)) for v in entry):
        return [(float(entry[0]), float(entry[1]))]
    return [(float(a), float(b)) for a, b in entry]


def keeps_extending(entry, rule: str = "any") -> bool:
    """Whether the schedule continues past a point whose results are ``entry``.

    ``rule="any"`` stops as soon as one model pair is within the gap;
    ``rule="all"`` keeps going while any pair is still apart.
    """
    # the tolerance keeps a gap of exactly half a point (0.505 - 0.5 in floats) inside
    gaps = [abs(a - b) - 1e-12 for a, b in _pairs(entry)]
    if rule == "any":
        return min(gaps) > GAP
    if rule == "all":
        return max(gaps) > GAP
    raise ValueError(f"unknown schedule rule {rule!r}")


def next_point(history: Mapping[float, object], rule: str = "any") -> int | None:
    """The next p to run given results so far, or None when the schedule is complete.

    ``history`` maps p to (acc_base, acc_x) fractions, or to a list/dict of
    such pairs when several model pairs are swept together.
    """
    for p in BASE_POINTS:
        if p not in history:
            return p
    p = 50
    while p < 90 and keeps_extending(history[p], rule):
        p += 10
        if p not in history:
            return p
    return None if 100 in history else 100


def schedule_points(history: Mapping[float, object], rule: str = "any") -> list[int]:
    """Every point the schedule visits given ``history``.

    Stops at the first point whose result is still missing (that point is
    included); with a complete history the list ends with 100.
    """
    seen: dict = {}
    out = []
    while (p := next_point(seen, rule)) is not None:
        out.append(p)
        if p not in history:
            break
        seen[p] = history[p]
    return out


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class TTestResult:
    t: float
    p_value: float
    df: float
    significant: bool


def t_test(a: Sequence[float], b: Sequence[float], equal_var: bool = False,
           alpha: float = 0.05) -> TTestResult:
    """Two-sided two-sample t-test (Welch by default, Student with ``equal_var``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("t_test needs at least two samples per group")
    diff = a.mean() - b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if equal_var:
        df = na + nb - 2
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = pooled * (1 / na + 1 / nb)
    else:
        se2 = va / na + vb / nb
        df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1)) if se2 > 0 else na + nb - 2
    if se2 == 0:
        if diff == 0:
            return TTestResult(0.0, 1.0, float(df), False)
        return TTestResult(math.copysign(math.inf, diff), 0.0, float(df), True)
    t = diff / math.sqrt(se2)
    p = float(min(1.0, 2 * stats.t.sf(abs(t), df)))
    return TTestResult(float(t), p, float(df), p < alpha)


# ---------------------------------------------------------------------------
# sweep


@dataclass
class RunResult:
    model: str
    p: float
    seed: int
    final_accuracy: float  # fraction in [0, 1]; nan for a failed run
    history: list[float] = field(default_factory=list)
    params: int = 0
    wall_seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class SweepConfig:
    models: list[str] = field(default_factory=lambda: ["kerasnet", "x-kerasnet"])
    dataset: str = "cifar10"
    augment: bool = False
    seeds: list[int] = field(default_factory=lambda: [0])
    points: list[float] | None = None  # None = adaptive schedule
    epochs: int | None = None
    batch_size: int | None = None
    lr: float = 1e-3
    test_subset: int | None = None
    eval_every: int = 1
    stratified: bool = False
    rule: str = "any"
    equal_var: bool = False
    data_dir: str | None = None
    synthetic: bool = False
    synthetic_size: tuple[int, int] = (50000, 10000)
    dry_run: bool = False
    strict: bool = True  # insist on canonical CIFAR record counts
    save_checkpoints: bool = True


def model_pairs(models: Sequence[str]) -> list[tuple[str, str]]:
    """(baseline, cross-modal) pairs present in ``models``, in request order."""
    return [(BASELINE_OF[m], m) for m in models if m in BASELINE_OF and BASELINE_OF[m] in models]


def plan(config: SweepConfig) -> list[tuple[str, float, int]]:
    """The (model, p, seed) grid; adaptive sweeps list the unconditional points plus 100."""
    points = config.points if config.points is not None else list(BASE_POINTS) + [100]
    return [(m, p, s) for p in points for m in config.models for s in config.seeds]


def load_data(config: SweepConfig) -> tuple[Dataset, Dataset]:
    if config.synthetic:
        from .data import synthetic_cifar
        return synthetic_cifar(config.dataset, *config.synthetic_size, seed=0)
    return load_or_synthesize(config.dataset, config.data_dir, n_train=config.synthetic_size[0],
                              n_test=config.synthetic_size[1], strict=config.strict)


def run_one(model: str, p: float, seed: int, train_ds: Dataset, test_ds: Dataset,
            config: SweepConfig, run_dir: Path | None) -> RunResult:
    t0 = time.perf_counter()
    try:
        tc = TrainConfig.for_preset(model, epochs=config.epochs, batch_size=config.batch_size,
                                    augment=config.augment, seed=seed, lr=config.lr,
                                    test_subset=config.test_subset, eval_every=config.eval_every)
        graph = build_preset(model, train_ds.num_classes, rng=seed)
        res = train(graph, train_ds, test_ds, tc, run_dir if config.save_checkpoints else None)
        acc = res.final_accuracy if res.history else accuracy(graph, test_ds, config.test_subset)
        return RunResult(model, p, seed, acc, [h["test_accuracy"] for h in res.history],
                         count_params(graph), time.perf_counter() - t0)
    except Exception as exc:  # a failed run is recorded; the sweep goes on
        log.error("run %s p=%g seed=%d failed: %s", model, p, seed, exc)
        return RunResult(model, p, seed, float("nan"), wall_seconds=time.perf_counter() - t0,
                         error=f"{type(exc).__name__}: {exc}")


def mean_accuracy(results: Sequence[RunResult], model: str, p: float) -> float:
    vals = [r.final_accuracy for r in results if r.model == model and r.p == p and r.ok]
    return float(np.mean(vals)) if vals else float("nan")


def run_sweep(config: SweepConfig, out_dir=None) -> list[RunResult]:
    """Run the sweep and write its reports into ``out_dir`` (if given)."""
    out = Path(out_dir) if out_dir is not None else None
    if config.dry_run:
        for m, p, s in plan(config):
            print(f"{m}\tp={p:g}\tseed={s}")
        if config.points is None:
            print("# adaptive: 60-90 are added while the accuracy gap exceeds 0.5 points")
        return []
    train_full, test_ds = load_data(config)
    pairs = model_pairs(config.models)
    if config.points is None and not pairs:
        raise ValueError("an adaptive schedule needs at least one baseline/cross-modal pair")
    results: list[RunResult] = []
    history: dict[float, list] = {}
    fixed = list(config.points) if config.points is not None else None
    while True:
        if fixed is not None:
            if not fixed:
                break
            p = fixed.pop(0)
        else:
            p = next_point(history, config.rule)
            if p is None:
                break
        train_ds, test_p, _ = prepare(train_full, test_ds, p, config.stratified)
        log.info("p=%g%%: %d training images", p, len(train_ds))
        for model in config.models:
            for seed in config.seeds:
                run_dir = out / "runs" / f"{model}_p{p:g}_s{seed}" if out is not None else None
                results.append(run_one(model, p, seed, train_ds, test_p, config, run_dir))
        history[p] = [(mean_accuracy(results, b, p), mean_accuracy(results, x, p)) for b, x in pairs]
        if fixed is None and any(math.isnan(v) for pair in history[p] for v in pair):
            log.warning("p=%g%% has failed pairs; stopping extension", p)
            history[p] = [(0.0, 0.0)]
        if out is not None:
            write_reports(out, results, config)
    if out is not None:
        write_reports(out, results, config)
    return results


# ---------------------------------------------------------------------------
# reports


def write_results_csv(path, results: Sequence[RunResult]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "p", "seed", "final_accuracy", "params", "wall_seconds", "error"])
        for r in results:
            w.writerow([r.model, f"{r.p:g}", r.seed, repr(r.final_accuracy), r.params,
                        f"{r.wall_seconds:.3f}", r.error])
    return path


def read_results_csv(path) -> list[RunResult]:
    with open(path, newline="") as fh:
        return [RunResult(row["model"], float(row["p"]), int(row["seed"]), float(row["final_accuracy"]),
                          params=int(row["params"]), wall_seconds=float(row["wall_seconds"]),
                          error=row["error"])
                for row in csv.DictReader(fh)]


def _fmt(x: float) -> str:
    return "--" if math.isnan(x) else f"{100 * x:.2f}%"


def render_markdown(results: Sequence[RunResult], config: SweepConfig | None = None) -> str:
    """Results table: models as rows, p as columns, mean accuracy per cell.

    The better model of each baseline/cross-modal pair is bold (both on a tie);
    unvisited columns of the standard grid show a dash.
    """
    models = list(dict.fromkeys(r.model for r in results))
    visited = sorted({r.p for r in results})
    columns = sorted(set(ALL_POINTS) | set(visited)) if set(visited) <= set(ALL_POINTS) else visited
    cell = {(m, p): mean_accuracy(results, m, p) for m in models for p in visited}
    bold = set()
    for b, x in model_pairs(models):
        for p in visited:
            ab, ax = cell[b, p], cell[x, p]
            if math.isnan(ab) or math.isnan(ax):
                continue
            if ab >= ax:
                bold.add((b, p))
            if ax >= ab:
                bold.add((x, p))
    lines = []
    if config is not None:
        lines.append(f"Dataset: {config.dataset}; augmentation: {'on' if config.augment else 'off'}; "
                     f"seeds: {', '.join(map(str, config.seeds))}")
        lines.append("")
    lines.append("| Model | " + " | ".join(f"{p:g}%" for p in columns) + " |")
    lines.append("|---|" + "---:|" * len(columns))
    for m in models:
        cells = []
        for p in columns:
            if p not in visited:
                cells.append("--")
                continue
            text = _fmt(cell[m, p])
            cells.append(f"**{text}**" if (m, p) in bold else text)
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    tests = significance_rows(results, models, visited, config.equal_var if config else False)
    if tests:
        lines += ["", "| Pair | p | t | df | p-value | significant |", "|---|---:|---:|---:|---:|---|"]
        for pair, p, r in tests:
            lines.append(f"| {pair} | {p:g}% | {r.t:.4f} | {r.df:.2f} | {r.p_value:.4f} | "
                         f"{'yes' if r.significant else 'no'} |")
    failed = [r for r in results if not r.ok]
    if failed:
        lines += ["", "Failed runs:", ""]
        lines += [f"- {r.model} p={r.p:g} seed={r.seed}: {r.error}" for r in failed]
    return "\n".join(lines) + "\n"


def significance_rows(results, models, points, equal_var=False) -> list[tuple[str, float, TTestResult]]:
    rows = []
    for b, x in model_pairs(models):
        for p in points:
            xs = [r.final_accuracy for r in results if r.model == x and r.p == p and r.ok]
            bs = [r.final_accuracy for r in results if r.model == b and r.p == p and r.ok]
            if len(xs) >= 2 and len(bs) >= 2:
                rows.append((f"{x} vs {b}", p, t_test(xs, bs, equal_var)))
    return rows


def write_reports(out_dir, results: Sequence[RunResult], config: SweepConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(out / "results.csv", results)
    (out / "report.md").write_text(render_markdown(results, config))
    if any(r.ok for r in results):
        from .plotting import plot_sweep
        plot_sweep(results, out / "accuracy_vs_p.png",
                   title=f"{config.dataset if config else ''} sweep".strip())


def config_dict(config: SweepConfig) -> dict:
    return asdict(config)
