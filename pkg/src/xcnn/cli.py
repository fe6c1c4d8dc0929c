"""Command-line entry point: ``xcnn {train,sweep,visualize,params,data}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

log = logging.getLogger("xcnn")


def _seeds(text: str) -> list[int]:
    """'0..4' or '0,2,5' or '3'."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s]


def _points(text: str) -> list[float] | None:
    if text == "adaptive":
        return None
    return [float(s) for s in text.split(",") if s]


def _write_config(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "argv": sys.argv[1:], "config": resolved}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))


def _load_data(args):
    from . import data as D
    if args.synthetic:
        return D.synthetic_cifar(args.dataset, args.synthetic_train, args.synthetic_test, seed=0)
    return D.load_or_synthesize(args.dataset, args.data_dir, n_train=args.synthetic_train,
                                n_test=args.synthetic_test, strict=not args.lenient)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .data import prepare
    from .graph import build_preset, count_params
    from .optim import TrainConfig, train

    cfg = TrainConfig.for_preset(args.preset, epochs=args.epochs, batch_size=args.batch_size,
                                 l2_lambda=args.l2, augment=args.augment, seed=args.seed, lr=args.lr,
                                 test_subset=args.test_subset, eval_every=args.eval_every)
    out = Path(args.out or f"runs/{args.preset}_{args.dataset}_p{args.p:g}_s{args.seed}")
    options = {"cross_maxout": True} if args.cross_maxout else {}
    _write_config(out, "train", {"train": asdict(cfg), "dataset": args.dataset, "p": args.p,
                                 "stratified": args.stratified, "preset_options": options,
                                 "data_dir": args.data_dir, "synthetic": args.synthetic})
    train_ds, test_ds = _load_data(args)
    train_ds, test_ds, _ = prepare(train_ds, test_ds, args.p, args.stratified)
    graph = build_preset(args.preset, train_ds.num_classes, rng=args.seed, **options)
    log.info("%s: %d parameters, %d training images (%s)", args.preset, count_params(graph),
             len(train_ds), train_ds.source)
    res = train(graph, train_ds, test_ds, cfg, out)
    print(f"{args.preset} p={args.p:g}% seed={args.seed}: test accuracy {100 * res.final_accuracy:.2f}% "
          f"({res.seconds:.1f}s); outputs in {out}")
    return 0


def cmd_sweep(args) -> int:
    from .harness import SweepConfig, run_sweep

    cfg = SweepConfig(models=[m for m in args.models.split(",") if m], dataset=args.dataset,
                      augment=args.augment, seeds=_seeds(args.seeds), points=_points(args.points),
                      epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      test_subset=args.test_subset, stratified=args.stratified, rule=args.rule,
                      equal_var=args.student, data_dir=args.data_dir, synthetic=args.synthetic,
                      synthetic_size=(args.synthetic_train, args.synthetic_test), dry_run=args.dry_run,
                      strict=not args.lenient, eval_every=args.eval_every)
    out = Path(args.out)
    if not cfg.dry_run:
        _write_config(out, "sweep", asdict(cfg))
    results = run_sweep(cfg, None if cfg.dry_run else out)
    if not cfg.dry_run:
        print((out / "report.md").read_text(), end="")
        failed = sum(not r.ok for r in results)
        if failed:
            print(f"{failed} of {len(results)} runs failed; see report.md", file=sys.stderr)
    return 0


def _graph_for(args):
    from .checkpoint import load_checkpoint
    from .graph import build_preset
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        return ck.graph, ck.extras
    return build_preset(args.preset, args.classes, rng=args.seed), {}


def _write_image(out: Path, pixels: np.ndarray) -> None:
    """The bit-exact PPM at ``out`` plus a PNG copy beside it for viewing."""
    from . import introspect as I
    from .plotting import save_rgb_png
    I.write_ppm(out, pixels)
    if out.suffix.lower() != ".png":
        save_rgb_png(pixels / 255.0, out.with_suffix(".png"))


def cmd_visualize(args) -> int:
    from . import introspect as I

    graph, extras = _graph_for(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.what == "heatmap":
        first = graph.spec.superlayers[0].name
        between = sorted(I.cross_layer_ids(graph, between=True), key=lambda i: not i.startswith(f"x0.{first}->"))
        layers = [args.layer] if args.layer else between[:1]
        if not layers:
            raise ValueError("graph has no cross-connection layers; pass --layer")
        hm = I.weight_heatmap(graph, layers[0], args.cell)
        _write_image(out, hm.pixels)
        print(hm.legend)
    elif args.what == "ascend":
        if not args.layer:
            raise ValueError("ascend needs --layer")
        cfg = I.AscentConfig(args.lam, args.steps, args.step_size, args.init_scale)
        res = I.activation_maximize(graph, args.layer, args.channel, cfg, args.seed)
        _write_image(out, I.to_uint8(res.image))
        print(f"{args.layer}[{args.channel}]: objective {res.objectives[0]:.4g} -> {res.objectives[-1]:.4g} "
              f"in {len(res.objectives) - 1} steps")
    else:
        if not args.layer:
            raise ValueError("featuremap needs --layer")
        from .data import apply_stats, NormStats, prepare, rgb_to_yuv
        train_ds, test_ds = _load_data(args)
        if "input_mean" in extras:
            test_ds = apply_stats(rgb_to_yuv(test_ds), NormStats(extras["input_mean"], extras["input_std"]))
        else:
            _, test_ds, _ = prepare(train_ds, test_ds)
        feats = I.layer_features(graph, test_ds.images[args.index], args.layer)
        _write_image(out, I.to_uint8(I.feature_map_rgb(feats, args.seed)))
        print(f"{args.layer}: {feats.shape[0]} maps of {feats.shape[1]}x{feats.shape[2]} for test image {args.index}")
    print(f"wrote {out}")
    return 0


def cmd_params(args) -> int:
    from .graph import REFERENCE_PARAMS, PRESETS, build_preset, count_params
    # the requested preset comes first; the other three follow for comparison
    names = [args.preset] + [n for n in PRESETS if n != args.preset] if args.preset else list(PRESETS)
    for name in names:
        n = count_params(build_preset(name, args.classes))
        target = REFERENCE_PARAMS.get(name)
        ref = f"  (reported ~{target / 1e6:.2f}M, {100 * (n - target) / target:+.2f}%)" \
            if target and args.classes == 10 else ""
        print(f"{name:<11} {n:>10,d}{ref}")
    return 0


def cmd_data(args) -> int:
    from . import data as D
    if args.action == "synth":
        train_ds, test_ds = D.synthetic_cifar(args.dataset, args.n_train, args.n_test, args.seed)
        path = D.write_cifar_binary(args.out, train_ds, test_ds)
        print(f"wrote synthetic {args.dataset} ({args.n_train} train, {args.n_test} test) to {path}")
        return 0
    root = D.find_data_dir(args.dataset, args.data_dir)
    if root is None:
        print(f"no {args.dataset} binaries found (checked --data-dir and DATA_DIR)")
        return 1
    train_ds, test_ds = D.load_cifar(root, args.dataset, strict=not args.lenient)
    print(f"{args.dataset} at {root}: {len(train_ds)} train, {len(test_ds)} test")
    counts = D.class_counts(train_ds)
    print(f"train class counts: min {counts.min()}, max {counts.max()}")
    if args.p:
        sub = D.subset(train_ds, args.p)
        c = D.class_counts(sub)
        print(f"{args.p:g}% subset: {len(sub)} images, {np.count_nonzero(c)}/{len(c)} classes, "
              f"per-class min {c.min()} max {c.max()}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=["cifar10", "cifar100"], default="cifar10")
    p.add_argument("--data-dir", help="directory with the CIFAR binaries (default: $DATA_DIR)")
    p.add_argument("--synthetic", action="store_true", help="use seeded synthetic images instead of CIFAR")
    p.add_argument("--synthetic-train", type=int, default=50000, metavar="N")
    p.add_argument("--synthetic-test", type=int, default=10000, metavar="N")
    p.add_argument("--lenient", action="store_true", help="accept CIFAR files with non-canonical record counts")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="default: 200 (KerasNet) / 230 (FitNet4)")
    p.add_argument("--batch-size", type=int, help="default: 32 (KerasNet) / 128 (FitNet4)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--test-subset", type=int, metavar="N", help="evaluate on the first N test images")
    p.add_argument("--eval-every", type=int, default=1, metavar="K",
                   help="test every K epochs (0: final epoch only)")
    p.add_argument("--stratified", action="store_true", help="per-class prefixes instead of a global prefix")


def build_parser() -> argparse.ArgumentParser:
    from .graph import PRESETS

    parser = argparse.ArgumentParser(prog="xcnn", description="Cross-modal CNNs on CIFAR, CPU only.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", help="train one model on a p%% prefix of the training set")
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--p", type=float, default=100.0, help="percent of the training set (default 100)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l2", type=float, help="L2 factor (default: 0 KerasNet, 5e-4 FitNet4)")
    p.add_argument("--cross-maxout", action="store_true", help="X-FitNet4: 2-way maxout cross-connections")
    p.add_argument("--out", help="output directory")
    _data_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="data-sparsity sweep with CSV/Markdown/PNG reports")
    p.add_argument("--models", default="kerasnet,x-kerasnet")
    p.add_argument("--seeds", default="0", help="e.g. 0..4 or 0,1,2")
    p.add_argument("--points", default="adaptive", help="comma list of p values, or 'adaptive'")
    p.add_argument("--rule", choices=["any", "all"], default="any",
                   help="adaptive stop: when any pair / all pairs are within 0.5 points")
    p.add_argument("--student", action="store_true", help="Student's t-test instead of Welch's")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--out", default="sweep")
    _data_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("visualize", help="heatmaps, activation maximization, feature maps")
    p.add_argument("what", choices=["heatmap", "ascend", "featuremap"])
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--preset", choices=PRESETS, default="x-kerasnet", help="fresh model if no checkpoint")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--layer", help="layer id (see 'xcnn params --layers')")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--index", type=int, default=0, help="featuremap: test image index")
    p.add_argument("--cell", type=int, default=16)
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--step-size", type=float, default=1.0)
    p.add_argument("--init-scale", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_flags(p)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("params", help="exact trainable parameter counts")
    p.add_argument("preset", nargs="?", choices=PRESETS)
    p.add_argument("--classes", type=int, default=10, choices=[10, 100])
    p.add_argument("--layers", action="store_true", help="also list layer ids and shapes")
    p.set_defaults(func=cmd_params_or_layers)

    p = sub.add_parser("data", help="write synthetic binaries or inspect a CIFAR directory")
    p.add_argument("action", choices=["synth", "info"])
    p.add_argument("--dataset", choices=["cifar10", "cifar100"], default="cifar10")
    p.add_argument("--data-dir")
    p.add_argument("--out", default="synthetic-cifar")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=float, help="info: also report class coverage of a p%% subset")
    p.add_argument("--lenient", action="store_true", help="info: accept non-canonical record counts")
    p.set_defaults(func=cmd_data)
    return parser


def cmd_params_or_layers(args) -> int:
    code = cmd_params(args)
    if args.layers:
        from .graph import PRESETS, build_preset
        for name in [args.preset] if args.preset else PRESETS:
            print(f"\n{name}:")
            for layer in build_preset(name, args.classes).layers():
                print(f"  {layer.id:<28} {str(layer.spec):<14} {layer.in_shape} -> {layer.out_shape}")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        print(f"xcnn {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
