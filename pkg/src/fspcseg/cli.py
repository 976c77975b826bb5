"""Command-line entry point: dataset generation, pretrain, episodic training,
evaluation, gradient verification and PLY export.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All errors go to
stderr with an ``error:`` prefix. Commands refuse to overwrite an existing
``--out`` target unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .data import PRIMITIVES, ClassSplit, generate_scene, sample_episode
from .errors import InputError
from .io import export_ply
from .pipeline import (
    DatasetBundle,
    EvalReport,
    RunConfig,
    evaluate_run,
    load_dataset,
    load_model_checkpoint,
    run_fewshot_train,
    run_pretrain,
    save_dataset,
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _class_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    for name in names:
        if name not in PRIMITIVES:
            raise UsageError(f"unknown primitive {name!r}; choose from {sorted(PRIMITIVES)}")
    return names


def _check_out(path: Path, force: bool, *, expect_file=False) -> None:
    if force:
        return
    if expect_file:
        if path.exists():
            raise UsageError(f"{path} exists; pass --force to overwrite")
    elif path.exists() and any(path.iterdir()):
        raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")


def build_parser() -> Parser:
    parser = Parser(prog="fspcseg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fspcseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=0, help="torch thread count, 0 = default")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    add_common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=200, help="train-pool scene count")
    g.add_argument("--test-scenes", type=int, default=None, help="default: scenes // 2")
    g.add_argument("--points-per-object", type=int, default=256)
    g.add_argument("--background-points", type=int, default=512)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--margin", type=float, default=0.6, help="min centroid distance between objects")
    g.add_argument("--geom-noise", type=float, default=0.005)
    g.add_argument("--train-classes", type=_class_list, default="sphere,cuboid,cylinder,cone")
    g.add_argument("--test-classes", type=_class_list, default="torus,ridge")

    p = sub.add_parser("pretrain", help="contrastive self-supervised pretraining")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--encoder-knn", type=int, default=None)
    p.add_argument("--freeze-augmentor", action="store_true")
    p.add_argument("--feature-space-contrast", action="store_true")

    t = sub.add_parser("train", help="episodic few-shot training")
    add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--encoder-ckpt", default=None, help="pretrained encoder archive")
    t.add_argument("--episodes", type=int, default=None)
    t.add_argument("--ways", type=int, default=None)
    t.add_argument("--shots", type=int, default=None)
    t.add_argument("--query-count", type=int, default=None)
    t.add_argument("--no-mra", action="store_true", help="ablation: drop the attention block")
    t.add_argument("--no-center", action="store_true", help="ablation: drop the center loss")
    t.add_argument("--lambda", dest="center_weight", type=float, default=None)
    t.add_argument("--gamma", type=float, default=None)
    t.add_argument("--proto-count", type=int, default=None)
    t.add_argument("--mra-neighbors", type=int, default=None)
    t.add_argument("--fps-ratio", type=float, default=None)
    t.add_argument("--encoder-knn", type=int, default=None)
    t.add_argument("--feature-dim", type=int, default=None)
    t.add_argument("--encoder-lr", type=float, default=None)
    t.add_argument("--module-lr", type=float, default=None)

    e = sub.add_parser("eval", help="evaluate a trained run on test episodes")
    add_common(e)
    e.add_argument("--run", required=True)
    e.add_argument("--data", default=None, help="default: data_dir recorded in the run config")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--ways", type=int, default=None)
    e.add_argument("--shots", type=int, default=None)

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    add_common(c)
    c.add_argument("--component", default="all", help="'all' or comma-separated component names")
    c.add_argument("--tolerance", type=float, default=1e-4)

    v = sub.add_parser("export-viz", help="export a predicted test episode as ascii PLY")
    add_common(v)
    v.add_argument("--run", required=True)
    v.add_argument("--episode", type=int, default=0)
    v.add_argument("--out", default=None, help="default: <run>/predictions/episode_<i>.ply")
    v.add_argument("--data", default=None)
    return parser


def _config_from_args(args, data_dir: str) -> RunConfig:
    config = RunConfig(seed=args.seed, threads=args.threads, data_dir=str(data_dir))
    overrides = {
        "epochs": "pretrain_epochs",
        "batch_size": "pretrain_batch",
        "lr": "pretrain_lr",
        "feature_dim": "feature_dim",
        "encoder_knn": "encoder_knn",
        "episodes": "train_episodes",
        "ways": "ways",
        "shots": "shots",
        "query_count": "query_count",
        "center_weight": "center_weight",
        "gamma": "gamma",
        "proto_count": "proto_count",
        "mra_neighbors": "mra_neighbors",
        "fps_ratio": "mra_fps_ratio",
        "encoder_lr": "encoder_lr",
        "module_lr": "module_lr",
    }
    values = {}
    for arg_name, field in overrides.items():
        if getattr(args, arg_name, None) is not None:
            values[field] = getattr(args, arg_name)
    if getattr(args, "freeze_augmentor", False):
        values["freeze_augmentor"] = True
    if getattr(args, "feature_space_contrast", False):
        values["feature_space_contrast"] = True
    if getattr(args, "no_mra", False):
        values["use_mra"] = False
    if getattr(args, "no_center", False):
        values["use_center_loss"] = False
    import dataclasses

    return dataclasses.replace(config, **values)


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    _check_out(out, args.force)
    train_names, test_names = args.train_classes, args.test_classes
    if isinstance(train_names, str):
        train_names = _class_list(train_names)
    if isinstance(test_names, str):
        test_names = _class_list(test_names)
    overlap = set(train_names) & set(test_names)
    if overlap:
        raise UsageError(f"train/test classes overlap: {sorted(overlap)}")
    split = ClassSplit(
        frozenset(PRIMITIVES[n] for n in train_names),
        frozenset(PRIMITIVES[n] for n in test_names),
    )
    n_test = args.test_scenes if args.test_scenes is not None else max(1, args.scenes // 2)
    kwargs = dict(
        points_per_object=args.points_per_object,
        background_points=args.background_points,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        centroid_margin=args.margin,
        geom_noise=args.geom_noise,
    )
    train = [generate_scene([args.seed, 0, i], train_names, **kwargs) for i in range(args.scenes)]
    test = [generate_scene([args.seed, 1, i], test_names, **kwargs) for i in range(n_test)]
    manifest = {
        "seed": args.seed,
        "points_per_object": args.points_per_object,
        "background_points": args.background_points,
        "min_objects": args.min_objects,
        "max_objects": args.max_objects,
        "centroid_margin": args.margin,
        "geom_noise": args.geom_noise,
    }
    save_dataset(out, DatasetBundle(train=train, test=test, split=split, manifest=manifest))
    print(f"wrote {len(train)} train and {len(test)} test scenes to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    out = Path(args.out)
    _check_out(out, args.force)
    bundle = load_dataset(args.data)
    config = _config_from_args(args, args.data)
    trainer = run_pretrain(config, bundle.train, out)
    first, last = trainer.loss_curve_[0][1], trainer.loss_curve_[-1][1]
    print(f"pretrain finished: loss {first:.4f} -> {last:.4f} over {len(trainer.loss_curve_)} steps")
    return 0


def _cmd_train(args) -> int:
    out = Path(args.out)
    _check_out(out, args.force)
    bundle = load_dataset(args.data)
    config = _config_from_args(args, args.data)
    segmenter = run_fewshot_train(
        config, bundle.train, bundle.split, out, encoder_checkpoint=args.encoder_ckpt
    )
    totals = [m[3] for m in segmenter.metrics_]
    print(
        f"training finished: {len(totals)} episodes"
        + (f", loss {totals[0]:.4f} -> {totals[-1]:.4f}" if totals else "")
        + (f", {segmenter.skipped_} skipped" if segmenter.skipped_ else "")
    )
    return 0


def _cmd_eval(args) -> int:
    run = Path(args.run)
    report_path = run / "report"
    _check_out(report_path, args.force, expect_file=True)
    config = RunConfig.load(run / "config")
    data_dir = args.data or config.data_dir
    if not data_dir:
        raise UsageError("no --data given and the run config records no data_dir")
    bundle = load_dataset(data_dir)
    report = evaluate_run(
        run,
        bundle.test,
        bundle.split,
        episode_count=args.episodes,
        ways=args.ways,
        shots=args.shots,
        seed=args.seed,
    )
    report.save(report_path)
    print(
        f"foreground mIoU {report.foreground_mean_iou:.4f} "
        f"(background {report.background_iou if report.background_iou is None else round(report.background_iou, 4)}, "
        f"{report.episode_count} episodes)"
    )
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import COMPONENTS, run_checks

    names = "all" if args.component == "all" else [n.strip() for n in args.component.split(",")]
    if names != "all":
        for n in names:
            if n not in COMPONENTS:
                raise UsageError(f"unknown component {n!r}; choose from {sorted(COMPONENTS)}")
    results = run_checks(names, tolerance=args.tolerance, seed=args.seed)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.component}: max rel error {r.max_rel_error:.3e} over {r.n_params} params "
              f"(tolerance {r.tolerance:.1e}) {status}")
        ok &= r.passed
    if not ok:
        print("error: gradient check failed", file=sys.stderr)
        return 2
    return 0


def _cmd_export_viz(args) -> int:
    run = Path(args.run)
    config = RunConfig.load(run / "config")
    data_dir = args.data or config.data_dir
    if not data_dir:
        raise UsageError("no --data given and the run config records no data_dir")
    out = Path(args.out) if args.out else run / "predictions" / f"episode_{args.episode}.ply"
    _check_out(out, args.force, expect_file=True)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle = load_dataset(data_dir)
    model = load_model_checkpoint(run / "checkpoints" / "model.ckpt")
    episode = sample_episode(
        bundle.test,
        bundle.split,
        config.ways,
        config.shots,
        config.query_count,
        [config.seed, 202, args.episode],
        use="test",
        min_class_points=config.min_class_points,
    )
    from .model import predict_episode

    preds = predict_episode(model, episode, config.settings())
    export_ply(out, episode.query[0].cloud, preds[0])
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "export-viz": _cmd_export_viz,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        if args.command is None:
            parser.print_help()
            return 0
        if getattr(args, "threads", 0):
            import torch

            torch.set_num_threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
