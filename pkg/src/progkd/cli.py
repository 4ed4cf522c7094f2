"""Command-line entry point: ``progkd <subcommand> [flags]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
runtime failures. Diagnostics go to standard error; results are written as
files under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import ablation
from .analysis import cka_to_csv, pairwise_cka
from .config import RunConfig, format_layers, load_config, parse_layers, parse_loss_kind
from .distill import (ConfigError, StageConfig, distill_stage, evaluate, load_detector, progressive_pipeline,
                      save_detector, train_scratch)
from .models import Scale
from .plot import plot_metrics
from .synthdata import generate_dataset, in_memory_dataset, load_dataset

log = logging.getLogger("progkd")


class UsageError(Exception):
    """Bad flag combination detected after argument parsing."""


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", help="INI run configuration")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory from gen-data; omitted means render in memory")
    p.add_argument("--seed", type=int, help="random seed")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--lr0", type=float, help="initial learning rate")


def _add_loss(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["mse", "ssim", "spectral"])
    p.add_argument("--layers", help="comma-separated subset of p3,p4,p5")
    p.add_argument("--lambda-kd", type=float, dest="lambda_kd")
    p.add_argument("--lambda-amp", type=float, dest="lambda_amp")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progkd", description="Progressive feature distillation toolkit")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch lines")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render the synthetic dataset to disk")
    _add_common(p)
    p.add_argument("--train", type=int, help="training images")
    p.add_argument("--test", type=int, help="unseen-domain test images")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a detector from scratch")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--scale", choices=[s.value for s in Scale], default=None)

    p = sub.add_parser("distill", help="distill a learner from a frozen teacher checkpoint")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    _add_loss(p)
    p.add_argument("--ckpt", required=True, help="teacher checkpoint")
    p.add_argument("--scale", choices=[s.value for s in Scale], default=None, help="learner scale")

    p = sub.add_parser("pipeline", help="senior -> junior -> student")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    _add_loss(p)
    p.add_argument("--direct", action="store_true", help="skip the junior stage")

    p = sub.add_parser("eval", help="AP of a checkpoint on a dataset split")
    _add_common(p, out_required=False)
    _add_data(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test"], default=None)

    p = sub.add_parser("cka", help="pairwise linear CKA between checkpoints")
    _add_common(p)
    _add_data(p)
    p.add_argument("--ckpt", action="append", required=True, help="repeat for each model (at least two)")
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("ablate", help="run an ablation grid over several seeds")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--lambda-kd", type=float, dest="lambda_kd")
    p.add_argument("--lambda-amp", type=float, dest="lambda_amp")
    p.add_argument("--grid", choices=sorted(ablation.GRIDS), required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, counted up from --seed")
    p.add_argument("--train", type=int, default=512)
    p.add_argument("--test", type=int, default=128)
    p.add_argument("--cache", help="directory for reusable trained runs")

    p = sub.add_parser("plot", help="SVG chart of metric curves")
    p.add_argument("csv", nargs="+", help="metrics CSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="map")
    p.add_argument("--name", default="curves.svg", help="output file name inside --out")
    p.add_argument("--title", default="")
    return parser


# ----------------------------------------------------------------------------
# helpers


def _run_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _dataset(args, cfg: RunConfig):
    root = args.data or cfg.data.root
    if root:
        return load_dataset(root)
    seed = args.seed if args.seed is not None else cfg.data.seed
    return in_memory_dataset(cfg.data.n_train, cfg.data.n_test, seed=seed)


def _override(stage: StageConfig, args) -> StageConfig:
    """Apply command-line flags on top of a config-file stage."""
    kw = {}
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr0", "lr0"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            kw[key] = getattr(args, flag)
    loss_kw = {}
    if getattr(args, "loss", None):
        loss_kw["kind"] = parse_loss_kind(args.loss)
    if getattr(args, "layers", None):
        loss_kw["layers"] = parse_layers(args.layers)
    for key in ("lambda_kd", "lambda_amp"):
        if getattr(args, key, None) is not None:
            loss_kw[key] = getattr(args, key)
    if loss_kw:
        try:
            kw["loss"] = replace(stage.loss, **loss_kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return replace(stage, **kw)


def _first_stage(cfg: RunConfig, scale: str | None, default: Scale) -> StageConfig:
    base = cfg.stages[0] if cfg.stages else StageConfig(default, loss=cfg.loss)
    return replace(base, learner_scale=Scale(scale)) if scale else base


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    cfg = _run_config(args)
    n_train = args.train if args.train is not None else cfg.data.n_train
    n_test = args.test if args.test is not None else cfg.data.n_test
    seed = args.seed if args.seed is not None else cfg.data.seed
    generate_dataset(n_train, n_test, args.out, seed=seed)
    log.info("wrote %d train / %d test images to %s", n_train, n_test, args.out)


def cmd_train(args) -> None:
    cfg = _run_config(args)
    stage = _override(_first_stage(cfg, args.scale, Scale.TINY), args)
    data = _dataset(args, cfg)
    res = train_scratch(stage.learner_scale, data, stage)
    out = _out_dir(args)
    save_detector(out / f"{stage.learner_scale.value}.ckpt", res.model)
    res.log.save(out / "metrics.csv")
    log.info("final ap50 %.4f map %.4f", res.log.final.ap50, res.log.final.map)


def cmd_distill(args) -> None:
    cfg = _run_config(args)
    stage = _override(_first_stage(cfg, args.scale, Scale.TINY), args)
    stage = replace(stage, teacher_ckpt=args.ckpt)
    teacher = load_detector(args.ckpt)
    data = _dataset(args, cfg)
    res = distill_stage(stage, data, teacher=teacher)
    out = _out_dir(args)
    save_detector(out / f"{stage.learner_scale.value}.ckpt", res.model, res.projector)
    res.log.save(out / "metrics.csv")
    log.info("loss %s layers %s: final ap50 %.4f map %.4f", stage.loss.kind.value, format_layers(stage.loss.layers),
             res.log.final.ap50, res.log.final.map)


def cmd_pipeline(args) -> None:
    cfg = _run_config(args)
    pipe = cfg.pipeline(direct=args.direct)
    if not cfg.stages:
        pipe = replace(pipe, junior=replace(pipe.junior, loss=cfg.loss), student=replace(pipe.student, loss=cfg.loss))
    pipe = replace(pipe, direct=args.direct or pipe.direct, senior=_override(pipe.senior, args),
                   junior=_override(pipe.junior, args), student=_override(pipe.student, args))
    data = _dataset(args, cfg)
    result = progressive_pipeline(data, pipe, _out_dir(args))
    log.info("manifest written to %s", result["manifest"])


def cmd_eval(args) -> None:
    cfg = _run_config(args)
    model = load_detector(args.ckpt)
    data = _dataset(args, cfg)
    split_name = args.split or cfg.eval.split
    split = data.test if split_name == "test" else data.train
    ap = evaluate(model, split, conf_threshold=cfg.eval.conf_threshold, nms_iou=cfg.eval.nms_iou)
    line = f"{args.ckpt},{split_name},{ap.ap50!r},{ap.ap75!r},{ap.map!r}"
    log.info("ap50 %.4f ap75 %.4f map %.4f", ap.ap50, ap.ap75, ap.map)
    if args.out:
        (_out_dir(args) / "eval.csv").write_text("ckpt,split,ap50,ap75,map\n" + line + "\n")


def cmd_cka(args) -> None:
    if len(args.ckpt) < 2:
        raise UsageError("cka needs at least two --ckpt")
    cfg = _run_config(args)
    stems = [Path(p).stem for p in args.ckpt]
    names = stems if len(set(stems)) == len(stems) else list(args.ckpt)
    models = {name: load_detector(p) for name, p in zip(names, args.ckpt)}
    data = _dataset(args, cfg)
    split = data.test if args.split == "test" else data.train
    rows = pairwise_cka(models, split.images)
    (_out_dir(args) / "cka.csv").write_text(cka_to_csv(rows))
    for r in rows:
        log.info("%s vs %s [%s]: %.4f", r["a"], r["b"], r["view"], r["cka"])


def cmd_ablate(args) -> None:
    cfg = _run_config(args)
    base = ablation.AblationConfig()
    seed0 = args.seed if args.seed is not None else 0
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    kw = {"seeds": tuple(range(seed0, seed0 + args.seeds)), "n_train": args.train, "n_test": args.test,
          "cache_dir": args.cache}
    stage = cfg.stages[0] if cfg.stages else None
    if stage is not None:
        kw.update(epochs=stage.epochs, lr0=stage.lr0, batch_size=stage.batch_size)
    kw.update(lambda_kd=cfg.loss.lambda_kd, lambda_amp=cfg.loss.lambda_amp)
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr0", "lr0"), ("lambda_kd", "lambda_kd"),
                      ("lambda_amp", "lambda_amp")):
        if getattr(args, flag) is not None:
            kw[key] = getattr(args, flag)
    acfg = replace(base, **kw)
    if acfg.epochs < 1 or acfg.lr0 <= 0 or acfg.batch_size < 1:
        raise ConfigError("epochs and batch must be >= 1 and lr0 positive")
    data = load_dataset(args.data or cfg.data.root) if (args.data or cfg.data.root) else None
    rows = ablation.run_grid(args.grid, acfg, data)
    out = _out_dir(args)
    stem = f"ablation_{args.grid.replace('-', '_')}"
    (out / f"{stem}.csv").write_text(ablation.rows_to_csv(rows))
    (out / f"{stem}_summary.csv").write_text(ablation.summary_to_csv(ablation.summarize(rows)))
    for s in ablation.summarize(rows):
        log.info("%-22s ap50 %.4f [%.4f, %.4f]", s["strategy"], s["ap50_mean"], s["ap50_min"], s["ap50_max"])


def cmd_plot(args) -> None:
    svg = plot_metrics(args.csv, args.metric, args.title)
    (_out_dir(args) / args.name).write_text(svg)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "distill": cmd_distill, "pipeline": cmd_pipeline,
            "eval": cmd_eval, "cka": cmd_cka, "ablate": cmd_ablate, "plot": cmd_plot}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(message)s", force=True)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"progkd {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"progkd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
