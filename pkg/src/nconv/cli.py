"""Command-line entry points: synth, train, eval, fuse, predict.

Every numeric option can also come from a flat key=value config file
(``--config``); explicit flags win over the file. All stochastic commands
take ``--seed``.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation, fusion, gridio
from .gridio import CheckpointError, FormatError
from .losses import LossError
from .networks import (Pipeline, PipelineConfig, PipelineError, build_pipeline,
                       eval_uncertainty, pipeline_forward)
from .synth import DisturbSpec, SceneSpec, SynthError, synth_dataset
from .training import TrainConfig, TrainingError, train

KNOWN_ERRORS = (FormatError, CheckpointError, PipelineError, TrainingError,
                LossError, SynthError, fusion.FusionError, evaluation.EvalError,
                FileNotFoundError, ValueError)


def _merge(args: argparse.Namespace, key: str, cast, default):
    """Resolve an option: explicit flag > config file > default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    cfg = getattr(args, "_config_items", {})
    if key in cfg:
        return cast(cfg[key])
    return default


def _load_config(args: argparse.Namespace) -> None:
    items = {}
    if getattr(args, "config", None):
        items = gridio.read_config(args.config)
    args._config_items = items


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        variant=_merge(args, "variant", str, "pncnn"),
        unet_channels=tuple(int(c) for c in
                            _merge(args, "unet-channels", str, "8,16,32").split(",")),
        ncnn_layers=gridio.parse_ncnn_layers(
            _merge(args, "ncnn-layers", str, "5p,5,3,3u")),
        eps=_merge(args, "eps", float, 1e-8),
        s_min=_merge(args, "s-min", float, 1e-6),
        a_min=_merge(args, "a-min", float, 1e-4),
        with_depth_pred=bool(int(_merge(args, "with-depth-pred", int, 0))),
        input_scale=_merge(args, "input-scale", float, 0.1),
    )


def _train_config(args) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        key = f.name.replace("_", "-")
        default = f.default
        cast = type(default) if default is not None else float
        value = _merge(args, key, cast, default)
        kwargs[f.name] = value
    return TrainConfig(**kwargs)


def _scene_spec(args) -> SceneSpec:
    h, w = (int(v) for v in _merge(args, "size", str, "64,64").split(","))
    lo, hi = (float(v) for v in _merge(args, "depth-range", str, "2,20").split(","))
    return SceneSpec(seed=int(_merge(args, "seed", int, 0)), size=(h, w),
                     depth_range=(lo, hi),
                     n_bumps=int(_merge(args, "n-bumps", int, 3)),
                     n_steps=int(_merge(args, "n-steps", int, 2)))


def _disturb_spec(args) -> DisturbSpec:
    return DisturbSpec(
        density=float(_merge(args, "density", float, 0.05)),
        outlier_frac=float(_merge(args, "outlier-frac", float, 0.1)),
        outlier_model=_merge(args, "outlier-model", str, "swap"),
        noise_sigma=float(_merge(args, "noise-sigma", float, 0.03)),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    _load_config(args)
    scene = _scene_spec(args)
    disturb = _disturb_spec(args)
    n = int(_merge(args, "n-images", int, 16))
    samples = synth_dataset(scene, disturb, n)
    gridio.save_dataset(samples, args.out, meta={
        "seed": scene.seed, "size": f"{scene.size[0]},{scene.size[1]}",
        "density": disturb.density, "outlier_frac": disturb.outlier_frac,
        "outlier_model": disturb.outlier_model, "noise_sigma": disturb.noise_sigma,
    })
    print(f"wrote {n} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    _load_config(args)
    samples = gridio.load_dataset(args.data)
    pcfg = _pipeline_config(args)
    tcfg = _train_config(args)
    pipeline = build_pipeline(pcfg, tcfg.seed)
    print(f"built {pcfg.variant} pipeline with {pipeline.parameter_count} parameters")
    result = train(pipeline, samples, tcfg,
                   log=None if args.quiet else print)
    gridio.save_checkpoint(pipeline, args.out)
    if args.report_dir:
        evaluation.write_report(result.reports[-1], args.report_dir)
    print(f"saved checkpoint to {args.out} "
          f"(best epoch {result.best_epoch}, "
          f"val loss {result.val_losses[result.best_epoch]:.6f})")
    return 0


def _predict_sample(pipeline: Pipeline, sparse):
    out = pipeline_forward(pipeline, sparse)
    pred = np.asarray(out.prediction.data)
    conf = np.asarray(out.out_conf.data)
    if out.s is not None:
        unc = np.asarray(out.s.data)
    else:
        unc = 1.0 / np.maximum(conf, 1e-12)
    return pred, conf, unc


def cmd_eval(args) -> int:
    _load_config(args)
    samples = gridio.load_dataset(args.data)
    pipeline = gridio.load_checkpoint(args.checkpoint)
    bins = int(_merge(args, "bins", int, 100))
    report = evaluation.evaluate_samples(pipeline, samples, bins=bins)
    evaluation.write_report(report, args.out)
    print(f"rmse={report.rmse:.6f} mae={report.mae:.6f} "
          f"irmse={report.irmse:.6f} imae={report.imae:.6f} ause={report.ause:.6f}")
    return 0


def cmd_predict(args) -> int:
    _load_config(args)
    sparse, _present = gridio.read_depth_png(args.input)
    pipeline = gridio.load_checkpoint(args.checkpoint)
    pred, conf, unc = _predict_sample(pipeline, sparse)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    gridio.write_depth_png(out / f"{stem}_pred.png", np.clip(pred, 0.0, 65535.0 / 256.0))
    gridio.write_grid(out / f"{stem}_conf.cgrd", conf)
    gridio.write_grid(out / f"{stem}_unc.cgrd", unc)
    print(f"wrote prediction for {args.input} to {out}")
    return 0


def _fused_report(fused_list, gt_list, bins):
    pred = np.concatenate([f.ravel() for f in fused_list])
    gt = np.concatenate([g.ravel() for g in gt_list])
    unc = np.zeros_like(pred)  # fused maps carry no uncertainty
    return evaluation.evaluate_arrays(pred, gt, unc, bins=bins)


def cmd_fuse(args) -> int:
    _load_config(args)
    scheme = _merge(args, "scheme", str, "wmean")
    v2 = float(_merge(args, "v2", float, 0.1))
    max_steps = int(_merge(args, "max-steps", int, 500))
    step_lr = float(_merge(args, "step-lr", float, 0.01))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.checkpoints:
        if not args.data:
            raise ValueError("fusing checkpoints requires --data")
        samples = gridio.load_dataset(args.data)
        pipelines = [gridio.load_checkpoint(c) for c in args.checkpoints]
        fused_list, gt_list = [], []
        for i, sample in enumerate(samples):
            trips = [_predict_sample(p, sample.sparse) for p in pipelines]
            preds = np.stack([t[0] for t in trips])
            confs = np.stack([1.0 / np.maximum(t[2], 1e-12) for t in trips])
            fused = fusion.fuse_maps(preds, confs, scheme, v2=v2,
                                     max_steps=max_steps, step_lr=step_lr)
            gridio.write_depth_png(out / f"{i:04d}_pred.png",
                                   np.clip(fused, 0.0, 65535.0 / 256.0))
            fused_list.append(fused)
            gt_list.append(sample.gt)
        report = _fused_report(fused_list, gt_list, int(_merge(args, "bins", int, 100)))
        evaluation.write_report(report, out)
        print(f"fused {len(samples)} images with scheme={scheme}: "
              f"rmse={report.rmse:.6f} mae={report.mae:.6f}")
        return 0

    # prediction directories: member dirs with matching *_pred.png / *_unc.cgrd
    dirs = [Path(d) for d in args.pred_dirs]
    stems = sorted(p.name[:-9] for p in dirs[0].glob("*_pred.png"))
    if not stems:
        raise FormatError(f"no *_pred.png files under {dirs[0]}")
    for stem in stems:
        preds, confs = [], []
        for d in dirs:
            pred, _present = gridio.read_depth_png(d / f"{stem}_pred.png")
            unc = gridio.read_grid(d / f"{stem}_unc.cgrd").astype(np.float64)
            preds.append(pred)
            confs.append(1.0 / np.maximum(unc, 1e-12))
        fused = fusion.fuse_maps(np.stack(preds), np.stack(confs), scheme, v2=v2,
                                 max_steps=max_steps, step_lr=step_lr)
        gridio.write_depth_png(out / f"{stem}_pred.png",
                               np.clip(fused, 0.0, 65535.0 / 256.0))
    print(f"fused {len(stems)} images with scheme={scheme} into {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nconv",
        description="Sparse-signal densification with normalized-convolution "
                    "networks and predictive uncertainty.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="write a synthetic sparse-depth dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--size", default=None, help="H,W")
    p.add_argument("--depth-range", default=None, help="min,max metres")
    p.add_argument("--n-bumps", type=int, default=None)
    p.add_argument("--n-steps", type=int, default=None)
    p.add_argument("--density", type=float, default=None)
    p.add_argument("--outlier-frac", type=float, default=None)
    p.add_argument("--outlier-model", choices=("swap", "offset"), default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a pipeline variant on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report-dir", default=None)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--variant", choices=("ncnn-binary", "ncnn-conf", "pncnn",
                                         "pncnn-exp"), default=None)
    p.add_argument("--unet-channels", default=None)
    p.add_argument("--ncnn-layers", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--s-min", type=float, default=None)
    p.add_argument("--a-min", type=float, default=None)
    p.add_argument("--with-depth-pred", type=int, default=None)
    p.add_argument("--input-scale", type=float, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--decay-every", type=int, default=None)
    p.add_argument("--decay-factor", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--eps-adam", type=float, default=None)
    p.add_argument("--loss", choices=("auto", "l1", "l2", "gauss", "exp", "laplace"),
                   default=None)
    p.add_argument("--val-frac", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--bins", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="densify one sparse depth PNG")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fuse", help="fuse ensemble predictions per pixel")
    common(p)
    p.add_argument("--checkpoints", nargs="+", default=None)
    p.add_argument("--pred-dirs", nargs="+", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=fusion.SCHEMES, default=None)
    p.add_argument("--v2", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--step-lr", type=float, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.set_defaults(func=cmd_fuse)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command == "fuse" and not (args.checkpoints or args.pred_dirs):
        print("error: fuse needs --checkpoints or --pred-dirs", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except KNOWN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
