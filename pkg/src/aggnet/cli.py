"""Command-line workflows: rectify, synth, train, eval, gsd-study,
gradcheck, score-file.

Every command accepts --seed and --config. Exit codes are stable: 0 on
success, 1 for usage or config problems, 2 for contract and data errors.
Artifacts land under the command's output directory together with a
run.json provenance record (config hash, seed, library versions; no
timestamps, so identical runs leave identical trees).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .autodiff import grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_class_specs, load_dataset, make_splits, read_image, write_image
from .errors import ConfigError, ContractError, DataError
from .evaluate import (confusion, import_predictions, predict_samples,
                       report_from_matrix)
from .geometry import estimate_homography, load_correspondences, warp_rectify
from .model import AggNetConfig, init_params, perturb_biases
from .synth import build_synthetic_dataset
from .train import (TrainConfig, batch_loss_and_grads, load_train_config,
                    run_repeated, train, write_history)

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--config", type=Path, default=None,
                     help="TOML training/model configuration")


def build_parser():
    parser = _Parser(prog="aggnet",
                     description="grading-curve classification pipeline")
    subs = parser.add_subparsers(dest="command", required=True,
                                 parser_class=_Parser)

    p = subs.add_parser("rectify", help="estimate a homography and rectify")
    _add_common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--markers", type=Path, required=True,
                   help="correspondence file: X_mm Y_mm u_px v_px per line")
    p.add_argument("--gsd", type=float, required=True, help="target px/mm")
    p.add_argument("--extent", type=str, required=True,
                   help="object extent in mm, e.g. 200x150")
    p.add_argument("--out", type=Path, required=True, help="output PNG path")
    p.add_argument("--bits", type=int, default=16, choices=(8, 16))
    p.set_defaults(func=cmd_rectify)

    p = subs.add_parser("synth", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--classes", type=Path, required=True,
                   help="class-spec file: name and four mass fractions")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--per-class-s1", type=int, default=36)
    p.add_argument("--per-class-s2", type=int, default=15)
    p.add_argument("--gsd", type=float, default=2.0)
    p.add_argument("--extent-mm", type=float, default=64.0)
    p.add_argument("--fill", type=float, default=0.6)
    p.add_argument("--bits", type=int, default=8, choices=(8, 16))
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--gsd", type=float, default=None,
                   help="resample inputs to this scale before scoring")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gsd-study", help="accuracy across image scales")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", type=Path)
    src.add_argument("--synthetic", type=Path,
                     help="class-spec file; a dataset is rendered first")
    p.add_argument("--gsds", type=str, required=True,
                   help="comma-separated px/mm list, e.g. 0.5,1.0,2.0")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--per-class-s1", type=int, default=36)
    p.add_argument("--per-class-s2", type=int, default=15)
    p.add_argument("--extent-mm", type=float, default=64.0)
    p.add_argument("--base-gsd", type=float, default=4.0,
                   help="render scale of the synthetic source images")
    p.set_defaults(func=cmd_gsd_study)

    p = subs.add_parser("gradcheck",
                        help="finite-difference check of the backward pass")
    _add_common(p)
    p.add_argument("--variant", choices=("MS", "Base", "both"), default="both")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("score-file",
                        help="score an external prediction CSV")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True,
                   help="CSV with image_id,predicted_class")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.set_defaults(func=cmd_score_file)
    return parser


def _parse_extent(text):
    parts = text.lower().replace(",", "x").split("x")
    try:
        vals = [float(v) for v in parts if v]
    except ValueError as exc:
        raise ConfigError(f"bad extent {text!r}: {exc}") from exc
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) == 2:
        return (vals[0], vals[1])
    raise ConfigError(f"bad extent {text!r}: expected WIDTHxHEIGHT in mm")


def _load_config(args):
    """Resolve (model kwargs, TrainConfig, provenance digest)."""
    if args.config is not None:
        model_kwargs, tcfg = load_train_config(args.config)
        digest = report.config_digest(args.config.read_bytes())
    else:
        model_kwargs, tcfg = {}, TrainConfig()
        digest = report.config_digest({"defaults": True})
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    return model_kwargs, tcfg, digest


def _model_config(model_kwargs, dataset):
    kwargs = dict(model_kwargs)
    kwargs.setdefault("variant", "MS")
    kwargs.setdefault("class_count", len(dataset.classes))
    if kwargs["class_count"] != len(dataset.classes):
        raise DataError(
            f"config expects {kwargs['class_count']} classes, dataset has "
            f"{len(dataset.classes)}")
    return AggNetConfig(**kwargs)


def _out_dir(path):
    path.mkdir(parents=True, exist_ok=True)
    return path


def _split_samples(dataset, which):
    if which == "all":
        return list(dataset.samples)
    return [s for s in dataset.samples if s.sample_set == "S2"]


def cmd_rectify(args):
    markers = load_correspondences(args.markers)
    hom = estimate_homography(markers)
    image = read_image(args.image)
    extent = _parse_extent(args.extent)
    rect = warp_rectify(image, hom, args.gsd, extent)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, rect.pixels, bits=args.bits)
    digest = report.config_digest(args.config.read_bytes()) \
        if args.config else report.config_digest({"defaults": True})
    report.write_run_json(
        args.out.with_suffix(args.out.suffix + ".run.json"),
        seed=args.seed if args.seed is not None else 0, digest=digest,
        extra={"command": "rectify", "reprojection_rmse_px": hom.rmse_px,
               "condition": hom.condition})
    print(f"reprojection RMSE {hom.rmse_px:.6f} px over {len(markers)} markers")
    print(f"condition number {hom.condition:.3e}")
    print(f"wrote {rect.pixels.shape[1]}x{rect.pixels.shape[0]} px at "
          f"{rect.gsd} px/mm to {args.out}")
    return 0


def cmd_synth(args):
    specs = load_class_specs(args.classes)
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args.out_dir)
    manifest = build_synthetic_dataset(
        specs, out, n_s1=args.per_class_s1, n_s2=args.per_class_s2,
        gsd=args.gsd, extent_mm=args.extent_mm, seed=seed, fill=args.fill,
        bits=args.bits)
    digest = report.config_digest(args.config.read_bytes()) \
        if args.config else report.config_digest({"defaults": True})
    report.write_run_json(out / "run.json", seed=seed, digest=digest,
                          extra={"command": "synth",
                                 "classes": [s.name for s in specs],
                                 "per_class_s1": args.per_class_s1,
                                 "per_class_s2": args.per_class_s2,
                                 "gsd": args.gsd})
    total = len(specs) * (args.per_class_s1 + args.per_class_s2)
    print(f"rendered {total} images over {len(specs)} classes into {out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args):
    model_kwargs, tcfg, digest = _load_config(args)
    dataset = load_dataset(args.dataset)
    mcfg = _model_config(model_kwargs, dataset)
    split = make_splits(dataset, tcfg.seed)
    train_samples = [dataset.samples[i] for i in split.train]
    val_samples = [dataset.samples[i] for i in split.val]
    result = train(mcfg, train_samples, val_samples, tcfg)
    out = _out_dir(args.out_dir)
    save_checkpoint(out / "model.ckpt", mcfg, result.params, seed=tcfg.seed,
                    epoch=result.best_epoch, history_len=len(result.history))
    write_history(out / "history.csv", result.history)
    report.write_history_svg(out / "history.svg", result.history)
    report.write_run_json(out / "run.json", seed=tcfg.seed, digest=digest,
                          extra={"command": "train",
                                 "best_epoch": result.best_epoch,
                                 "best_val_loss": result.best_val_loss,
                                 "stop_reason": result.stop_reason,
                                 "epochs_run": len(result.history)})
    print(f"trained {len(result.history)} epochs "
          f"({result.stop_reason}); best epoch {result.best_epoch}, "
          f"val loss {result.best_val_loss:.6f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(args):
    ck = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if len(dataset.classes) != ck.config.class_count:
        raise DataError(
            f"checkpoint has {ck.config.class_count} classes, dataset "
            f"{len(dataset.classes)}")
    samples = _split_samples(dataset, args.split)
    if not samples:
        raise DataError(f"no samples in split {args.split!r}")
    preds = predict_samples(ck.params, ck.config, samples, gsd=args.gsd)
    refs = [s.label.index for s in samples]
    cm = confusion(preds, refs, ck.config.class_count)
    rep = report_from_matrix(cm, class_names=dataset.classes)
    out = _out_dir(args.out_dir)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "predicted_class"])
        for smp, p in zip(samples, preds):
            writer.writerow([smp.source_id, dataset.classes[p - 1]])
    report.write_metrics_json(out / "metrics.json", rep)
    report.write_confusion_text(out / "confusion.txt", rep)
    report.write_confusion_svg(out / "confusion.svg", rep)
    digest = report.config_digest(args.config.read_bytes()) \
        if args.config else report.config_digest({"defaults": True})
    report.write_run_json(out / "run.json",
                          seed=args.seed if args.seed is not None else ck.seed,
                          digest=digest,
                          extra={"command": "eval", "split": args.split,
                                 "checkpoint_epoch": ck.epoch})
    print(f"scored {len(samples)} images: OA {rep.oa:.1f} %")
    print(f"reports under {out}")
    return 0


def cmd_gsd_study(args):
    model_kwargs, tcfg, digest = _load_config(args)
    out = _out_dir(args.out_dir)
    if args.synthetic is not None:
        specs = load_class_specs(args.synthetic)
        dataset_root = out / "dataset"
        build_synthetic_dataset(
            specs, dataset_root, n_s1=args.per_class_s1,
            n_s2=args.per_class_s2, gsd=args.base_gsd,
            extent_mm=args.extent_mm, seed=tcfg.seed)
    else:
        dataset_root = args.dataset
    dataset = load_dataset(dataset_root)
    mcfg = _model_config(model_kwargs, dataset)
    split = make_splits(dataset, tcfg.seed)
    train_samples = [dataset.samples[i] for i in split.train]
    val_samples = [dataset.samples[i] for i in split.val]
    test_samples = [dataset.samples[i] for i in split.test]
    try:
        gsds = sorted(float(g) for g in args.gsds.split(",") if g.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --gsds list {args.gsds!r}: {exc}") from exc
    if not gsds or any(g <= 0 for g in gsds):
        raise ConfigError(f"--gsds must list positive scales, got {args.gsds!r}")
    rows, failures = [], []
    for g in gsds:
        cfg_g = dataclasses.replace(tcfg, gsd=g)
        try:
            res = run_repeated(mcfg, train_samples, val_samples, test_samples,
                               cfg_g, k=args.runs)
            rows.append((g, res.aggregate.oa, res.aggregate.oa_sigma, args.runs))
            print(f"gsd {g:g} px/mm: OA {res.aggregate.oa:.1f} % "
                  f"(sigma {res.aggregate.oa_sigma:.1f})")
        except ContractError as exc:
            rows.append((g, float("nan"), float("nan"), 0))
            failures.append(f"gsd {g:g}: {exc}")
            print(f"gsd {g:g} px/mm: failed ({exc})", file=sys.stderr)
    with open(out / "study.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gsd_px_per_mm", "mean_oa", "sigma_oa", "runs_ok"])
        for g, mean, sigma, ok in rows:
            writer.writerow([g, "" if ok == 0 else repr(mean),
                             "" if ok == 0 else repr(sigma), ok])
    report.write_gsd_curve_svg(out / "gsd_curve.svg", rows)
    report.write_run_json(out / "run.json", seed=tcfg.seed, digest=digest,
                          extra={"command": "gsd-study", "gsds": gsds,
                                 "runs": args.runs, "failures": failures})
    print(f"study written to {out / 'study.csv'}")
    return 0


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    variants = ("MS", "Base") if args.variant == "both" else (args.variant,)
    started = time.monotonic()
    worst = 0.0
    for variant in variants:
        cfg = AggNetConfig(variant=variant, class_count=2, stem_depth=3,
                           module_depths=(2, 2, 2, 2))
        rng = np.random.Generator(np.random.PCG64(seed))
        params = perturb_biases(init_params(cfg, rng), rng)
        image = rng.uniform(0.0, 1.0, size=(16, 16, 3))

        def loss_and_grads(p):
            return batch_loss_and_grads(p, cfg, [image], [0], 0.0)

        result = grad_check(loss_and_grads, params, eps=1e-5)
        block_worst = max(result.values())
        worst = max(worst, block_worst)
        print(f"{variant}: {len(result)} parameter blocks, "
              f"max relative error {block_worst:.3e}")
    print(f"max relative error {worst:.3e} "
          f"({time.monotonic() - started:.1f} s)")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"FAILED: exceeds {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 2
    print(f"OK: below {GRADCHECK_TOLERANCE:g}")
    return 0


def cmd_score_file(args):
    dataset = load_dataset(args.dataset)
    samples = _split_samples(dataset, args.split)
    refs, preds = import_predictions(args.predictions, samples, dataset.classes)
    out = _out_dir(args.out_dir)
    digest = report.config_digest(args.config.read_bytes()) \
        if args.config else report.config_digest({"defaults": True})
    if not refs:
        report.write_run_json(out / "run.json",
                              seed=args.seed if args.seed is not None else 0,
                              digest=digest,
                              extra={"command": "score-file", "scored": 0})
        print("prediction file is empty; nothing to score")
        return 0
    cm = confusion(preds, refs, len(dataset.classes))
    rep = report_from_matrix(cm, class_names=dataset.classes)
    report.write_metrics_json(out / "metrics.json", rep)
    report.write_confusion_text(out / "confusion.txt", rep)
    report.write_confusion_svg(out / "confusion.svg", rep)
    report.write_run_json(out / "run.json",
                          seed=args.seed if args.seed is not None else 0,
                          digest=digest,
                          extra={"command": "score-file", "scored": len(refs)})
    print(f"scored {len(refs)} external predictions: OA {rep.oa:.1f} %")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
