"""Command-line entry point: prepare-data, train, evaluate, infer, explain.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import OUTPUT_ENV, ConfigError, RunConfig
from .dataset import (ManifestError, PreprocessSpec, build_manifest, denormalize, load_and_preprocess,
                      read_manifest, split_by_patient, split_summary, write_manifest, write_rejects)

log = logging.getLogger("cxr_triage")


class UsageError(Exception):
    pass


def _write_rows(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return path


def _print_table(rows, out=sys.stdout):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(str(v).rjust(w) for v, w in zip(r, widths)), file=out)


def _overrides(args) -> dict:
    o = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "output_dir", None):
        o["output_dir"] = args.output_dir
    return o


def _load_config(args, required=True) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config, _overrides(args))
    if required:
        raise UsageError("--config is required")
    return RunConfig(None, _overrides(args))


# --------------------------------------------------------------------------- #

def cmd_prepare_data(args) -> int:
    cfg = _load_config(args)
    cfg.require_paths("data.covid_dir", "data.pneumonia_dir")
    d = cfg.data["data"]
    meta = cfg.resolve(d["covid_metadata"]) if d["covid_metadata"] else None
    manifest = build_manifest(cfg.resolve(d["covid_dir"]), cfg.resolve(d["pneumonia_dir"]), meta)
    manifest = split_by_patient(manifest, cfg.data["split"]["test_fraction"], cfg.data["split"]["val_count"],
                                seed=cfg.split_seed(), keep_labels=cfg.keep_labels())
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo()
    write_manifest(manifest, cfg.manifest_path)
    write_rejects(manifest.rejects, out / "rejects.tsv")
    images = split_summary(manifest, "images")
    patients = split_summary(manifest, "patients")
    _write_rows(images, out / "split_summary_images.csv")
    _write_rows(patients, out / "split_summary_patients.csv")
    print("Sample-wise split")
    _print_table(images)
    print("Patient-wise split")
    _print_table(patients)
    print(f"prepare-data: {len(manifest.records)} records, {len(manifest.rejects)} rejects -> {cfg.manifest_path}")
    return 0


def _train_val(cfg: RunConfig):
    if not cfg.manifest_path.is_file():
        raise ConfigError([f"manifest {cfg.manifest_path} not found; run prepare-data first"])
    manifest = read_manifest(cfg.manifest_path)
    train, val = manifest.subset("train"), manifest.subset("val")
    if not train or not val:
        raise ConfigError(["manifest has an empty train or val split"])
    return train, val


def cmd_train(args) -> int:
    from .loss import class_config_with_weights
    from .model import build_model, load_checkpoint
    from .trainer import train_stage

    cfg = _load_config(args)
    if cfg.data["model"]["init_weights"]:
        cfg.require_paths("model.init_weights")
    train, val = _train_val(cfg)
    class_cfg = class_config_with_weights(cfg.class_config(), [r.label for r in train])
    spec = cfg.classifier_spec()
    pre = cfg.preprocess_spec()
    ckpt_dir = cfg.output_dir / "checkpoints"
    cfg.echo()

    stages = [1, 2] if args.stage is None else [args.stage]
    if stages == [2]:
        start = ckpt_dir / "stage1_best.pt"
        if not start.is_file():
            raise ConfigError([f"stage 2 needs {start}; run stage 1 first"])
        model, _ = load_checkpoint(start, spec)
    else:
        model = build_model(spec)

    best = None
    for stage in stages:
        scfg = cfg.stage_config(stage)
        tlog, best = train_stage(model, scfg, train, val, class_cfg, pre, ckpt_dir, classifier_spec=spec,
                                 num_workers=cfg.data["num_workers"],
                                 extra_meta={"seed": cfg.seed})
        print(f"stage {stage}: selected epoch {tlog.selected_epoch} val_loss {tlog.best_val_loss:.6f}")
    final = cfg.output_dir / "final.pt"
    final.write_bytes(Path(best).read_bytes())
    print(f"train: final checkpoint {final}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import PredictionMatrix, evaluate, read_predictions, write_predictions
    from .plotting import plot_confusion_matrix, plot_roc_curves

    cfg = _load_config(args, required=args.predictions is None)
    if args.predictions:
        pred = read_predictions(args.predictions)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --predictions is given")
        from .model import load_checkpoint
        from .trainer import predict
        from .classes import ClassConfig

        model, meta = load_checkpoint(args.checkpoint)
        class_cfg = ClassConfig.from_dict(meta["class_config"])
        pre = PreprocessSpec.from_dict(meta["preprocess"]) if "preprocess" in meta else cfg.preprocess_spec()
        test = read_manifest(cfg.manifest_path).subset("test")
        if not test:
            raise ConfigError(["manifest has an empty test split"])
        scores = predict(model, test, class_cfg, pre)
        pred = PredictionMatrix(scores, [class_cfg.index(r.label) for r in test], class_cfg.classes,
                                [r.image_path for r in test])
    out = cfg.output_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    m = cfg.data["metrics"]
    report = evaluate(pred, m["bootstrap_resamples"], m["bootstrap_size"], seed=cfg.seed)
    write_predictions(pred, out / "predictions.csv")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_rows(report.table_rows(), out / "per_class.csv")
    _write_rows([["truth\\pred", *pred.class_names]] +
                [[name, *row] for name, row in zip(pred.class_names, report.confusion.tolist())],
                out / "confusion.csv")
    plot_roc_curves(report, out / "roc.png")
    plot_confusion_matrix(report, out / "confusion.png")
    _print_table(report.table_rows())
    b = report.bootstrap
    f1 = f" f1={b.point:.4f} [{b.ci_low:.4f}, {b.ci_high:.4f}]" if b else ""
    print(f"evaluate: n={len(pred)} accuracy={report.accuracy:.4f} mean_auroc={report.mean_auroc:.4f}{f1} -> {out}")
    return 0


def _checkpoint_context(path):
    from .classes import ClassConfig
    from .model import load_checkpoint

    model, meta = load_checkpoint(path)
    class_cfg = ClassConfig.from_dict(meta["class_config"])
    pre = PreprocessSpec.from_dict(meta["preprocess"]) if "preprocess" in meta else PreprocessSpec()
    return model, class_cfg, pre


def _output_dir(args) -> Path:
    if args.config:
        return _load_config(args).output_dir
    return Path(args.output_dir or os.environ.get(OUTPUT_ENV) or ".")


def cmd_infer(args) -> int:
    import torch

    model, class_cfg, pre = _checkpoint_context(args.checkpoint)
    rows = [["image", "prediction", *class_cfg.classes]]
    with torch.no_grad():
        for img in args.images:
            scores = model(load_and_preprocess(img, pre, "eval").unsqueeze(0))[0].numpy()
            cls = class_cfg.classes[int(np.argmax(scores))]
            rows.append([img, cls, *(f"{s:.6f}" for s in scores)])
            print(f"{img}\t{cls}\t" + "\t".join(f"{n}={s:.4f}" for n, s in zip(class_cfg.classes, scores)))
    out = _write_rows(rows, _output_dir(args) / "infer_scores.csv")
    print(f"infer: {len(args.images)} image(s) -> {out}")
    return 0


def cmd_explain(args) -> int:
    import torch

    from .plotting import saliency_overlay
    from .saliency import MaskSpec, generate_masks, rise_saliency

    model, class_cfg, pre = _checkpoint_context(args.checkpoint)
    if args.config:
        spec = _load_config(args).mask_spec(args.masks)
    else:
        spec = MaskSpec(num_masks=args.masks or 1000)
    out = _output_dir(args) / "saliency"
    out.mkdir(parents=True, exist_ok=True)
    masks = generate_masks(spec, pre.target_size)
    for img in args.images:
        x = load_and_preprocess(img, pre, "eval")
        sal = rise_saliency(model, x, spec, mean=pre.mean, std=pre.std, class_names=class_cfg.classes,
                            masks=masks)
        stem = Path(img).stem
        np.savez_compressed(out / f"{stem}_saliency.npz", maps=sal.maps.astype(np.float32),
                            classes=np.array(class_cfg.classes))
        (out / f"{stem}_saliency.json").write_text(json.dumps(sal.metadata(), indent=2, sort_keys=True) + "\n")
        gray = denormalize(x, pre)[0].clamp(0, 1).numpy()
        pred = int(np.argmax(sal.scores))
        targets = range(len(class_cfg.classes)) if args.all_classes else [pred]
        for c in targets:
            name = class_cfg.classes[c]
            saliency_overlay(gray, sal.maps[c], out / f"{stem}_{name}.png",
                             title=f"{name} (score {sal.scores[c]:.3f})")
        print(f"{img}\tpredicted {class_cfg.classes[pred]}\t{spec.num_masks} masks")
    print(f"explain: {len(args.images)} image(s) -> {out}")
    return 0


# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxr-triage", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML run config")
        sp.add_argument("--output-dir", help=f"override output directory (also ${OUTPUT_ENV})")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("prepare-data", help="build the manifest and patient-wise split")
    common(sp)
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="run the two-stage training protocol")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="metrics, ROC curves and confusion matrix on the test split")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions", help="score a prediction file instead of running a model")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("infer", help="class scores and decision for images")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("explain", help="RISE saliency overlays for images")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--masks", type=int, help="number of random masks (default 1000)")
    sp.add_argument("--all-classes", action="store_true", help="render every class, not just the predicted one")
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
