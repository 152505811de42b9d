"""Command-line entry point.

Subcommands: generate, split, train, eval, run, report. Exit codes:
0 success, 2 validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .dataio import (DataIOError, DatasetManifest, ValidationError, assemble_task_dataset,
                     discover_case_ids, read_case, split_dataset, write_case)
from .losses import LossConfig
from .models import (TrainConfig, load_model, matched_baseline_steps, save_model,
                     train_baseline, train_classifier, train_detector, train_segmentor)
from .models.checkpoint import build_model
from .phantom import COHORTS, PhantomConfig, generate_cohort
from .pipeline import (BaselineSegmentor3D, EvaluationReport, TrainedROISegmentor,
                       choose_classifier_threshold, compare_with_baseline,
                       default_configs_echo, evaluate_stage_classification,
                       evaluate_stage_detection, evaluate_stage_segmentation, load_cascade,
                       run_cascade, save_cascade, CascadeModels, TrainedSliceClassifier,
                       TrainedTumorDetector, CASCADE_META)
from .metrics import (CurveResult, write_pr_csv, write_roc_csv, write_threshold_sweep_csv,
                      ClassificationMetrics)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3

CONFIG_SECTIONS = {"phantom": PhantomConfig, "loss": LossConfig, "train": TrainConfig}


def load_configs(path: Path | None):
    """JSON config with optional phantom/loss/train sections."""
    sections = {"phantom": {}, "loss": {}, "train": {}}
    if path is not None:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(payload) - set(sections)
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        for key in sections:
            sections[key] = dict(payload.get(key, {}))
    built = {}
    for key, cls in CONFIG_SECTIONS.items():
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(sections[key]) - fields
        if unknown:
            raise ValidationError(f"unknown {key} config fields: {sorted(unknown)}")
        built[key] = cls(**sections[key])
    return built["phantom"], built["loss"], built["train"]


def cmd_generate(args) -> int:
    phantom_config, _, _ = load_configs(args.config)
    if args.cohort not in COHORTS:
        raise ValidationError(f"cohort must be one of {COHORTS}")
    cases = generate_cohort(phantom_config, args.cases, args.cohort, args.seed)
    out = Path(args.out)
    for case in cases:
        write_case(case, out)
    print(f"generated {len(cases)} cohort-{args.cohort} cases into {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    ratios = tuple(float(r) for r in args.ratios.split(","))
    if len(ratios) != 3:
        raise ValidationError("--ratios must be three comma-separated numbers")
    data = Path(args.data)
    case_ids = discover_case_ids(data)
    if not case_ids:
        raise DataIOError(f"no cases found in {data}")
    manifest = split_dataset(case_ids, ratios, args.seed, root=data)
    path = manifest.save(data / "manifest.json")
    counts = {s: len(manifest.entries_for(s)) for s in ("train", "valid", "test")}
    print(f"wrote {path} ({counts['train']}/{counts['valid']}/{counts['test']} cases)")
    return EXIT_OK


def _load_manifest(data_dir: Path) -> DatasetManifest:
    return DatasetManifest.load(Path(data_dir) / "manifest.json")


def cmd_train(args) -> int:
    _, loss_config, train_config = load_configs(args.config)
    manifest = _load_manifest(args.data)
    init = None
    if args.init:
        init, _ = load_model(Path(args.init))
    stage_budget = train_config.epochs_pretrain if args.stage == "pretrain" \
        else train_config.epochs_finetune
    epochs_override = args.epochs

    if args.module == "classifier":
        data = assemble_task_dataset(manifest, "train", "classification")
        model, history = train_classifier(data, train_config, init=init,
                                          epochs=epochs_override or stage_budget.classifier,
                                          loss_config=loss_config)
    elif args.module == "detector":
        data = assemble_task_dataset(manifest, "train", "detection")
        model, history = train_detector(data, train_config, init=init,
                                        epochs=epochs_override or stage_budget.detector,
                                        loss_config=loss_config)
    elif args.module == "segmentor":
        data = assemble_task_dataset(manifest, "train", "segmentation",
                                     roi_margin_px=args.roi_margin)
        model, history = train_segmentor(data, train_config, init=init,
                                         epochs=epochs_override or stage_budget.segmentor,
                                         loss_config=loss_config)
    elif args.module == "baseline":
        n_cls = len(assemble_task_dataset(manifest, "train", "classification"))
        n_det = len(assemble_task_dataset(manifest, "train", "detection"))
        n_seg = len(assemble_task_dataset(manifest, "train", "segmentation",
                                          roi_margin_px=args.roi_margin))
        budget = dataclasses.replace(
            stage_budget,
            classifier=epochs_override or stage_budget.classifier,
            detector=epochs_override or stage_budget.detector,
            segmentor=epochs_override or stage_budget.segmentor,
        ) if epochs_override else stage_budget
        steps = args.steps or matched_baseline_steps(n_cls, n_det, n_seg, train_config, budget)
        volumes = []
        for entry in manifest.entries_for("train"):
            case = read_case(manifest.root, entry.case_id)
            volumes.append((case.volume.voxels, case.gt_mask.voxels))
        model, history = train_baseline(volumes, train_config, steps, init=init,
                                        loss_config=loss_config)
    else:
        raise ValidationError(f"unknown module {args.module!r}")

    save_model(Path(args.out), model, train_config.as_dict(), train_config.rng_seed)
    first = history[0] if history else float("nan")
    last = history[-1] if history else float("nan")
    print(f"trained {args.module} ({args.stage}, {len(history)} epochs): "
          f"loss {first:.6f} -> {last:.6f}; saved to {args.out}")
    return EXIT_OK


def _cascade_from_dir(models_dir: Path, manifest: DatasetManifest, roi_margin: int):
    models_dir = Path(models_dir)
    if (models_dir / CASCADE_META).exists():
        return load_cascade(models_dir)
    clf, _ = load_model(models_dir / "classifier")
    det, _ = load_model(models_dir / "detector")
    seg, _ = load_model(models_dir / "segmentor")
    classifier = TrainedSliceClassifier(clf)
    threshold, gmean = choose_classifier_threshold(classifier, manifest, "valid")
    models = CascadeModels(
        classifier=classifier,
        detector=TrainedTumorDetector(det),
        segmentor=TrainedROISegmentor(seg, margin_px=roi_margin),
        classifier_threshold=threshold,
        threshold_provenance=f"optimal_threshold on valid split (gmean={gmean:.4f})",
    )
    save_cascade(models_dir, models)
    return models


def cmd_eval(args) -> int:
    _, loss_config, train_config = load_configs(args.config)
    manifest = _load_manifest(args.data)
    models = _cascade_from_dir(args.models, manifest, args.roi_margin)

    classification = evaluate_stage_classification(models, manifest, args.split)
    _, detection = evaluate_stage_detection(models, manifest, args.split)
    seg_gt = evaluate_stage_segmentation(models, manifest, args.split, "gt_boxes")
    seg_pred = evaluate_stage_segmentation(models, manifest, args.split, "predicted_boxes")

    baseline_block = None
    baseline_stem = Path(args.models) / "baseline"
    if baseline_stem.with_suffix(".model.json").exists():
        net, _ = load_model(baseline_stem)
        baseline_block = compare_with_baseline(seg_pred, BaselineSegmentor3D(net),
                                               manifest, args.split)

    report = EvaluationReport(
        split=args.split,
        classification=classification,
        detection=detection,
        segmentation_gt_boxes=seg_gt,
        segmentation_predicted=seg_pred,
        baseline_comparison=baseline_block,
        configs=default_configs_echo(loss_config, train_config, models.segmentor.margin_px),
    )
    report.check_self_consistency()
    report.save(Path(args.report))
    print(f"report written to {args.report} "
          f"(AUC={classification['auc']:.4f}, mAP={detection['map']:.4f}, "
          f"3D Dice={seg_pred['case_dice']['mean']:.4f})")
    return EXIT_OK


def cmd_run(args) -> int:
    case_dir = Path(args.volume)
    case_ids = discover_case_ids(case_dir)
    if args.case_id:
        case_id = args.case_id
    elif len(case_ids) == 1:
        case_id = case_ids[0]
    else:
        raise ValidationError(
            f"{case_dir} holds {len(case_ids)} cases; pick one with --case-id")
    case = read_case(case_dir, case_id)
    models = load_cascade(Path(args.models))
    mask, detections = run_cascade(case.volume, models)

    out = Path(args.out)
    stem = out.name[: -len(".mask.json")] if out.name.endswith(".mask.json") else out.name
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "petcascade-mask/1",
        "case_id": case_id,
        "dims": list(mask.dims),
        "dtype": "uint8",
        "byte_order": "little",
        "axis_order": "zyx",
        "raster": f"{stem}.mask.raw",
        "tumor_instances": [],
    }
    from .dataio import _json_bytes, _write_raster
    (out.parent / f"{stem}.mask.json").write_bytes(_json_bytes(header))
    _write_raster(out.parent / f"{stem}.mask.raw", mask.voxels, "uint8")
    n_dets = sum(len(d) for d in detections.values())
    print(f"cascade mask for {case_id}: {int(mask.voxels.sum())} voxels, "
          f"{n_dets} detections over {len(detections)} gated slices")
    return EXIT_OK


def cmd_report(args) -> int:
    report = EvaluationReport.load(Path(args.infile))
    curves = Path(args.curves)
    curves.mkdir(parents=True, exist_ok=True)
    if not report.classification:
        raise ValidationError("report has no classification block")
    cls = report.classification
    sweep = [ClassificationMetrics(**{k: (tuple(v) if k == "undefined" else v)
                                      for k, v in m.items()}) for m in cls["sweep"]]
    write_threshold_sweep_csv(curves / "threshold_sweep.csv", sweep)
    write_roc_csv(curves / "roc.csv",
                  CurveResult(tuple(tuple(p) for p in cls["roc_points"]), cls["auc"]))
    write_pr_csv(curves / "pr.csv",
                 CurveResult(tuple(tuple(p) for p in cls["pr_points"]), cls["ap"]))
    print(f"curves written to {curves}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petcascade")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic cohort")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="write a train/valid/test manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one module")
    p.add_argument("--module", required=True,
                   choices=["classifier", "detector", "segmentor", "baseline"])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage", choices=["pretrain", "finetune"], default="pretrain")
    p.add_argument("--init", type=Path, default=None)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None,
                   help="override the stage epoch budget")
    p.add_argument("--steps", type=int, default=None,
                   help="baseline only: explicit gradient-step budget")
    p.add_argument("--roi-margin", type=int, default=2)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate the cascade and write a report")
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--roi-margin", type=int, default=2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run the cascade on one case")
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--volume", type=Path, required=True, help="case directory")
    p.add_argument("--case-id", default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="export ROC/PR/threshold-sweep CSVs")
    p.add_argument("--in", dest="infile", type=Path, required=True)
    p.add_argument("--curves", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataIOError, OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
