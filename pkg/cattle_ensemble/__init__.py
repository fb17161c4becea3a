"""
Calibrated weighted-ensemble evaluation for cattle FMD and LSD image
classifiers.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .__about__ import __version__
from .ensemble import (
    ABLATIONS,
    DEFAULT_FUSION,
    apply_ablation,
    enumerate_grid,
    fit_fusion_weights,
    fit_temperature,
    fuse,
    grid_search_weights,
    load_fusion_config,
    nll,
    run_fusion,
    save_fusion_config,
    write_grid_csv,
)
from .export import fmt, sha256_file, write_csv, write_json
from .imaging import ImageError
from .manifest import (
    EXPECTED_COUNTS,
    ManifestError,
    dedup_by_digest,
    load_expected_counts,
    load_manifest,
    split_labels,
    verify_split_accounting,
)
from .metrics import (
    PUBLISHED_CONFUSION,
    compute_metrics,
    confusion,
    load_confusion_json,
    macro_auc,
    model_summary,
    roc_curves,
    write_confusion_csv,
    write_metrics_json,
    write_per_class_csv,
    write_roc_csv,
)
from .plots import plot_confusion, plot_roc, plot_training, read_training_csv
from .predictions import PredictionError, PredictionSet, load_predictions, save_predictions
from .prep import run_prep_pipeline
from .pydantic_models import (
    BASE_MODELS,
    AugmentSpec,
    FusionConfig,
    MetricsReport,
    ModelName,
    RunManifest,
    Split,
    SyntheticSpec,
)
from .synth import replicate_confusion, synthesize

LOGGER = logging.getLogger("cattle-ensemble")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CHECK = 2


class CheckFailed(Exception):
    """A requested check did not pass; outputs were still written."""

    def __init__(self, message: str, outputs: list[Path]):
        super().__init__(message)
        self.outputs = outputs


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 1); exit 2 is reserved for
    failed checks."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, "%s: error: %s\n" % (self.prog, message))


def parse_pred(value: str) -> tuple[ModelName, Path]:
    model, sep, path = value.partition("=")
    if not sep or not path:
        raise argparse.ArgumentTypeError("expected MODEL=PATH, got %r" % value)
    try:
        name = ModelName(model.strip().lower())
    except ValueError:
        raise argparse.ArgumentTypeError("unknown model %r" % model) from None
    if name not in BASE_MODELS:
        raise argparse.ArgumentTypeError("%s is not a base model" % model)
    return name, Path(path)


def make_argparse() -> argparse.ArgumentParser:
    """Create command-line argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Verbose logging output")
    common.add_argument(
        "-o", "--out", type=Path, default=Path.cwd() / "build", help="Output directory"
    )
    common.add_argument("--seed", type=int, default=42, help="Root seed of every random stream")

    preds = argparse.ArgumentParser(add_help=False)
    preds.add_argument("--manifest", type=Path, required=True, help="Dataset manifest JSON")
    preds.add_argument(
        "--pred",
        type=parse_pred,
        action="append",
        default=[],
        metavar="MODEL=PATH",
        help="Prediction file of a base model (repeat for vgg16, resnet50, inceptionv3)",
    )
    preds.add_argument(
        "--fusion-config", type=Path, default=DEFAULT_FUSION, help="Fusion weights and temperature"
    )

    parser = ArgumentParser(description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("prep", parents=[common], help="Resize, shuffle, augment and normalize images")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--image-root", type=Path, help="Base of image paths (default: manifest directory)")
    p.add_argument("--augment-spec", type=Path, help="JSON with augmentation intervals")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="Fail (exit 2) if any image fails")
    p.add_argument("--check-table1", action="store_true", help="Check split accounting first")
    p.add_argument("--expected-counts", type=Path, default=EXPECTED_COUNTS)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("dedup", parents=[common], help="Remove images with duplicate SHA-256")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--check-table1", action="store_true")
    p.add_argument("--expected-counts", type=Path, default=EXPECTED_COUNTS)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("synth", parents=[common], help="Write synthetic predictions and labels")
    p.add_argument("--synthetic-spec", type=Path, help="JSON SyntheticSpec")
    p.add_argument(
        "--replicate-confusion",
        type=Path,
        nargs="?",
        const=PUBLISHED_CONFUSION,
        help="Realize a confusion matrix exactly (default: the shipped test-set matrix)",
    )
    p.set_defaults(func=cmd_synth)

    for name, func, split, text in (
        ("fuse", cmd_fuse, Split.TESTING, "Write fused ensemble probabilities"),
        ("calibrate", cmd_calibrate, Split.VALIDATION, "Fit the temperature"),
        ("gridsearch", cmd_gridsearch, Split.VALIDATION, "Grid-search fusion weights"),
        ("evaluate", cmd_evaluate, Split.TESTING, "Compute metrics, tables and plots"),
        ("ablate", cmd_ablate, Split.TESTING, "Component-removal study"),
    ):
        p = sub.add_parser(name, parents=[common, preds], help=text)
        p.add_argument("--labels-split", type=Split, default=split, choices=[s.value for s in Split])
        p.set_defaults(func=func)
        if name == "calibrate":
            p.add_argument("--fit-temperature", choices=["grid", "gradient"], default="grid")
        if name == "gridsearch":
            p.add_argument("--grid-lo", default="0.10")
            p.add_argument("--grid-hi", default="0.50")
            p.add_argument("--grid-step", default="0.05")
            p.add_argument(
                "--fit-weights", action="store_true", help="Also fit continuous weights by NLL"
            )

    p = sub.add_parser("plot-training", parents=[common], help="Plot training curves")
    p.add_argument("history", type=Path, help="CSV with epoch and accuracy/loss columns")
    p.set_defaults(func=cmd_plot_training)

    p = sub.add_parser("compare", parents=[common], help="Format a comparison with other approaches")
    p.add_argument("--metrics", type=Path, required=True, help="metrics.json of this ensemble")
    p.add_argument(
        "--baseline",
        action="append",
        default=[],
        metavar="NAME=ACC[:SCOPE]",
        help="Reported accuracy of another approach (fraction or percent)",
    )
    p.add_argument("--name", default="weighted ensemble")
    p.add_argument("--scope", default="FMD and LSD, 6 classes")
    p.set_defaults(func=cmd_compare)
    return parser


def load_models(args, manifest) -> list[PredictionSet]:
    given = dict(args.pred)
    missing = [m.value for m in BASE_MODELS if m not in given]
    if missing:
        raise PredictionError("missing --pred for %s" % ", ".join(missing))
    models = []
    for model in BASE_MODELS:
        pset = load_predictions(given[model], manifest, args.labels_split)
        if pset.model != model:
            raise PredictionError(
                "file holds %s predictions, given as %s" % (pset.model.value, model.value),
                given[model],
            )
        models.append(pset)
    return models


def _check_accounting(args, manifest, outputs: list[Path]) -> None:
    report = verify_split_accounting(manifest, load_expected_counts(args.expected_counts))
    write_json(report.to_json(), args.out / "accounting.json")
    outputs.append(args.out / "accounting.json")
    if not report.passed:
        raise CheckFailed(
            "split accounting differs from %s in %d cells" % (args.expected_counts, len(report.diffs)),
            outputs,
        )


def cmd_prep(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    outputs: list[Path] = []
    if args.check_table1:
        _check_accounting(args, manifest, outputs)
    spec = AugmentSpec()
    if args.augment_spec is not None:
        spec = AugmentSpec.model_validate_json(args.augment_spec.read_text())
    processed, report = run_prep_pipeline(
        manifest,
        spec,
        args.seed,
        args.out,
        image_root=args.image_root or args.manifest.parent,
        workers=args.workers,
    )
    processed.save_json(args.out / "manifest.json")
    write_json(report.model_dump(mode="json"), args.out / "prep-report.json")
    outputs += [args.out / "manifest.json", args.out / "prep-report.json"]
    outputs += [args.out / s.path for s in processed.samples]
    if report.failed:
        LOGGER.warning("%d images failed, see prep-report.json", len(report.failed))
        if args.strict:
            raise CheckFailed("%d images failed" % len(report.failed), outputs)
    return outputs


def cmd_dedup(args) -> list[Path]:
    manifest, removed = dedup_by_digest(load_manifest(args.manifest))
    manifest.save_json(args.out / "manifest.json")
    write_json({"removed": removed}, args.out / "dedup.json")
    outputs = [args.out / "manifest.json", args.out / "dedup.json"]
    if args.check_table1:
        _check_accounting(args, manifest, outputs)
    return outputs


def cmd_synth(args) -> list[Path]:
    spec = SyntheticSpec()
    if args.synthetic_spec is not None:
        spec = SyntheticSpec.model_validate_json(args.synthetic_spec.read_text())
    if args.replicate_confusion is not None:
        output = replicate_confusion(load_confusion_json(args.replicate_confusion), args.seed, spec)
    else:
        output = synthesize(spec, args.seed)
    return output.save(args.out)


def cmd_fuse(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    config = load_fusion_config(args.fusion_config)
    fused = fuse(load_models(args, manifest), config.weights)
    outfile = args.out / f"ensemble_{args.labels_split.value}.jsonl"
    save_predictions(fused, outfile)
    return [outfile]


def cmd_calibrate(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    labels = split_labels(manifest, args.labels_split)
    config = load_fusion_config(args.fusion_config)
    models = load_models(args, manifest)
    fused = fuse(models, config.weights)
    temperature = fit_temperature(fused, labels, method=args.fit_temperature, start=config.temperature)
    config = config.model_copy(update={"temperature": temperature})
    calibrated = run_fusion(models, config).calibrated
    LOGGER.info("NLL %.6f -> %.6f at T=%.2f", nll(fused, labels), nll(calibrated, labels), temperature)
    outputs = [args.out / "fusion.json", args.out / f"calibrated_{args.labels_split.value}.jsonl"]
    save_fusion_config(config, outputs[0])
    save_predictions(calibrated, outputs[1])
    return outputs


def cmd_gridsearch(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    labels = split_labels(manifest, args.labels_split)
    base = load_fusion_config(args.fusion_config)
    models = load_models(args, manifest)
    grid = enumerate_grid(args.grid_lo, args.grid_hi, args.grid_step)
    result = grid_search_weights(models, labels, grid)
    best = FusionConfig.from_fractions(result.best, base.temperature)
    outputs = [args.out / "fusion.json", args.out / "grid.csv"]
    save_fusion_config(best, outputs[0])
    write_grid_csv(result, outputs[1])
    if args.fit_weights:
        weights, fitted = fit_fusion_weights(models, labels)
        write_json(
            {"weights": list(weights), "nll": fitted.val_loss, "epoch": fitted.epoch},
            args.out / "fitted-weights.json",
        )
        outputs.append(args.out / "fitted-weights.json")
    return outputs


def cmd_evaluate(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    labels = split_labels(manifest, args.labels_split)
    models = load_models(args, manifest)
    fused = run_fusion(models, load_fusion_config(args.fusion_config))
    cm = confusion(labels, fused.by_id())
    try:
        curves = roc_curves(labels, fused.calibrated)
    except ValueError as err:
        LOGGER.warning("Skipping ROC: %s", err)
        curves = []
    auc = sum(c.auc for c in curves) / len(curves) if curves else None
    report = compute_metrics(cm, auc, nll(fused.calibrated, labels))
    LOGGER.info(
        "Accuracy %.4f (%d errors of %d), kappa %.4f",
        report.accuracy, cm.errors, cm.total, report.cohens_kappa,
    )
    out = args.out
    outputs = [out / n for n in ("metrics.json", "per_class.csv", "confusion.csv", "models.csv", "confusion.svg")]
    write_metrics_json(report, outputs[0])
    write_per_class_csv(report.per_class, outputs[1])
    write_confusion_csv(cm, outputs[2])
    summaries = [(m.model.value, model_summary(labels, m)) for m in models]
    summaries.append((ModelName.ENSEMBLE.value, model_summary(labels, fused.calibrated)))
    write_csv(
        outputs[3],
        ["model", "accuracy", "macro_precision", "macro_recall", "macro_f1"],
        ([name] + [fmt(v) for v in s.values()] for name, s in summaries),
    )
    plot_confusion(cm, outputs[4])
    if curves:
        plot_roc(curves, out / "roc.svg")
        outputs.append(out / "roc.svg")
        for curve in curves:
            path = out / f"roc_{curve.label.label}.csv"
            write_roc_csv(curve, path)
            outputs.append(path)
    return outputs


def cmd_ablate(args) -> list[Path]:
    manifest = load_manifest(args.manifest)
    labels = split_labels(manifest, args.labels_split)
    models = load_models(args, manifest)
    base = load_fusion_config(args.fusion_config)
    rows = []
    for cfg in ABLATIONS:
        config = apply_ablation(cfg, base)
        fused = run_fusion(models, config)
        report = compute_metrics(confusion(labels, fused.by_id()))
        try:
            auc = fmt(macro_auc(labels, fused.calibrated))
        except ValueError as err:
            LOGGER.warning("No AUC for %s: %s", cfg.name, err)
            auc = ""
        rows.append(
            [cfg.name]
            + ["%.6f" % w for w in config.weights]
            + ["%g" % config.temperature, fmt(report.accuracy), auc]
        )
    outfile = args.out / "ablation.csv"
    write_csv(outfile, ["configuration", "w1", "w2", "w3", "temperature", "accuracy", "macro_auc"], rows)
    return [outfile]


def cmd_plot_training(args) -> list[Path]:
    figures = plot_training(read_training_csv(args.history), args.out)
    return [args.out / name for name in figures]


def parse_baseline(value: str) -> tuple[str, float, str]:
    name, sep, rest = value.partition("=")
    if not sep:
        raise ValueError("expected NAME=ACC[:SCOPE], got %r" % value)
    acc, _, scope = rest.partition(":")
    accuracy = float(acc)
    if accuracy > 1.0:
        accuracy /= 100.0
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError("accuracy of %s out of range: %s" % (name, acc))
    return name.strip(), accuracy, scope.strip()


def cmd_compare(args) -> list[Path]:
    report = MetricsReport.model_validate_json(args.metrics.read_text())
    rows = [(args.name, report.accuracy, args.scope)]
    rows += [parse_baseline(b) for b in args.baseline]
    outfile = args.out / "comparison.csv"
    write_csv(outfile, ["approach", "accuracy", "scope"], ([n, fmt(a), s] for n, a, s in rows))
    return [outfile]


INPUT_OPTIONS = (
    "manifest",
    "fusion_config",
    "augment_spec",
    "synthetic_spec",
    "replicate_confusion",
    "expected_counts",
    "history",
    "metrics",
)


def write_run_manifest(args, outputs: Sequence[Path]) -> Path:
    """Record command, arguments, seed and input digests next to the outputs."""
    inputs = [getattr(args, name, None) for name in INPUT_OPTIONS]
    inputs += [path for _, path in getattr(args, "pred", [])]
    arguments = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "verbose"):
            continue
        if key == "pred":
            value = ["%s=%s" % (m.value, p) for m, p in value]
        elif isinstance(value, (Path, Split)):
            value = value.value if isinstance(value, Split) else str(value)
        arguments[key] = value
    manifest = RunManifest(
        command=args.command,
        version=__version__,
        seed=args.seed,
        arguments=arguments,
        inputs={str(p): sha256_file(p) for p in inputs if p is not None and Path(p).is_file()},
        outputs=sorted(str(p) for p in outputs),
    )
    outfile = args.out / "run-manifest.json"
    write_json(manifest.model_dump(mode="json"), outfile)
    return outfile


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry-point for the command-line interface."""
    parser = make_argparse()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    try:
        outputs = args.func(args)
    except CheckFailed as err:
        LOGGER.error("Check failed: %s", err)
        outputs = err.outputs
        status = EXIT_CHECK
    except (ManifestError, PredictionError, ImageError) as err:
        LOGGER.error("%s", err)
        return EXIT_INPUT
    except (ValueError, OSError, csv.Error, FloatingPointError) as err:
        LOGGER.error("%s: %s", type(err).__name__, err)
        return EXIT_INPUT
    write_run_manifest(args, outputs)
    return status
