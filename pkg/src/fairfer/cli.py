"""Command line: synth, ingest, annotate, train, evaluate, explain, report.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 invalid input
data (e.g. an empty test manifest), 4 missing artifact (e.g. no checkpoints),
5 config or artifact version mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline, report, synth
from .manifest import (
    ConstantAgeEstimator,
    ManifestError,
    annotate_ages,
    assign_folds,
    ingest_manifest,
    read_image,
    resolve_root,
    write_manifest,
)
from .modelkit import VARIANTS
from .preprocess import AugmentPolicy, PreprocessError
from .trainer import TrainConfig, train_cv

log = logging.getLogger("fairfer")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MISSING = 4
EXIT_VERSION = 5


class UsageError(ValueError):
    pass


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.balanced:
        spec = synth.SynthSpec(
            counts=synth.uniform_counts({"children": 60, "adults": 60, "elderly": 60}),
            test_counts=synth.uniform_counts({"children": 30, "adults": 30, "elderly": 30}),
            seed=args.seed,
            name=f"balanced-s{args.seed}",
        )
    else:
        spec = synth.bias_benchmark(seed=args.seed, blend=args.blend, ratio=args.ratio)
    if args.scale != 1.0:
        spec.counts = {k: max(1, round(v * args.scale)) for k, v in spec.counts.items()}
        spec.test_counts = {k: max(1, round(v * args.scale)) for k, v in spec.test_counts.items()}
    manifest, _ = synth.generate(spec, args.out)
    log.info("wrote %d images to %s", len(manifest), args.out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    schema = dict(_pair(s, "--column") for s in args.column)
    manifest = ingest_manifest(args.source, schema=schema or None)
    write_manifest(manifest, args.out)
    log.info("kept %d records, dropped %s", len(manifest), manifest.dropped or "none")
    return EXIT_OK


def cmd_annotate(args) -> int:
    manifest = ingest_manifest(args.manifest)
    root = resolve_root(args.manifest)
    out = annotate_ages(manifest, ConstantAgeEstimator(args.constant_age),
                        load_image=lambda ref: read_image(ref, root), workers=args.workers)
    write_manifest(out, args.out)
    if out.flagged:
        log.warning("%d records could not be annotated: %s", len(out.flagged), ", ".join(out.flagged[:5]))
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    config = TrainConfig.from_dict(base) if base else TrainConfig()
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "folds": args.folds,
        "max_epochs": args.max_epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "lam": args.lam,
        "run_folds": args.run_folds,
    }
    config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    if args.no_augment:
        config = replace(config, augment=AugmentPolicy.identity())
    if args.backbone_width:
        config = replace(config, backbone=replace(config.backbone, base_width=args.backbone_width))
    return config


def cmd_train(args) -> int:
    config = _train_config(args)
    manifest = ingest_manifest(args.manifest)
    if any(r.fold is None for r in manifest.training_pool()):
        manifest = assign_folds(manifest, k=config.folds, seed=config.seed)
    run = pipeline.RunDir.create(args.out, {
        "command": "train",
        "manifest": str(Path(args.manifest).resolve()),
        "train_config": config.to_dict(),
    })
    snapshot = write_manifest(manifest, run.path / "train_manifest.tsv")
    t0 = time.perf_counter()
    faces = pipeline.load_faces(manifest.training_pool(), resolve_root(args.manifest), args.cache_dir)
    log.info("preprocessed %d faces in %.1fs", len(faces.ids), time.perf_counter() - t0)
    records = train_cv(manifest, faces, config, out_dir=run.path)
    for rec in records:
        log.info("fold %d: %s after %d epochs, best val acc %.4f", rec.fold, rec.stop_reason, len(rec.epochs),
                 rec.best_val_accuracy)
    run.register("manifest", snapshot)
    run.register("config", run.path / pipeline.RUN_CONFIG)
    run.register("checkpoint", *[r.checkpoint for r in records])
    run.register("run_record", *[run.path / f"fold{r.fold}.json" for r in records])
    return EXIT_OK


def _out_dir(args, run, sub):
    return Path(args.out) if args.out else run.path / sub


def cmd_evaluate(args) -> int:
    run = pipeline.RunDir.open(args.run)
    models = run.load_models()
    test_sets = pipeline.load_test_sets(args.test_manifest, args.cache_dir)
    result = pipeline.evaluate_models(models, test_sets)
    out = _out_dir(args, run, "eval")
    written = [pipeline.write_report_json(result["aggregate"], out / "metrics.json")]
    for i, fold_report in enumerate(result["folds"]):
        written.append(pipeline.write_report_json(fold_report, out / "folds" / f"fold{i}.json"))
    for j, (path, rep) in enumerate(sorted(result["per_manifest"].items())):
        written.append(pipeline.write_report_json(rep, out / "per_manifest" / f"{j}_{Path(path).stem}.json"))
    written.append(report.plot_confusions(result["aggregate"], out / "confusion.png",
                                          title=run.config["train_config"]["variant"]))
    (out / "inputs.json").write_text(json.dumps({"test_manifests": list(args.test_manifest)}, indent=2) + "\n")
    run.register("evaluation", *written)
    agg = result["aggregate"]
    for g, gm in agg.groups.items():
        log.info("%s: macro-F1 %.4f (excl. surprise) over %d folds", g, gm.macro_f1_excl_surprise, agg.n_folds)
    return EXIT_OK


def cmd_explain(args) -> int:
    run = pipeline.RunDir.open(args.run)
    models = run.load_models()
    test_sets = pipeline.load_test_sets(args.test_manifest, args.cache_dir)
    maps, template = pipeline.explain_models(models, test_sets, batch_size=args.batch_size, method=args.standardize)
    out = _out_dir(args, run, "explain")
    arrays = pipeline.save_heatmaps(maps, template, out / "heatmaps.npz")
    panel = report.plot_heatmap_panel({k: v.grid for k, v in maps.items()}, out / "heatmaps.png",
                                      title=run.config["train_config"]["variant"])
    run.register("heatmaps", arrays, arrays.with_suffix(".json"), panel)
    skipped = sum(h.n_skipped for h in maps.values())
    log.info("aggregated %d heatmaps; %d constant saliency maps skipped", len(maps), skipped)
    return EXIT_OK


def cmd_report(args) -> int:
    reports, heatmaps = {}, {}
    for spec in args.run:
        name, path = _pair(spec, "--run") if "=" in spec else (None, spec)
        run = pipeline.RunDir.open(path)
        name = name or run.config["train_config"]["variant"]
        if name in reports:
            raise UsageError(f"duplicate report name {name!r}; use name=path")
        metrics = run.path / "eval" / "metrics.json"
        if not metrics.exists():
            raise pipeline.MissingArtifact(f"{path}: no eval/metrics.json; run evaluate first")
        reports[name] = pipeline.read_report_json(metrics)
        maps = run.path / "explain" / "heatmaps.npz"
        if maps.exists():
            heatmaps[name] = pipeline.load_heatmaps(maps)
    written = report.write_comparison(reports, args.out, heatmaps)
    log.info("report written to %s", written["report"])
    return EXIT_OK


def _pair(text, flag):
    if "=" not in text:
        raise UsageError(f"{flag} expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairfer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--blend", type=float, default=0.6, help="confounder blend for elderly neutral faces")
    s.add_argument("--ratio", type=int, default=10, help="adult to elderly count ratio")
    s.add_argument("--balanced", action="store_true", help="no confounding, equal counts")
    s.add_argument("--scale", type=float, default=1.0, help="multiply every cell count")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="normalize a labeled manifest")
    s.add_argument("--source", required=True)
    s.add_argument("--column", action="append", default=[], metavar="FIELD=COLUMN")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("annotate", help="fill missing ages")
    s.add_argument("--manifest", required=True)
    s.add_argument("--constant-age", type=float, required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("train", help="cross-validated training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--variant", required=True, choices=list(VARIANTS) + [v.replace("_", "-") for v in VARIANTS])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON file of training settings")
    s.add_argument("--folds", type=int)
    s.add_argument("--run-folds", type=int, nargs="+")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lam", type=float)
    s.add_argument("--backbone-width", type=int)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--cache-dir", help=f"preprocessing cache (default: ${pipeline.CACHE_ENV})")
    s.set_defaults(func=cmd_train)

    for name, func, help_text in (("evaluate", cmd_evaluate, "per-group metrics"),
                                  ("explain", cmd_explain, "aggregated saliency heatmaps")):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--run", "--checkpoint-dir", dest="run", required=True)
        s.add_argument("--test-manifest", action="append", required=True, metavar="GROUP=PATH")
        s.add_argument("--out")
        s.add_argument("--cache-dir")
        if name == "explain":
            s.add_argument("--batch-size", type=int, default=32)
            s.add_argument("--standardize", choices=["minmax", "zscore"], default="minmax")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="compare evaluated runs")
    s.add_argument("--run", action="append", required=True, metavar="[NAME=]RUN_DIR")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except pipeline.VersionMismatch as exc:
        log.error("version mismatch: %s", exc)
        return EXIT_VERSION
    except (pipeline.MissingArtifact, FileNotFoundError) as exc:
        log.error("missing artifact: %s", exc)
        return EXIT_MISSING
    except (ManifestError, PreprocessError, ValueError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
