"""Orchestration shared by the command line: face loading, run directories,
evaluation and explanation over a set of fold checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .labels import AGE_GROUPS, EXPRESSION_INDEX
from .manifest import DatasetManifest, ManifestError, ingest_manifest, read_image, resolve_root
from .metrics import GroupMetricsReport, aggregate_folds, confusion_by_group
from .modelkit import AgeNormalizer, CheckpointError, load_checkpoint
from .preprocess import DetectorAdapters, load_cached, pipeline_hash, preprocess, store_cached
from .synth import load_landmarks
from .trainer import FaceBank, predict
from .xai import AggregatedHeatmap, explain, mean_template

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
CACHE_ENV = "FAIRFER_CACHE"
RUN_CONFIG = "config.json"
ARTIFACT_INDEX = "artifacts.json"


class MissingArtifact(FileNotFoundError):
    pass


class VersionMismatch(RuntimeError):
    pass


class _FixedLandmarks:
    def __init__(self, points):
        self.points = points

    def __call__(self, image):
        return self.points


def preprocess_version() -> str:
    return pipeline_hash(low_pct=0.0, high_pct=100.0)


def load_faces(manifest: DatasetManifest, root, cache_dir=None) -> FaceBank:
    """Read and preprocess every record's image.

    Landmarks come from a ``landmarks.json`` sidecar next to the images when
    present (the synthetic generator writes one); otherwise the canonical
    template is assumed. Results are cached under ``cache_dir`` (or the
    ``FAIRFER_CACHE`` directory) keyed by the absolute image path.
    """
    cache_dir = cache_dir or os.environ.get(CACHE_ENV) or None
    sidecar = load_landmarks(root)
    version = preprocess_version()
    ids, pixels, landmarks = [], [], {}
    for r in manifest:
        key = str((Path(root) / r.image_ref).resolve())
        face = load_cached(cache_dir, key, version) if cache_dir else None
        if face is None:
            adapters = DetectorAdapters()
            if r.sample_id in sidecar:
                adapters = DetectorAdapters(landmark_detector=_FixedLandmarks(sidecar[r.sample_id]))
            face = preprocess(read_image(r.image_ref, root), adapters)
            if cache_dir:
                store_cached(cache_dir, key, version, face)
        ids.append(r.sample_id)
        pixels.append(face.pixels)
        landmarks[r.sample_id] = face.landmarks
    stack = np.stack(pixels) if pixels else np.zeros((0, 224, 224), dtype=np.float32)
    return FaceBank(ids, stack, landmarks)


def merge_banks(banks: Sequence[FaceBank]) -> FaceBank:
    ids, pixels, landmarks = [], [], {}
    for b in banks:
        ids += b.ids
        pixels.append(b.pixels)
        landmarks.update(b.landmarks)
    return FaceBank(ids, np.concatenate(pixels) if pixels else np.zeros((0, 224, 224), np.float32), landmarks)


# --- run directories ------------------------------------------------------------


@dataclass
class RunDir:
    path: Path
    config: dict = field(default_factory=dict)

    @classmethod
    def create(cls, path, config: dict) -> "RunDir":
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        config = dict(config, artifact_version=ARTIFACT_VERSION, preprocess_version=preprocess_version())
        _write_json(path / RUN_CONFIG, config)
        return cls(path, config)

    @classmethod
    def open(cls, path) -> "RunDir":
        path = Path(path)
        cfg_path = path / RUN_CONFIG
        if not cfg_path.exists():
            raise MissingArtifact(f"{path}: no {RUN_CONFIG}; not a run directory")
        config = json.loads(cfg_path.read_text())
        if config.get("artifact_version") != ARTIFACT_VERSION:
            raise VersionMismatch(
                f"{path}: artifact version {config.get('artifact_version')!r}, this build reads {ARTIFACT_VERSION}")
        if config.get("preprocess_version") != preprocess_version():
            raise VersionMismatch(f"{path}: preprocessing pipeline changed since this run was trained")
        return cls(path, config)

    def checkpoints(self) -> List[Path]:
        found = sorted(self.path.glob("fold*.pt"), key=lambda p: int(p.stem[4:]))
        if not found:
            raise MissingArtifact(f"{self.path}: no fold checkpoints")
        return found

    def load_models(self):
        models = []
        for p in self.checkpoints():
            try:
                models.append(load_checkpoint(p))
            except CheckpointError as exc:
                raise VersionMismatch(str(exc)) from exc
        return models

    def register(self, kind: str, *paths) -> None:
        """Record produced files in the run's artifact index, with content hashes."""
        index_path = self.path / ARTIFACT_INDEX
        index = json.loads(index_path.read_text()) if index_path.exists() else {}
        for p in paths:
            p = Path(p)
            rel = str(p.relative_to(self.path)) if p.is_relative_to(self.path) else str(p)
            index[rel] = {"kind": kind, "sha256": _sha256(p)}
        _write_json(index_path, dict(sorted(index.items())))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# --- test sets ----------------------------------------------------------------


@dataclass
class TestSet:
    group: str
    path: Path
    manifest: DatasetManifest
    faces: FaceBank


def parse_test_spec(spec: str) -> Tuple[str, Path]:
    if "=" not in spec:
        raise ValueError(f"expected group=path, got {spec!r}")
    group, path = spec.split("=", 1)
    return group.strip(), Path(path)


def load_test_sets(specs: Sequence[str], cache_dir=None) -> List[TestSet]:
    out = []
    for spec in specs:
        group, path = parse_test_spec(spec)
        if group not in AGE_GROUPS:
            raise ManifestError(f"unknown age group {group!r} in --test-manifest")
        manifest = ingest_manifest(path)
        out.append(TestSet(group, path, manifest, load_faces(manifest, resolve_root(path), cache_dir)))
    return out


def _model_ages(model, records, normalizer: AgeNormalizer):
    if not model.needs_age_input:
        return None
    missing = [r.sample_id for r in records if r.age_years is None]
    if missing:
        raise ManifestError(f"multi_modal evaluation needs ages; {len(missing)} records lack one (e.g. {missing[0]})")
    return np.array([normalizer(r.age_years) for r in records])


def evaluate_models(models, test_sets: Sequence[TestSet]) -> Dict:
    """Per-fold reports over all test sets, their fold aggregate, and per-manifest aggregates.

    Group attribution comes from the test set, not from per-record ages.
    """
    fold_reports, per_manifest = [], {str(t.path): [] for t in test_sets}
    for model, blob in models:
        normalizer = AgeNormalizer(**(blob.get("loss_spec") or {}).get("age_normalizer", {}))
        merged = []
        for t in test_sets:
            logits, _ = predict(model, t.faces.pixels, _model_ages(model, list(t.manifest), normalizer))
            preds = [(EXPRESSION_INDEX[r.expression], int(p), t.group) for r, p in zip(t.manifest, logits.argmax(1))]
            merged += preds
            per_manifest[str(t.path)].append(confusion_by_group(preds))
        fold_reports.append(confusion_by_group(merged))
    return {
        "folds": fold_reports,
        "aggregate": aggregate_folds(fold_reports),
        "per_manifest": {k: aggregate_folds(v) for k, v in per_manifest.items()},
    }


def explain_models(models, test_sets: Sequence[TestSet], batch_size: int = 32,
                   method: str = "minmax") -> Tuple[Dict[Tuple[str, str], AggregatedHeatmap], np.ndarray]:
    """Aggregated heatmaps per (expression, group) over all fold models.

    The canonical template is the mean landmark layout of the evaluation faces.
    """
    records, groups, pixels, landmarks = [], [], [], []
    for t in test_sets:
        for r in t.manifest:
            records.append(r)
            groups.append(t.group)
            landmarks.append(t.faces.landmarks[r.sample_id])
        pixels.append(t.faces.pixels)
    pixels = np.concatenate(pixels)
    template = mean_template(landmarks)
    bare = [m for m, _ in models]
    # all folds of a run share one variant
    normalizer = AgeNormalizer(**(models[0][1].get("loss_spec") or {}).get("age_normalizer", {}))
    ages = _model_ages(bare[0], records, normalizer)
    maps = explain(bare, pixels, records, landmarks, template, groups=groups, ages=ages, batch_size=batch_size,
                   method=method)
    return maps, template


def save_heatmaps(maps: Mapping[Tuple[str, str], AggregatedHeatmap], template: np.ndarray, path) -> Path:
    arrays = {"template": np.asarray(template)}
    meta = {}
    for (e, g), h in sorted(maps.items()):
        arrays[f"{e}__{g}"] = h.grid
        arrays[f"{e}__{g}__raw"] = h.raw_mean
        meta[f"{e}__{g}"] = {"n_samples": h.n_samples, "n_skipped": h.n_skipped, "n_folds": h.n_folds,
                             "template_id": h.template_id}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **arrays)
    _write_json(path.with_suffix(".json"), meta)
    return path


def load_heatmaps(path) -> Dict[Tuple[str, str], np.ndarray]:
    with np.load(path) as data:
        return {tuple(k.split("__")): data[k] for k in data.files if k.count("__") == 1}


def write_report_json(report: GroupMetricsReport, path) -> Path:
    return _write_json(path, report.to_dict())


def read_report_json(path) -> GroupMetricsReport:
    return GroupMetricsReport.from_dict(json.loads(Path(path).read_text()))
