"""Dataset manifests: ingestion, age annotation and cross-validation folds."""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .labels import AGE_SOURCES, EXPRESSIONS, SPLITS, age_group_of, canonical_expression

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("sample_id", "image_ref", "expression", "age_years", "age_source", "fold", "split")
REQUIRED_FIELDS = ("sample_id", "image_ref", "expression")


class ManifestError(ValueError):
    """Raised when a manifest cannot be read or violates its invariants."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_ref: str
    expression: str
    age_years: Optional[float] = None
    age_source: Optional[str] = None
    fold: Optional[int] = None
    split: str = "train"

    def __post_init__(self):
        if self.expression not in EXPRESSIONS:
            raise ManifestError(f"{self.sample_id}: unknown expression {self.expression!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"{self.sample_id}: unknown split {self.split!r}")
        if self.age_years is not None:
            if not math.isfinite(self.age_years) or self.age_years < 0:
                raise ManifestError(f"{self.sample_id}: invalid age {self.age_years!r}")
            if self.age_source is None:
                object.__setattr__(self, "age_source", "ground_truth")
        if self.age_source is not None and self.age_source not in AGE_SOURCES:
            raise ManifestError(f"{self.sample_id}: unknown age source {self.age_source!r}")

    @property
    def age_group(self) -> Optional[str]:
        return None if self.age_years is None else age_group_of(self.age_years)


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[SampleRecord, ...]
    name: str = "manifest"
    dropped: Mapping[str, int] = field(default_factory=dict)
    # sample_ids whose age could not be estimated; excluded from age-aware training
    flagged: Tuple[str, ...] = ()
    class_counts: Dict[str, int] = field(init=False, compare=False)
    group_counts: Dict[Tuple[str, str], int] = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
            seen.add(r.sample_id)
        object.__setattr__(self, "class_counts", dict(Counter(r.expression for r in self.records)))
        object.__setattr__(
            self,
            "group_counts",
            dict(Counter((r.expression, r.age_group) for r in self.records if r.age_group is not None)),
        )

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def drop_count(self) -> int:
        return sum(self.dropped.values())

    def replace_records(self, records: Iterable[SampleRecord], **kwargs) -> "DatasetManifest":
        return replace(self, records=tuple(records), **kwargs)

    def select(self, predicate: Callable[[SampleRecord], bool]) -> "DatasetManifest":
        return self.replace_records(r for r in self.records if predicate(r))

    def training_pool(self) -> "DatasetManifest":
        return self.select(lambda r: r.split != "test")

    def by_id(self) -> Dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}


def _parse_age(raw):
    if raw is None or str(raw).strip() == "":
        return None
    age = float(raw)
    if not math.isfinite(age) or age < 0:
        raise ValueError(raw)
    return age


def ingest_manifest(
    source,
    schema: Optional[Mapping[str, str]] = None,
    name: Optional[str] = None,
) -> DatasetManifest:
    """Read a tab-separated manifest whose header line names the columns.

    ``schema`` maps canonical field names (see ``MANIFEST_FIELDS``) to the
    column names used in the file, for sources that do not follow our naming.
    Rows with labels outside the seven expressions (e.g. "contempt"), missing
    image references or unparsable ages are dropped and tallied by reason.
    """
    path = Path(source)
    columns = {f: f for f in MANIFEST_FIELDS}
    columns.update(schema or {})
    try:
        handle = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    dropped: Counter = Counter()
    records = []
    with handle:
        reader = csv.DictReader(handle, delimiter="\t")
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file")
        missing = [f for f in REQUIRED_FIELDS if columns[f] not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: header lacks required columns {missing}")
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                dropped["malformed"] += 1
                continue
            get = lambda f: row.get(columns[f])  # noqa: E731
            expression = canonical_expression(get("expression"))
            if expression is None:
                dropped["unknown_label"] += 1
                continue
            image_ref = (get("image_ref") or "").strip()
            if not image_ref:
                dropped["missing_image"] += 1
                continue
            try:
                age = _parse_age(get("age_years"))
            except ValueError:
                dropped["bad_age"] += 1
                continue
            fold = get("fold")
            records.append(
                SampleRecord(
                    sample_id=get("sample_id").strip(),
                    image_ref=image_ref,
                    expression=expression,
                    age_years=age,
                    age_source=(get("age_source") or None) if age is not None else None,
                    fold=int(fold) if fold not in (None, "") else None,
                    split=(get("split") or "train").strip(),
                )
            )
    if not records:
        raise ManifestError(f"{path}: no valid records ({dict(dropped)} dropped)")
    if dropped:
        log.info("%s: dropped %s", path, dict(dropped))
    return DatasetManifest(records, name=name or path.stem, dropped=dict(dropped))


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            writer.writerow([_fmt(getattr(r, f)) for f in MANIFEST_FIELDS])
    return path


class ConstantAgeEstimator:
    """Stub estimator that reports the same age for every image."""

    def __init__(self, age: float = 25.0):
        self.age = float(age)

    def __call__(self, image) -> float:
        return self.age


def read_image(image_ref, root=None) -> np.ndarray:
    import cv2

    path = Path(image_ref)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(path)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return img


def annotate_ages(
    manifest: DatasetManifest,
    estimator: Callable[[np.ndarray], float],
    load_image: Callable[[str], np.ndarray] = read_image,
    workers: int = 1,
) -> DatasetManifest:
    """Fill in missing ages with ``estimator``; records that already carry an age are left alone.

    Records the estimator fails on keep no age and are listed in ``flagged``.
    """
    todo = [r for r in manifest.records if r.age_years is None]

    def estimate(record):
        try:
            age = float(estimator(load_image(record.image_ref)))
        except Exception as exc:  # adapter failures must not abort the whole pass
            log.warning("age estimation failed for %s: %s", record.sample_id, exc)
            return None
        if not math.isfinite(age) or age < 0:
            log.warning("age estimator returned %r for %s", age, record.sample_id)
            return None
        return age

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            ages = list(pool.map(estimate, todo))
    else:
        ages = [estimate(r) for r in todo]
    estimated = {r.sample_id: a for r, a in zip(todo, ages)}

    records = []
    flagged = list(manifest.flagged)
    for r in manifest.records:
        if r.sample_id in estimated:
            age = estimated[r.sample_id]
            if age is None:
                if r.sample_id not in flagged:
                    flagged.append(r.sample_id)
            else:
                r = replace(r, age_years=age, age_source="estimated")
        records.append(r)
    return manifest.replace_records(records, flagged=tuple(flagged))


def _deal(strata: Mapping, k: int, rng: np.random.Generator) -> Dict[str, int]:
    folds = {}
    position = 0
    for key in sorted(strata, key=str):
        ids = sorted(strata[key])
        for i in rng.permutation(len(ids)):
            folds[ids[i]] = position % k
            position += 1
    return folds


def assign_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> DatasetManifest:
    """Assign every non-test record to one of ``k`` folds, stratified by (expression, age group).

    Within each stratum records are shuffled and dealt round-robin, continuing
    the count across strata, so every fold receives floor or ceil of its
    proportional share of each cell and fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    pool = [r for r in manifest.records if r.split != "test"]
    if not pool:
        raise ManifestError("no training-pool records to fold")

    strata: Dict[tuple, list] = {}
    for r in pool:
        strata.setdefault((r.expression, r.age_group or "unknown"), []).append(r.sample_id)
    if min(len(v) for v in strata.values()) < k:
        log.warning("smallest (expression, age group) stratum has fewer than %d records; "
                    "stratifying by expression only", k)
        strata = {}
        for r in pool:
            strata.setdefault(r.expression, []).append(r.sample_id)

    folds = _deal(strata, k, np.random.default_rng(seed))
    records = [replace(r, fold=folds[r.sample_id]) if r.sample_id in folds else r for r in manifest.records]
    return manifest.replace_records(records)


def split_by_fold(manifest: DatasetManifest, fold: int) -> Tuple[DatasetManifest, DatasetManifest]:
    """Training and validation manifests for one cross-validation iteration."""
    pool = manifest.training_pool()
    if any(r.fold is None for r in pool):
        raise ManifestError("folds must be assigned before splitting")
    train = pool.select(lambda r: r.fold != fold)
    val = pool.select(lambda r: r.fold == fold)
    if not len(train) or not len(val):
        raise ManifestError(f"fold {fold} leaves an empty training or validation split")
    return train, val


def resolve_root(manifest_path) -> str:
    """Image references in a manifest are resolved relative to the manifest's directory."""
    return os.path.dirname(os.path.abspath(manifest_path))

