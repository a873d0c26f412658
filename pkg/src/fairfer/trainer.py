"""Cross-validated training with early stopping on validation accuracy."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .labels import EXPRESSION_INDEX
from .manifest import DatasetManifest, ManifestError, split_by_fold
from .modelkit import (
    AgeNormalizer,
    BackboneConfig,
    LossSpec,
    build_model,
    canonical_variant,
    multitask_loss,
    save_checkpoint,
    weighted_cross_entropy,
)
from .preprocess import AugmentPolicy, apply_params, sample_params
from .weighting import compute_class_weights, compute_density_weights, compute_joint_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 20
    early_stop_patience: int = 5
    early_stop_min_delta: float = 0.01
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    folds: int = 5
    variant: str = "baseline"
    lam: float = 1.0
    fuse_dim: Optional[int] = None
    weighting: str = "auto"
    # restrict training to these fold indices; None runs all of them
    run_folds: Optional[Sequence[int]] = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    age_scale: float = 100.0
    density_bandwidth: Optional[float] = None

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.early_stop_patience < 1:
            raise ValueError("patience must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.max_epochs < 1 or self.batch_size < 1 or self.folds < 2:
            raise ValueError("max_epochs and batch_size must be positive and folds at least 2")
        if self.lam < 0:
            raise ValueError("loss mix must be non-negative")
        if self.weighting not in ("auto", "class_only", "joint_age"):
            raise ValueError(f"unknown weighting mode {self.weighting!r}")
        if self.weighting == "class_only" and self.variant == "age_weighted":
            raise ValueError("age_weighted variant needs joint_age weighting")

    @property
    def weight_mode(self) -> str:
        if self.weighting != "auto":
            return self.weighting
        # age weights are applied to every age-aware variant, not only age_weighted
        return "class_only" if self.variant == "baseline" else "joint_age"

    def to_dict(self):
        d = asdict(self)
        d["run_folds"] = None if self.run_folds is None else list(self.run_folds)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "backbone" in d:
            d["backbone"] = BackboneConfig(**d["backbone"])
        if "augment" in d:
            d["augment"] = AugmentPolicy.from_dict(d["augment"])
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class RunRecord:
    fold: int
    epochs: List[EpochLog]
    stop_reason: str
    best_epoch: int
    checkpoint: Optional[str]
    wall_time: float
    weight_table: dict
    train_ids: List[str] = field(repr=False, default_factory=list)
    val_ids: List[str] = field(repr=False, default_factory=list)

    @property
    def best_val_accuracy(self):
        return self.epochs[self.best_epoch].val_accuracy

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["epochs"] = [EpochLog(**e) for e in d["epochs"]]
        return cls(**d)


def should_stop(val_acc_history: Sequence[float], patience: int = 5, min_delta: float = 0.01) -> bool:
    """True once ``patience`` consecutive epochs fail to beat the reference accuracy by ``min_delta``.

    The reference is the accuracy of the last epoch that counted as an
    improvement; the first epoch always counts.
    """
    best = -np.inf
    stale = 0
    for acc in val_acc_history:
        if acc - best >= min_delta - 1e-12:
            best = acc
            stale = 0
        else:
            stale += 1
    return stale >= patience


class FaceBank:
    """Preprocessed face pixels for a set of sample ids, stacked in one array."""

    def __init__(self, ids: Sequence[str], pixels: np.ndarray, landmarks: Optional[Dict[str, np.ndarray]] = None):
        if len(ids) != len(pixels):
            raise ValueError("ids and pixels differ in length")
        self.ids = list(ids)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.pixels = pixels
        self.landmarks = landmarks or {}

    def take(self, sample_ids: Sequence[str]) -> np.ndarray:
        return self.pixels[[self.index[s] for s in sample_ids]]


@dataclass
class _Split:
    ids: List[str]
    targets: np.ndarray
    ages: np.ndarray
    weights: np.ndarray
    density: np.ndarray


def _encode(records, weight_table, density, normalizer) -> _Split:
    ids = [r.sample_id for r in records]
    targets = np.array([EXPRESSION_INDEX[r.expression] for r in records], dtype=np.int64)
    ages = np.array([np.nan if r.age_years is None else normalizer(r.age_years) for r in records])
    weights = weight_table.sample_weights(records) if weight_table is not None else np.ones(len(ids))
    return _Split(ids, targets, ages, weights, density if density is not None else np.ones(len(ids)))


def predict(model, pixels: np.ndarray, ages: Optional[np.ndarray] = None, batch_size: int = 128):
    """Logits (and normalized age predictions when the model has an age head) for a stack of faces."""
    model.eval()
    logits, age_preds = [], []
    with torch.no_grad():
        for lo in range(0, len(pixels), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(pixels[lo:lo + batch_size], dtype=np.float32))[:, None]
            a = None
            if model.needs_age_input:
                a = torch.from_numpy(np.asarray(ages[lo:lo + batch_size], dtype=np.float32))
            out, age_out = model(x, a)
            logits.append(out.numpy())
            if age_out is not None:
                age_preds.append(age_out.numpy())
    logits = np.concatenate(logits) if logits else np.zeros((0, 7), dtype=np.float32)
    return logits, (np.concatenate(age_preds) if age_preds else None)


def _augment_batch(pixels, seeds, policy):
    out = np.empty_like(pixels)
    for i, (img, seed) in enumerate(zip(pixels, seeds)):
        rng = np.random.default_rng(seed)
        out[i] = apply_params(img, sample_params(policy, rng, img.shape))
    return out


def _normalized_weights(w: np.ndarray) -> torch.Tensor:
    """Rescale per-sample weights to mean one within a batch.

    The batch mean of ``w * nll`` then equals ``sum(w * nll) / sum(w)``, the
    reduction of a class-weighted cross-entropy, so the weight table changes
    the relative emphasis of samples but not the overall step size.
    """
    total = float(w.sum())
    if total <= 0:
        return torch.zeros(len(w))
    return torch.from_numpy(w * (len(w) / total)).float()


def train_fold(
    fold: int,
    train: DatasetManifest,
    val: DatasetManifest,
    faces: FaceBank,
    config: TrainConfig,
    out_dir=None,
    on_batch: Optional[Callable[[int, int, List[str]], None]] = None,
) -> RunRecord:
    kind = config.variant
    normalizer = AgeNormalizer(config.age_scale)
    age_aware = config.weight_mode == "joint_age" or kind in ("multi_task", "multi_modal")
    if age_aware:
        train = train.select(lambda r: r.age_group is not None)
    if kind == "multi_modal":
        val = val.select(lambda r: r.age_years is not None)
    if not len(train) or not len(val):
        raise ManifestError(f"fold {fold}: empty training or validation split")

    table = compute_joint_weights(train) if config.weight_mode == "joint_age" else compute_class_weights(train)
    density = None
    if kind == "multi_task":
        density = compute_density_weights([r.age_years for r in train], config.density_bandwidth)
    loss_spec = LossSpec(table, density, config.lam if kind == "multi_task" else None, normalizer)
    tr = _encode(train.records, table, None if density is None else density.as_array(), normalizer)
    va = _encode(val.records, None, None, normalizer)
    val_pixels = faces.take(va.ids)

    torch.manual_seed(config.seed)
    model = build_model(kind, replace(config.backbone, seed=config.seed), fuse_dim=config.fuse_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    epochs: List[EpochLog] = []
    best_state, best_epoch, best_acc = None, 0, -1.0
    stop_reason = "max_epochs"
    t0 = time.perf_counter()
    n = len(tr.ids)
    for epoch in range(config.max_epochs):
        model.train()
        order = np.random.default_rng([config.seed, fold, epoch]).permutation(n)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            batch_ids = [tr.ids[i] for i in idx]
            if on_batch is not None:
                on_batch(fold, epoch, batch_ids)
            seeds = [[config.seed, fold, epoch, int(i)] for i in idx]
            pixels = _augment_batch(faces.take(batch_ids), seeds, config.augment)
            x = torch.from_numpy(pixels)[:, None]
            target = torch.from_numpy(tr.targets[idx])
            weight = _normalized_weights(tr.weights[idx])
            age = torch.from_numpy(tr.ages[idx]).float()
            logits, age_pred = model(x, age if kind == "multi_modal" else None)
            if kind == "multi_task":
                loss = multitask_loss(logits, target, weight, age_pred, age,
                                      torch.from_numpy(tr.density[idx]).float(), config.lam)
            else:
                loss = weighted_cross_entropy(logits, target, weight)
            loss = loss.mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)

        logits, _ = predict(model, val_pixels, va.ages)
        acc = float((logits.argmax(1) == va.targets).mean())
        epochs.append(EpochLog(epoch, total / seen, acc))
        log.info("fold %d epoch %d loss %.4f val_acc %.4f", fold, epoch, total / seen, acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if should_stop([e.val_accuracy for e in epochs], config.early_stop_patience, config.early_stop_min_delta):
            stop_reason = "early_stop"
            break

    model.load_state_dict(best_state)
    model.eval()
    checkpoint = None
    if out_dir is not None:
        checkpoint = str(save_checkpoint(
            Path(out_dir) / f"fold{fold}.pt", model, replace(config.backbone, seed=config.seed), loss_spec,
            extra={"fold": fold, "train_config": config.to_dict()},
        ))
    record = RunRecord(
        fold=fold,
        epochs=epochs,
        stop_reason=stop_reason,
        best_epoch=best_epoch,
        checkpoint=checkpoint,
        wall_time=time.perf_counter() - t0,
        weight_table=table.to_dict(),
        train_ids=tr.ids,
        val_ids=va.ids,
    )
    record.model = model
    if out_dir is not None:
        with open(Path(out_dir) / f"fold{fold}.json", "w") as fh:
            json.dump(record.to_dict(), fh, indent=1)
    return record


def train_cv(
    manifest: DatasetManifest,
    faces: FaceBank,
    config: TrainConfig,
    out_dir=None,
    on_batch=None,
) -> List[RunRecord]:
    """Train one model per fold: fit on the other folds, early-stop on this one.

    Weight tables (and density weights for ``multi_task``) are recomputed on
    each fold's training split. When ``out_dir`` is set, each fold writes its
    best-validation checkpoint and a JSON run log there.
    """
    pool = manifest.training_pool()
    folds = sorted({r.fold for r in pool})
    if None in folds:
        raise ManifestError("folds must be assigned before training")
    if len(folds) != config.folds:
        raise ManifestError(f"manifest has {len(folds)} folds, config expects {config.folds}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    run = folds if config.run_folds is None else [f for f in folds if f in set(config.run_folds)]
    records = []
    for f in run:
        train, val = split_by_fold(pool, f)
        records.append(train_fold(f, train, val, faces, config, out_dir, on_batch))
    return records
