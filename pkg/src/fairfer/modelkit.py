"""Model assembly for the four training variants, plus their losses.

All variants share a backbone producing a D-dimensional feature vector.

* ``baseline`` / ``age_weighted``: one linear expression head. The two differ
  only in the weight table handed to the loss.
* ``multi_task``: an extra linear age-regression head parallel to the
  expression head.
* ``multi_modal``: features are projected down to D' dimensions, the
  normalized age is appended, and a final linear layer predicts expressions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .labels import EXPRESSIONS
from .weighting import DensityWeights, WeightTable

NUM_CLASSES = len(EXPRESSIONS)
VARIANTS = ("baseline", "age_weighted", "multi_task", "multi_modal")
CHECKPOINT_FORMAT = 1


def canonical_variant(name: str) -> str:
    kind = name.replace("-", "_")
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return kind


@dataclass(frozen=True)
class AgeNormalizer:
    """Affine map between years and model units: units = (years - offset) / scale."""

    scale: float = 100.0
    offset: float = 0.0

    def __post_init__(self):
        if self.scale == 0:
            raise ValueError("age normalizer scale must be non-zero")

    def __call__(self, years):
        return (years - self.offset) / self.scale

    def inverse(self, units):
        return units * self.scale + self.offset


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 3
    base_width: int = 16
    stem_kernel: int = 7
    stem_stride: int = 4
    groups: int = 4
    seed: int = 0

    @property
    def widths(self):
        return tuple(self.base_width * 2 ** i for i in range(self.depth))

    def validate(self):
        if self.depth < 1:
            raise ValueError("backbone depth must be at least 1")
        if self.base_width < 1 or self.stem_stride < 1 or self.stem_kernel < 1:
            raise ValueError("backbone widths, kernel and stride must be positive")
        if any(w % self.groups for w in self.widths):
            raise ValueError("channel widths must be divisible by the normalization group count")


class ReferenceBackbone(nn.Module):
    """Small strided CNN: a wide-stride stem, ``depth`` stages, global max pooling.

    SiLU activations and GroupNorm keep the map smooth and independent across
    samples in a batch, which keeps per-image input gradients well defined.
    Max pooling lets one small local pattern drive a channel; with average
    pooling the net failed to pick up localized expression cues from scratch.
    """

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths
        layers = [
            nn.Conv2d(1, widths[0], config.stem_kernel, stride=config.stem_stride, padding=config.stem_kernel // 2),
            nn.GroupNorm(config.groups, widths[0]),
            nn.SiLU(),
        ]
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GroupNorm(config.groups, cout), nn.SiLU()]
        self.features = nn.Sequential(*layers)
        self.out_dim = widths[-1]

    def forward(self, x):
        return self.features(x).amax(dim=(2, 3))


def make_reference_backbone(config: BackboneConfig = BackboneConfig()) -> ReferenceBackbone:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return ReferenceBackbone(config)


class FERModel(nn.Module):
    def __init__(self, kind: str, backbone: nn.Module, fuse_dim: Optional[int] = None, head_seed: int = 0):
        super().__init__()
        self.kind = canonical_variant(kind)
        self.backbone = backbone
        dim = backbone.out_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(head_seed)
            if self.kind == "multi_modal":
                self.fuse_dim = fuse_dim or max(1, dim // 4)
                self.downsample = nn.Linear(dim, self.fuse_dim)
                self.expression_head = nn.Linear(self.fuse_dim + 1, NUM_CLASSES)
            else:
                self.fuse_dim = None
                self.expression_head = nn.Linear(dim, NUM_CLASSES)
            self.age_head = nn.Linear(dim, 1) if self.kind == "multi_task" else None

    @property
    def needs_age_input(self) -> bool:
        return self.kind == "multi_modal"

    def forward(self, x, age=None) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        if self.needs_age_input and age is None:
            raise ValueError("multi_modal model requires an age input")
        if not self.needs_age_input and age is not None:
            raise ValueError(f"{self.kind} model does not take an age input")
        features = self.backbone(x)
        if self.kind == "multi_modal":
            age = torch.as_tensor(age, dtype=features.dtype).reshape(-1, 1).expand(features.shape[0], 1)
            fused = torch.cat([self.downsample(features), age], dim=1)
            return self.expression_head(fused), None
        logits = self.expression_head(features)
        if self.age_head is not None:
            return logits, self.age_head(features).squeeze(1)
        return logits, None


def build_model(kind: str, backbone_config: BackboneConfig = BackboneConfig(), fuse_dim: Optional[int] = None) -> FERModel:
    backbone = make_reference_backbone(backbone_config)
    return FERModel(kind, backbone, fuse_dim=fuse_dim, head_seed=backbone_config.seed + 1)


def forward(model: FERModel, image, age_input: Optional[float] = None, normalizer: AgeNormalizer = AgeNormalizer()):
    """Run a single preprocessed face through ``model``; ages are given in years."""
    pixels = image.pixels if hasattr(image, "pixels") else image
    x = torch.as_tensor(np.asarray(pixels, dtype=np.float32))[None, None]
    age = None if age_input is None else torch.tensor([normalizer(float(age_input))], dtype=torch.float32)
    with torch.no_grad():
        logits, age_pred = model(x, age)
    pred = None if age_pred is None else float(normalizer.inverse(age_pred.item()))
    return logits[0].numpy(), pred


# --- losses -------------------------------------------------------------------


def _check_finite(logits):
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")


def weighted_cross_entropy(logits, target, weight):
    """Per-sample ``weight * -log softmax(logits)[target]``.

    Accepts a single 7-vector or a batch; returns a tensor of matching batch shape.
    """
    logits = torch.as_tensor(logits)
    _check_finite(logits)
    squeeze = logits.dim() == 1
    if squeeze:
        logits = logits[None]
    target = torch.as_tensor(target).reshape(-1)
    weight = torch.as_tensor(weight, dtype=logits.dtype).reshape(-1)
    nll = -F.log_softmax(logits, dim=1).gather(1, target[:, None]).squeeze(1)
    loss = weight * nll
    return loss[0] if squeeze else loss


def multitask_loss(logits, target, expr_weight, age_pred, age_true, density_weight, lam):
    """Weighted cross-entropy plus ``lam * density_weight * (age_pred - age_true) ** 2``.

    Ages are expected in normalized units.
    """
    if lam < 0:
        raise ValueError("loss mix must be non-negative")
    ce = weighted_cross_entropy(logits, target, expr_weight)
    age_pred = torch.as_tensor(age_pred, dtype=ce.dtype)
    age_true = torch.as_tensor(age_true, dtype=ce.dtype)
    density_weight = torch.as_tensor(density_weight, dtype=ce.dtype)
    return ce + lam * density_weight * (age_pred - age_true) ** 2


@dataclass
class LossSpec:
    expression_weights: WeightTable
    density_weights: Optional[DensityWeights] = None
    lam: Optional[float] = None
    age_normalizer: AgeNormalizer = AgeNormalizer()

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("loss mix must be non-negative")

    def to_dict(self):
        return {
            "expression_weights": self.expression_weights.to_dict(),
            "density_bandwidth": None if self.density_weights is None else self.density_weights.bandwidth,
            "lam": self.lam,
            "age_normalizer": asdict(self.age_normalizer),
        }


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(path, model: FERModel, backbone_config: BackboneConfig, loss_spec: Optional[LossSpec] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "kind": model.kind,
            "backbone_config": asdict(backbone_config),
            "fuse_dim": model.fuse_dim,
            "state_dict": model.state_dict(),
            "loss_spec": None if loss_spec is None else loss_spec.to_dict(),
            "extra": extra or {},
        },
        path,
    )
    return path


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path):
    """Returns ``(model, metadata)``; the model is in eval mode."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: checkpoint format {blob.get('format')!r}, expected {CHECKPOINT_FORMAT}")
    config = BackboneConfig(**blob["backbone_config"])
    model = build_model(blob["kind"], config, fuse_dim=blob["fuse_dim"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
