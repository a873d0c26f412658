"""Aggregated saliency heatmaps.

Per-image gradient saliency is warped into a canonical landmark frame with a
least-squares similarity transform, min-max standardized, and averaged per
(expression, age group): first over the samples explained by each fold
model, then over folds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .labels import EXPRESSION_INDEX, EXPRESSIONS
from .preprocess import CANONICAL_LANDMARKS, IMAGE_SIZE, LEFT_EYE, MOUTH_LEFT, MOUTH_RIGHT, RIGHT_EYE

ALIGNMENT_POINTS = (LEFT_EYE, RIGHT_EYE, MOUTH_LEFT, MOUTH_RIGHT)


class DegenerateLandmarks(ValueError):
    pass


@dataclass
class SaliencyMap:
    grid: np.ndarray
    sample_id: Optional[str]
    predicted: str
    target: str


@dataclass
class CanonicalGrid:
    grid: np.ndarray
    mask: np.ndarray


@dataclass
class AggregatedHeatmap:
    grid: np.ndarray
    raw_mean: np.ndarray
    expression: str
    age_group: str
    n_samples: int
    n_skipped: int = 0
    n_folds: int = 1
    template_id: str = ""


def _logits(model, x, ages):
    kwargs = {}
    if getattr(model, "needs_age_input", False):
        if ages is None:
            raise ValueError("this model needs an age input for saliency")
        kwargs["age"] = torch.as_tensor(np.asarray(ages), dtype=x.dtype)
    out = model(x, **kwargs) if kwargs else model(x)
    return out[0] if isinstance(out, tuple) else out


def saliency_batch(model, pixels: np.ndarray, targets: Sequence[int], ages=None):
    """|d logit_target / d pixel| for a stack of single-channel images.

    Samples do not interact inside the model (no batch statistics in eval
    mode), so the gradient of the summed target logits yields every
    per-sample gradient in one backward pass. Returns (saliency, logits).
    """
    model.eval()
    dtype = next(model.parameters()).dtype if any(True for _ in model.parameters()) else torch.float32
    x = torch.as_tensor(np.asarray(pixels), dtype=dtype)
    if x.dim() != 3:
        raise ValueError(f"expected a (N, H, W) stack, got shape {tuple(x.shape)}")
    x = x[:, None].clone().requires_grad_(True)
    logits = _logits(model, x, ages)
    if logits.shape[0] != x.shape[0]:
        raise ValueError("model output does not match the batch size")
    idx = torch.as_tensor(np.asarray(targets, dtype=np.int64))
    picked = logits.gather(1, idx[:, None]).sum()
    if not picked.requires_grad:
        return np.zeros(tuple(x.shape[:1]) + tuple(x.shape[2:])), logits.detach().numpy()
    (grad,) = torch.autograd.grad(picked, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    return grad.abs()[:, 0].detach().numpy(), logits.detach().numpy()


def saliency(model, image, target, age_input: Optional[float] = None, sample_id=None) -> SaliencyMap:
    """Gradient saliency of one preprocessed face for the ``target`` expression.

    ``age_input`` is the already normalized age for models that take one.
    """
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    t = EXPRESSION_INDEX[target] if isinstance(target, str) else int(target)
    ages = None if age_input is None else [age_input]
    grid, logits = saliency_batch(model, pixels[None], [t], ages)
    return SaliencyMap(grid[0], sample_id, EXPRESSIONS[int(np.argmax(logits[0]))], EXPRESSIONS[t])


def estimate_similarity(src: np.ndarray, dst: np.ndarray):
    """Least-squares (scale, rotation, translation) with dst ~ scale * R @ src + t (Umeyama)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    for name, pts in (("image", src), ("template", dst)):
        if np.linalg.norm(pts[0] - pts[1]) < 1e-6:
            raise DegenerateLandmarks(f"{name} eye landmarks coincide")
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[0] < 1e-9 or sv[1] < 1e-6 * sv[0]:
            raise DegenerateLandmarks(f"{name} landmarks are collinear or coincident")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    cov = cd.T @ cs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.diag([1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    rot = u @ sign @ vt
    var_s = (cs ** 2).sum() / len(src)
    scale = float(np.trace(np.diag(d) @ sign) / var_s)
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def warp_to_template(grid: np.ndarray, scale, rot, t, out_shape) -> CanonicalGrid:
    # output (x, y) -> source (x, y): R^T (q - t) / s, rewritten in (row, col) order
    a_inv = rot.T / scale
    b_inv = -a_inv @ t
    perm = np.array([[0, 1], [1, 0]])
    matrix = perm @ a_inv @ perm
    offset = perm @ b_inv
    grid = np.asarray(grid, dtype=np.float64)
    if np.allclose(matrix, np.eye(2), atol=1e-12) and np.allclose(offset, 0, atol=1e-12) and grid.shape == tuple(out_shape):
        return CanonicalGrid(grid.copy(), np.ones(grid.shape, dtype=bool))
    warped = ndimage.affine_transform(grid, matrix, offset, output_shape=out_shape, order=1, mode="constant", cval=0.0)
    ones = ndimage.affine_transform(np.ones_like(grid), matrix, offset, output_shape=out_shape, order=1,
                                    mode="constant", cval=0.0)
    mask = ones > 1.0 - 1e-9
    warped[~mask] = 0.0
    return CanonicalGrid(warped, mask)


def to_common_space(
    saliency_map,
    landmarks: np.ndarray,
    template: np.ndarray = CANONICAL_LANDMARKS,
    out_shape: Tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE),
) -> CanonicalGrid:
    """Warp a per-image map so its eye and mouth-corner landmarks land on ``template``."""
    grid = saliency_map.grid if hasattr(saliency_map, "grid") else saliency_map
    landmarks = np.asarray(landmarks, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    if landmarks.shape[0] < 5 or template.shape[0] < 5:
        raise DegenerateLandmarks("need eye centers and mouth corners")
    pts = list(ALIGNMENT_POINTS)
    scale, rot, t = estimate_similarity(landmarks[pts], template[pts])
    return warp_to_template(grid, scale, rot, t, out_shape)


def mean_template(landmark_sets: Iterable[np.ndarray]) -> np.ndarray:
    sets = [np.asarray(l, dtype=np.float64) for l in landmark_sets]
    if not sets:
        raise ValueError("no landmarks to average")
    return np.mean(sets, axis=0)


def template_id(template: np.ndarray) -> str:
    return hashlib.sha1(np.round(np.asarray(template, dtype=np.float64), 4).tobytes()).hexdigest()[:10]


def standardize(grid: np.ndarray, method: str = "minmax") -> Optional[np.ndarray]:
    """Per-grid standardization; None for constant grids, which carry no spatial information."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if not hi > lo:
        return None
    if method == "minmax":
        return (g - lo) / (hi - lo)
    if method == "zscore":
        return (g - g.mean()) / g.std()
    raise ValueError(f"unknown standardization {method!r}")


def display_normalize(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    return (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)


class HeatmapAccumulator:
    """Streaming per-(expression, group, fold) sums of standardized grids."""

    def __init__(self, method: str = "minmax"):
        self.method = method
        self.sums: Dict[tuple, np.ndarray] = {}
        self.counts: Dict[tuple, int] = {}
        self.skipped: Dict[tuple, int] = {}

    def add(self, grid, expression: str, age_group: str, fold=0):
        key = (expression, age_group, fold)
        std = standardize(grid, self.method)
        if std is None:
            self.skipped[key] = self.skipped.get(key, 0) + 1
            return
        if key in self.sums:
            self.sums[key] += std
        else:
            self.sums[key] = std.copy()
        self.counts[key] = self.counts.get(key, 0) + 1

    def cells(self):
        return sorted({k[:2] for k in list(self.sums) + list(self.skipped)})

    def result(self, expression: str, age_group: str, template: str = "") -> AggregatedHeatmap:
        folds = sorted((k for k in self.sums if k[:2] == (expression, age_group)), key=lambda k: str(k[2]))
        skipped = sum(v for k, v in self.skipped.items() if k[:2] == (expression, age_group))
        if not folds:
            raise ValueError(f"no informative maps for ({expression}, {age_group})")
        per_fold = [self.sums[k] / self.counts[k] for k in folds]
        raw = np.mean(per_fold, axis=0)
        return AggregatedHeatmap(
            grid=display_normalize(raw),
            raw_mean=raw,
            expression=expression,
            age_group=age_group,
            n_samples=sum(self.counts[k] for k in folds),
            n_skipped=skipped,
            n_folds=len(folds),
            template_id=template,
        )


def aggregate_heatmaps(
    maps: Sequence,
    expression: str,
    age_group: str,
    folds: Optional[Sequence] = None,
    method: str = "minmax",
    template: str = "",
) -> AggregatedHeatmap:
    """Standardize each canonical grid, average within folds, then across folds.

    ``folds`` labels which fold model produced each map; without it all maps
    are treated as one fold. Constant grids are skipped and counted.
    """
    if len(maps) == 0:
        raise ValueError("no maps to aggregate")
    if folds is not None and len(folds) != len(maps):
        raise ValueError("folds must label every map")
    shapes = {np.shape(getattr(m, "grid", m)) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"maps differ in shape: {sorted(shapes)}")
    acc = HeatmapAccumulator(method)
    for i, m in enumerate(maps):
        acc.add(getattr(m, "grid", m), expression, age_group, 0 if folds is None else folds[i])
    return acc.result(expression, age_group, template)


def explain(
    models: Sequence,
    pixels: np.ndarray,
    records: Sequence,
    landmarks: Sequence[np.ndarray],
    template: np.ndarray,
    groups: Optional[Sequence[str]] = None,
    ages: Optional[np.ndarray] = None,
    batch_size: int = 32,
    method: str = "minmax",
) -> Dict[Tuple[str, str], AggregatedHeatmap]:
    """Run the whole explanation pipeline for a set of fold models.

    Saliency targets the true expression of each record. ``groups`` overrides
    the age group attribution of each record (e.g. from its test manifest).
    """
    groups = list(groups) if groups is not None else [r.age_group for r in records]
    targets = [EXPRESSION_INDEX[r.expression] for r in records]
    acc = HeatmapAccumulator(method)
    tid = template_id(template)
    for fold, model in enumerate(models):
        for lo in range(0, len(records), batch_size):
            sl = slice(lo, lo + batch_size)
            grids, _ = saliency_batch(model, pixels[sl], targets[sl], None if ages is None else ages[sl])
            for j, grid in enumerate(grids):
                i = lo + j
                canon = to_common_space(grid, landmarks[i], template)
                acc.add(canon.grid, records[i].expression, groups[i], fold)
    return {cell: acc.result(*cell, template=tid) for cell in acc.cells() if any(
        k[:2] == cell for k in acc.sums)}
