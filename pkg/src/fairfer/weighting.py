"""Per-sample loss weights.

Two tables are supported. ``class_only`` balances the seven expressions;
``joint_age`` balances every (expression, age group) cell so that each cell
contributes as much total weight as the rarest one. Age regression targets
get inverse-density weights from a Gaussian kernel density estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .labels import AGE_GROUPS, EXPRESSIONS

Cell = Tuple[str, str]


@dataclass(frozen=True)
class WeightTable:
    mode: str
    weights: Mapping[Cell, float]
    n_min: int
    counts: Mapping[Cell, int]

    def weight_for(self, expression: str, age_group: Optional[str]) -> float:
        if self.mode == "class_only":
            # the per-class weight is replicated across groups; any group gives it
            return self.weights[(expression, AGE_GROUPS[0])]
        if age_group is None:
            raise KeyError(f"joint_age weights need an age group for {expression!r}")
        return self.weights[(expression, age_group)]

    def sample_weights(self, records) -> np.ndarray:
        return np.array([self.weight_for(r.expression, r.age_group) for r in records], dtype=np.float64)

    def rows(self):
        for s in EXPRESSIONS:
            for a in AGE_GROUPS:
                yield s, a, self.counts.get((s, a), 0), self.weights[(s, a)]

    def to_dict(self):
        return {
            "mode": self.mode,
            "n_min": self.n_min,
            "rows": [list(r) for r in self.rows()],
        }

    @classmethod
    def from_dict(cls, data):
        weights, counts = {}, {}
        for s, a, n, w in data["rows"]:
            weights[(s, a)] = float(w)
            if n:
                counts[(s, a)] = int(n)
        return cls(data["mode"], weights, int(data["n_min"]), counts)


def _cell_counts(records) -> Dict[Cell, int]:
    counts: Dict[Cell, int] = {}
    for r in records:
        key = (r.expression, r.age_group)
        counts[key] = counts.get(key, 0) + 1
    return counts


def _records(manifest_or_records):
    return getattr(manifest_or_records, "records", manifest_or_records)


def compute_class_weights(manifest) -> WeightTable:
    """Weight each expression by (smallest class count) / (class count)."""
    records = _records(manifest)
    class_counts = {s: 0 for s in EXPRESSIONS}
    for r in records:
        class_counts[r.expression] += 1
    empty = [s for s, n in class_counts.items() if n == 0]
    if empty:
        raise ValueError(f"expression classes without training samples: {', '.join(empty)}")
    n_min = min(class_counts.values())
    weights = {(s, a): n_min / class_counts[s] for s in EXPRESSIONS for a in AGE_GROUPS}
    counts = {k: v for k, v in _cell_counts(records).items() if k[1] is not None}
    return WeightTable("class_only", weights, n_min, counts)


def weights_from_counts(counts: Mapping[Cell, int]) -> WeightTable:
    nonempty = {k: int(v) for k, v in counts.items() if v > 0}
    if not nonempty:
        raise ValueError("every (expression, age group) cell is empty")
    n_min = min(nonempty.values())
    weights = {(s, a): 0.0 for s in EXPRESSIONS for a in AGE_GROUPS}
    for cell, n in nonempty.items():
        weights[cell] = n_min / n
    return WeightTable("joint_age", weights, n_min, nonempty)


def compute_joint_weights(manifest) -> WeightTable:
    """Weights w[s, a] = N_min / N[s, a] over expression x age-group cells.

    Cells with no samples get weight 0 and do not take part in the minimum.
    Records without an age group are ignored.
    """
    counts = {k: v for k, v in _cell_counts(_records(manifest)).items() if k[1] is not None}
    return weights_from_counts(counts)


def write_weight_table(table: WeightTable, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# mode={table.mode} n_min={table.n_min}\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["expression", "age_group", "count", "weight"])
        for s, a, n, w in table.rows():
            writer.writerow([s, a, n, repr(float(w))])
    return path


def read_weight_table(path) -> WeightTable:
    with open(path, encoding="utf-8", newline="") as fh:
        meta = dict(tok.split("=", 1) for tok in fh.readline().lstrip("# ").split())
        reader = csv.DictReader(fh, delimiter="\t")
        rows = [(r["expression"], r["age_group"], int(r["count"]), float(r["weight"])) for r in reader]
    return WeightTable.from_dict({"mode": meta["mode"], "n_min": meta["n_min"], "rows": rows})


@dataclass(frozen=True)
class DensityWeights:
    ages: Tuple[float, ...]
    weights: Tuple[float, ...]
    bandwidth: float
    normalization: str = "mean_one"

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def silverman_bandwidth(ages: Sequence[float]) -> float:
    x = np.asarray(ages, dtype=np.float64)
    n = x.size
    if n < 2:
        return 1.0
    std = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    if spread <= 0:
        return 1.0
    return 0.9 * spread * n ** (-0.2)


def gaussian_kde_at(points: np.ndarray, samples: np.ndarray, bandwidth: float, chunk: int = 4096) -> np.ndarray:
    """Gaussian KDE built on ``samples`` and evaluated at ``points``."""
    norm = 1.0 / (samples.size * bandwidth * math.sqrt(2 * math.pi))
    out = np.empty(points.size, dtype=np.float64)
    for lo in range(0, points.size, chunk):
        z = (points[lo:lo + chunk, None] - samples[None, :]) / bandwidth
        out[lo:lo + chunk] = np.exp(-0.5 * z * z).sum(axis=1) * norm
    return out


def compute_density_weights(ages: Iterable[float], bandwidth: Optional[float] = None) -> DensityWeights:
    """Inverse-density weights for regression targets, rescaled to mean one.

    The density at each age comes from a Gaussian KDE over all ages
    (Silverman's rule when ``bandwidth`` is None) and is floored at 1e-6 of
    its peak before inversion.
    """
    x = np.asarray(list(ages), dtype=np.float64)
    if x.size == 0:
        raise ValueError("no ages given")
    if not np.all(np.isfinite(x)):
        raise ValueError("ages must be finite")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    density = gaussian_kde_at(x, x, h)
    density = np.maximum(density, 1e-6 * density.max())
    raw = 1.0 / density
    if np.all(raw == raw[0]):
        w = np.ones_like(raw)
    else:
        w = raw * (x.size / raw.sum())
    return DensityWeights(tuple(x.tolist()), tuple(w.tolist()), h)


def density_weight_lookup(dw: DensityWeights) -> Dict[float, float]:
    return dict(zip(dw.ages, dw.weights))
