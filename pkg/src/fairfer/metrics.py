"""Per-age-group evaluation: confusion matrices, per-class F1 and macro averages.

Macro-F1 is the unweighted mean over classes with non-zero support. Reports
carry two variants: over all supported classes, and additionally excluding
"surprise" (the convention used when one group has no surprise samples).
Fold aggregation uses the population standard deviation (ddof=0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .labels import AGE_GROUPS, EXPRESSION_INDEX, EXPRESSIONS

K = len(EXPRESSIONS)
SURPRISE = EXPRESSION_INDEX["surprise"]


class F1(NamedTuple):
    value: float
    degenerate: bool


def f1_score(tp: int, fp: int, fn: int) -> F1:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    denom = 2 * tp + fp + fn
    if denom == 0:
        return F1(0.0, True)
    return F1(2 * tp / denom, False)


def normalize_rows(confusion: np.ndarray) -> np.ndarray:
    confusion = np.asarray(confusion, dtype=np.float64)
    sums = confusion.sum(axis=1, keepdims=True)
    out = np.zeros_like(confusion)
    np.divide(confusion, sums, out=out, where=sums > 0)
    return out


def _macro(f1: np.ndarray, support: np.ndarray, exclude: Sequence[int] = ()) -> float:
    mask = support > 0
    mask[list(exclude)] = False
    return float(f1[mask].mean()) if mask.any() else 0.0


@dataclass
class GroupMetrics:
    confusion: np.ndarray
    normalized: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    macro_f1_excl_surprise: float
    # populated only for fold aggregates
    normalized_std: Optional[np.ndarray] = None
    f1_std: Optional[np.ndarray] = None
    macro_f1_std: float = 0.0
    macro_f1_excl_surprise_std: float = 0.0

    @property
    def zero_support(self) -> List[str]:
        return [EXPRESSIONS[i] for i in np.flatnonzero(self.support == 0)]

    @classmethod
    def from_confusion(cls, confusion) -> "GroupMetrics":
        confusion = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(confusion)
        fp = confusion.sum(axis=0) - tp
        fn = confusion.sum(axis=1) - tp
        f1 = np.array([f1_score(*c).value for c in zip(tp, fp, fn)])
        support = confusion.sum(axis=1)
        return cls(
            confusion=confusion,
            normalized=normalize_rows(confusion),
            f1=f1,
            support=support,
            macro_f1=_macro(f1, support),
            macro_f1_excl_surprise=_macro(f1, support, exclude=[SURPRISE]),
        )

    def to_dict(self):
        d = {
            "confusion": self.confusion.tolist(),
            "normalized": self.normalized.tolist(),
            "f1": dict(zip(EXPRESSIONS, self.f1.tolist())),
            "support": dict(zip(EXPRESSIONS, self.support.tolist())),
            "zero_support": self.zero_support,
            "macro_f1": self.macro_f1,
            "macro_f1_excl_surprise": self.macro_f1_excl_surprise,
        }
        if self.f1_std is not None:
            d.update(
                normalized_std=self.normalized_std.tolist(),
                f1_std=dict(zip(EXPRESSIONS, self.f1_std.tolist())),
                macro_f1_std=self.macro_f1_std,
                macro_f1_excl_surprise_std=self.macro_f1_excl_surprise_std,
            )
        return d

    @classmethod
    def from_dict(cls, d):
        g = cls(
            confusion=np.asarray(d["confusion"]),
            normalized=np.asarray(d["normalized"]),
            f1=np.array([d["f1"][e] for e in EXPRESSIONS]),
            support=np.array([d["support"][e] for e in EXPRESSIONS]),
            macro_f1=d["macro_f1"],
            macro_f1_excl_surprise=d["macro_f1_excl_surprise"],
        )
        if "f1_std" in d:
            g.normalized_std = np.asarray(d["normalized_std"])
            g.f1_std = np.array([d["f1_std"][e] for e in EXPRESSIONS])
            g.macro_f1_std = d["macro_f1_std"]
            g.macro_f1_excl_surprise_std = d["macro_f1_excl_surprise_std"]
        return g


@dataclass
class GroupMetricsReport:
    groups: Dict[str, GroupMetrics]
    n_folds: int = 1

    def macro(self, group: str, exclude_surprise: bool = True) -> float:
        g = self.groups[group]
        return g.macro_f1_excl_surprise if exclude_surprise else g.macro_f1

    def average_macro(self, exclude_surprise: bool = True) -> float:
        """Unweighted mean of the per-group macro-F1 scores."""
        return float(np.mean([self.macro(a, exclude_surprise) for a in self.groups]))

    def to_dict(self):
        return {
            "n_folds": self.n_folds,
            "expressions": list(EXPRESSIONS),
            "groups": {a: g.to_dict() for a, g in self.groups.items()},
            "average_macro_f1_excl_surprise": self.average_macro(True),
            "average_macro_f1": self.average_macro(False),
        }

    @classmethod
    def from_dict(cls, d):
        return cls({a: GroupMetrics.from_dict(g) for a, g in d["groups"].items()}, d.get("n_folds", 1))


def _index(label):
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < K:
            raise ValueError(f"class index {label} out of range")
        return int(label)
    if label not in EXPRESSION_INDEX:
        raise ValueError(f"unknown expression {label!r}")
    return EXPRESSION_INDEX[label]


def confusion_by_group(predictions: Iterable[Tuple[object, object, str]]) -> GroupMetricsReport:
    """Build one 7x7 confusion matrix per age group from (true, predicted, group) triples.

    Rows are true classes, columns predicted classes, both in ``EXPRESSIONS`` order.
    """
    matrices: Dict[str, np.ndarray] = {}
    n = 0
    for true, pred, group in predictions:
        if group not in AGE_GROUPS:
            raise ValueError(f"unknown age group {group!r}")
        m = matrices.setdefault(group, np.zeros((K, K), dtype=np.int64))
        m[_index(true), _index(pred)] += 1
        n += 1
    if n == 0:
        raise ValueError("no predictions to evaluate")
    groups = {a: GroupMetrics.from_confusion(matrices[a]) for a in AGE_GROUPS if a in matrices}
    return GroupMetricsReport(groups)


def aggregate_folds(reports: Sequence[GroupMetricsReport]) -> GroupMetricsReport:
    """Element-wise mean and population std over folds.

    Confusion counts are summed; F1 values, normalized matrices and macro
    scores are averaged.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    names = list(reports[0].groups)
    for r in reports[1:]:
        if list(r.groups) != names:
            raise ValueError("reports cover different age groups")
    groups = {}
    for a in names:
        members = [r.groups[a] for r in reports]
        support = [m.support for m in members]
        if any(not np.array_equal(s > 0, support[0] > 0) for s in support):
            raise ValueError(f"group {a!r}: folds disagree on which classes have support")
        stack = lambda attr: np.stack([getattr(m, attr) for m in members])  # noqa: E731
        macros = np.array([m.macro_f1 for m in members])
        macros_ex = np.array([m.macro_f1_excl_surprise for m in members])
        groups[a] = GroupMetrics(
            confusion=stack("confusion").sum(axis=0),
            normalized=stack("normalized").mean(axis=0),
            f1=stack("f1").mean(axis=0),
            support=stack("support").sum(axis=0),
            macro_f1=float(macros.mean()),
            macro_f1_excl_surprise=float(macros_ex.mean()),
            normalized_std=stack("normalized").std(axis=0),
            f1_std=stack("f1").std(axis=0),
            macro_f1_std=float(macros.std()),
            macro_f1_excl_surprise_std=float(macros_ex.std()),
        )
    return GroupMetricsReport(groups, n_folds=sum(r.n_folds for r in reports))
