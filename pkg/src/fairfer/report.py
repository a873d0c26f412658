"""Figures and the cross-variant comparison document.

Figures are written with the Agg backend and without timestamp metadata so a
report rebuilt from the same run directories is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .labels import AGE_GROUPS, EXPRESSIONS  # noqa: E402
from .metrics import GroupMetricsReport  # noqa: E402

PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _groups(reports: Mapping[str, GroupMetricsReport]) -> List[str]:
    present = set().union(*(r.groups for r in reports.values()))
    return [a for a in AGE_GROUPS if a in present]


def plot_f1_bars(reports: Mapping[str, GroupMetricsReport], path) -> Path:
    """Per-expression F1 bars, one panel per age group, one bar per variant."""
    groups = _groups(reports)
    names = list(reports)
    fig, axes = plt.subplots(1, len(groups), figsize=(5 * len(groups), 3.6), sharey=True, squeeze=False)
    width = 0.8 / max(1, len(names))
    x = np.arange(len(EXPRESSIONS))
    for ax, g in zip(axes[0], groups):
        for i, name in enumerate(names):
            gm = reports[name].groups.get(g)
            if gm is None:
                continue
            f1 = np.where(gm.support > 0, gm.f1, np.nan)
            err = None if gm.f1_std is None else np.where(gm.support > 0, gm.f1_std, 0)
            ax.bar(x + (i - (len(names) - 1) / 2) * width, f1, width, yerr=err, label=name, capsize=2)
        ax.set_title(g)
        ax.set_xticks(x, EXPRESSIONS, rotation=45, ha="right")
        ax.set_ylim(0, 1.05)
    axes[0][0].set_ylabel("F1")
    axes[0][-1].legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_confusions(report: GroupMetricsReport, path, title: str = "") -> Path:
    """Row-normalized confusion matrices side by side, in percent."""
    groups = [a for a in AGE_GROUPS if a in report.groups]
    fig, axes = plt.subplots(1, len(groups), figsize=(4.4 * len(groups), 4.2), squeeze=False)
    for ax, g in zip(axes[0], groups):
        m = report.groups[g].normalized * 100
        ax.imshow(m, cmap="Blues", vmin=0, vmax=100)
        for (i, j), v in np.ndenumerate(m):
            if v >= 0.5:
                ax.text(j, i, f"{v:.0f}", ha="center", va="center", fontsize=7,
                        color="white" if v > 50 else "black")
        ax.set_title(g)
        ax.set_xticks(range(len(EXPRESSIONS)), EXPRESSIONS, rotation=45, ha="right", fontsize=7)
        ax.set_yticks(range(len(EXPRESSIONS)), EXPRESSIONS, fontsize=7)
        ax.set_xlabel("predicted")
    axes[0][0].set_ylabel("true")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_heatmap_panel(maps: Mapping[Tuple[str, str], np.ndarray], path, title: str = "") -> Path:
    """Expression rows by age-group columns; cells without samples stay blank."""
    groups = [a for a in AGE_GROUPS if any(k[1] == a for k in maps)]
    exprs = [e for e in EXPRESSIONS if any(k[0] == e for k in maps)]
    fig, axes = plt.subplots(len(exprs), len(groups), figsize=(2.2 * len(groups), 2.2 * len(exprs)), squeeze=False)
    for i, e in enumerate(exprs):
        for j, g in enumerate(groups):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            grid = maps.get((e, g))
            if grid is not None:
                ax.imshow(getattr(grid, "grid", grid), cmap="viridis", vmin=0, vmax=1)
            if i == 0:
                ax.set_title(g, fontsize=9)
            if j == 0:
                ax.set_ylabel(e, fontsize=9)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def comparison_rows(reports: Mapping[str, GroupMetricsReport]) -> List[Dict]:
    """One row per (variant, group), plus an unweighted "Average" row per variant."""
    rows = []
    for name, r in reports.items():
        for g in _groups(reports):
            gm = r.groups.get(g)
            if gm is None:
                continue
            rows.append({
                "variant": name,
                "group": g,
                "macro_f1_excl_surprise": gm.macro_f1_excl_surprise,
                "macro_f1_excl_surprise_std": gm.macro_f1_excl_surprise_std,
                "macro_f1": gm.macro_f1,
                "zero_support": gm.zero_support,
            })
        rows.append({
            "variant": name,
            "group": "average",
            "macro_f1_excl_surprise": r.average_macro(True),
            "macro_f1_excl_surprise_std": None,
            "macro_f1": r.average_macro(False),
            "zero_support": [],
        })
    return rows


def render_markdown(reports: Mapping[str, GroupMetricsReport], figures: Mapping[str, str]) -> str:
    lines = ["# Age-group comparison", ""]
    lines.append("Macro-F1 is averaged over classes with test support, excluding \"surprise\". "
                 "The average row is the unweighted mean of the group scores. Spread is the population "
                 "standard deviation over fold models.")
    lines.append("")
    groups = _groups(reports) + ["average"]
    lines.append("| variant | " + " | ".join(groups) + " |")
    lines.append("|---" * (len(groups) + 1) + "|")
    by_key = {(r["variant"], r["group"]): r for r in comparison_rows(reports)}
    for name in reports:
        cells = []
        for g in groups:
            row = by_key.get((name, g))
            if row is None:
                cells.append("")
            elif row["macro_f1_excl_surprise_std"] is None:
                cells.append(f"{row['macro_f1_excl_surprise']:.4f}")
            else:
                cells.append(f"{row['macro_f1_excl_surprise']:.4f} ± {row['macro_f1_excl_surprise_std']:.4f}")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("## Per-expression F1")
    lines.append("")
    for g in _groups(reports):
        lines.append(f"### {g}")
        lines.append("")
        lines.append("| variant | " + " | ".join(EXPRESSIONS) + " |")
        lines.append("|---" * (len(EXPRESSIONS) + 1) + "|")
        for name, r in reports.items():
            gm = r.groups.get(g)
            if gm is None:
                continue
            cells = ["n/a" if n == 0 else f"{v:.3f}" for v, n in zip(gm.f1, gm.support)]
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        lines.append("")
    if figures:
        lines.append("## Figures")
        lines.append("")
        for label, rel in figures.items():
            lines.append(f"![{label}]({rel})")
        lines.append("")
    return "\n".join(lines)


def write_comparison(reports: Mapping[str, GroupMetricsReport], out_dir,
                     heatmaps: Optional[Mapping[str, Mapping[Tuple[str, str], np.ndarray]]] = None) -> Dict[str, Path]:
    """Write the comparison document, its JSON twin and every figure it references."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"f1_bars": plot_f1_bars(reports, out / "f1_bars.png")}
    for name, r in reports.items():
        written[f"confusion_{name}"] = plot_confusions(r, out / f"confusion_{name}.png", title=name)
    for name, maps in (heatmaps or {}).items():
        written[f"heatmaps_{name}"] = plot_heatmap_panel(maps, out / f"heatmaps_{name}.png", title=name)
    figures = {k: p.name for k, p in written.items()}
    doc = out / "report.md"
    doc.write_text(render_markdown(reports, figures) + "\n")
    table = out / "comparison.json"
    table.write_text(json.dumps({"rows": comparison_rows(reports), "variants": list(reports)}, indent=2) + "\n")
    written.update(report=doc, comparison=table)
    return written
