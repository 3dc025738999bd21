"""Matplotlib figure rendering for evaluation and explanation reports.

Figures are written next to the delimited outputs: the eval report draws a
grouped bar chart of mean ROC-AUC with sample-sd error bars from the
aggregate rows, and the explain report draws the cohort-mean importance
profiles over the patch axis for each GOLD cohort.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError

METHOD_ORDER = ("ratio", "mlp_demographic", "mlp_summary", "transformer", "fused")


def render_auc_figure(rows: list, path) -> None:
    """Bar chart of mean ROC-AUC per method, one group per endpoint.

    rows are aggregate rows (endpoint, method, metric, mean, sd); only
    roc_auc rows are drawn, brier rows are ignored.
    """
    auc_rows = [r for r in rows if r.metric == "roc_auc"]
    if not auc_rows:
        raise DataError("no roc_auc rows to draw")
    endpoints = sorted({r.endpoint for r in auc_rows})
    methods = [m for m in METHOD_ORDER
               if any(r.method == m for r in auc_rows)]
    methods += sorted({r.method for r in auc_rows} - set(methods))
    by_key = {(r.endpoint, r.method): r for r in auc_rows}

    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(endpoints), 4.0))
    width = 0.8 / len(methods)
    xs = np.arange(len(endpoints))
    for j, method in enumerate(methods):
        means = [by_key[(e, method)].mean if (e, method) in by_key else np.nan
                 for e in endpoints]
        sds = [by_key[(e, method)].sd if (e, method) in by_key else 0.0
               for e in endpoints]
        ax.bar(xs + (j - (len(methods) - 1) / 2) * width, means, width,
               yerr=sds, capsize=3, label=method)
    ax.set_xticks(xs)
    ax.set_xticklabels(endpoints)
    ax.set_ylabel("ROC-AUC (mean over seeds, sd bars)")
    ax.set_ylim(0.0, 1.05)
    ax.axhline(0.5, color="grey", linewidth=0.8, linestyle=":")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_profile_figure(profiles: dict, path) -> None:
    """Cohort-mean patch-importance curves, one line per cohort tag."""
    if not profiles:
        raise DataError("no profiles to draw")
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    for tag, profile in sorted(profiles.items()):
        imp = profile.importance
        ax.plot(np.arange(imp.size), imp, marker="o", markersize=3, label=tag)
        ax.axvline(profile.most_important_patch, linewidth=0.8, linestyle="--",
                   color="grey")
    ax.set_xlabel("patch index (volume order)")
    ax.set_ylabel("mean CLS attention importance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
