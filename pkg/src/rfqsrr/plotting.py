"""Per-method R^2 box plots written as SVG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _by_method(records):
    order, groups = [], {}
    for r in records:
        if r.error:
            continue
        if r.method not in groups:
            order.append(r.method)
            groups[r.method] = []
        groups[r.method].append(r)
    return order, groups


def r2_boxplot(records, path, reference=None, deterministic=False, title=None):
    """Test and OOB R^2 side by side for each method.

    The dashed line is the mean in-protocol OLS baseline; ``reference`` adds
    a dotted line for an externally reported baseline value. The mean selected
    size of each method is printed under its box pair.
    """
    order, groups = _by_method(records)
    if not order:
        raise ValueError("no successful records to plot")
    pos = np.arange(len(order), dtype=float)
    test = [[r.test_r2 for r in groups[m]] for m in order]
    oob = [[r.oob_r2 for r in groups[m]] for m in order]

    fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(order) + 2), 4.5))
    width = 0.32
    b1 = ax.boxplot(test, positions=pos - 0.18, widths=width, patch_artist=True,
                    manage_ticks=False)
    b2 = ax.boxplot(oob, positions=pos + 0.18, widths=width, patch_artist=True,
                    manage_ticks=False)
    for box in b1["boxes"]:
        box.set_facecolor("#9ecae1")
    for box in b2["boxes"]:
        box.set_facecolor("#fdd0a2")

    handles = [b1["boxes"][0], b2["boxes"][0]]
    labels = ["test R²", "OOB R²"]
    base = [r.baseline_r2 for m in order for r in groups[m] if np.isfinite(r.baseline_r2)]
    if base:
        handles.append(ax.axhline(float(np.mean(base)), color="k", ls="--", lw=1))
        labels.append("OLS baseline (same features)")
    if reference is not None:
        handles.append(ax.axhline(reference, color="0.4", ls=":", lw=1))
        labels.append("reference baseline")

    ax.set_xticks(pos)
    ax.set_xticklabels(order, rotation=45, ha="right")
    ax.set_xlim(-0.6, len(order) - 0.4)
    ax.set_ylabel("fraction of variance explained")
    # average selected size in a strip under the axis
    for x, m in zip(pos, order):
        size = np.mean([r.n_selected for r in groups[m]])
        ax.annotate(f"{size:.1f}", (x, 0), xycoords=("data", "axes fraction"),
                    xytext=(0, 3), textcoords="offset points", ha="center", va="bottom",
                    fontsize=7, color="0.3")
    if title:
        ax.set_title(title)
    ax.legend(handles, labels, fontsize=8, loc="best")
    fig.tight_layout()

    if deterministic:
        with plt.rc_context({"svg.hashsalt": "rfqsrr"}):
            fig.savefig(path, format="svg", metadata={"Date": None})
    else:
        fig.savefig(path, format="svg")
    plt.close(fig)
    return path
