"""PNG figures written next to the CSV/JSON results."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_curve(curve, p_at_k: dict, path) -> None:
    """Mean normalized return (± std over trials) against data fraction, log x."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.errorbar(curve.fractions, curve.means, yerr=curve.stds, marker="o", capsize=3, label="random subsets")
    ax.axhline(curve.reference, color="k", linestyle="--", linewidth=1, label="full dataset")
    styles = iter([":", "-.", (0, (1, 3)), (0, (5, 2))])
    for name, frac in sorted(p_at_k.items()):
        if frac is not None:
            ax.axvline(frac, linestyle=next(styles, ":"), linewidth=1, color="gray", label=f"{name} = {frac:.3g}")
    ax.set_xscale("log")
    ax.set_xlabel("fraction of dataset")
    ax.set_ylabel("normalized return")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def plot_experiment(summary: dict, rows, path) -> None:
    """Grouped bars: mean normalized return per method and budget."""
    methods = list(summary["methods"])
    budgets = list(next(iter(summary["methods"].values()))["budgets"]) if methods else []
    fig, ax = plt.subplots(figsize=(6, 3.8))
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(budgets))
    for i, m in enumerate(methods):
        vals = [summary["methods"][m]["budgets"][b] for b in budgets]
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=m)
    ax.set_xticks(x, budgets)
    ax.set_xlabel("budget (pairs)")
    ax.set_ylabel("mean normalized return")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
