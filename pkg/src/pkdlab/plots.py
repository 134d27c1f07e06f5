"""Accuracy-vs-noise curves rendered from sweep reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  backend must be set first

STYLES = {"DNN": ("tab:blue", "o"), "PK": ("tab:orange", "s"),
          "PKN": ("tab:green", "^"), "PKDN": ("tab:red", "d")}


def render_curves(report, path):
    """One errorbar curve per model; std over seeds as the bar."""
    by_key = {(a.model, a.noise_level): a for a in report.aggregates}
    levels = [float(x) for x in report.config.levels()]
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=150)
    for model in report.config.models:
        pts = [(lv, by_key[(model, lv)]) for lv in levels
               if by_key.get((model, lv)) and
               by_key[(model, lv)].mean_acc is not None]
        if not pts:
            continue
        color, marker = STYLES[model]
        ax.errorbar([p[0] for p in pts], [p[1].mean_acc for p in pts],
                    yerr=[p[1].std_acc for p in pts], label=model,
                    color=color, marker=marker, markersize=4,
                    capsize=2, linewidth=1.2)
    tag = report.config.tag()
    ax.set_xlabel("horizon" if tag == "real" else "noise level")
    ax.set_ylabel("test accuracy")
    ax.set_title(f"{tag}: accuracy vs noise over "
                 f"{report.config.n_repeats} seeds")
    if ax.has_data():
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
