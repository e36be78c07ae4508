"""Figures for the ``report`` subcommand."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (4.5, 3.0),
    "svg.hashsalt": "colprune",
    "svg.fonttype": "none",
}

MARKERS = {"fasp": "o", "ablate_all_columns": "s", "ablate_prune_qk": "^", "no_restore": "v", "bias_only": "D"}


def plot_sweep(rows, path, title=None, formats=("svg", "png")) -> list:
    """Perplexity-vs-sparsity lines, one per mode. ``rows`` are dicts with mode/sparsity/perplexity."""
    path = Path(path)
    by_mode: dict = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append((r["sparsity"], r["perplexity"]))
    written = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mode, pts in by_mode.items():
            pts.sort()
            xs = [100 * p[0] for p in pts]
            ys = [p[1] for p in pts]
            ax.plot(xs, ys, marker=MARKERS.get(mode, "x"), markersize=4, linewidth=1.2, label=mode)
        ax.set_xlabel("sparsity (%)")
        ax.set_ylabel("perplexity")
        if title:
            ax.set_title(title)
        ax.grid(alpha=0.3, linewidth=0.5)
        ax.legend(frameon=False)
        fig.tight_layout()
        for fmt in formats:
            target = path.with_suffix(f".{fmt}")
            # fixed metadata keeps repeated renders byte-identical
            meta = {"Date": None} if fmt == "svg" else {"Software": None}
            fig.savefig(target, format=fmt, metadata=meta, dpi=150)
            written.append(target)
        plt.close(fig)
    return written
