"""Interval plots of benchmark summaries, one panel per scenario.

Figures are rendered with the Agg backend and written without timestamps so
repeated runs produce identical files.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402


def _f(x) -> float:
    return float(x) if x not in ("", None) else float("nan")


def plot_summary(rows: Sequence[Mapping], out_dir, stem: str = "summary") -> list[Path]:
    """One PNG per (signal, model method): mean C with 2.5-97.5 percentile bars
    for every adjustment arm, a panel per scenario."""
    out_dir = Path(out_dir)
    groups: dict[tuple[str, str], list[Mapping]] = {}
    for r in rows:
        groups.setdefault((r["signal"], r["model_method"]), []).append(r)
    written = []
    for (signal, method), grp in sorted(groups.items()):
        scenarios = list(dict.fromkeys(r["scenario"] for r in grp))
        arms = list(dict.fromkeys(r["adjustment"] for r in grp))
        ncol = min(4, len(scenarios))
        nrow = -(-len(scenarios) // ncol)
        fig, axes = plt.subplots(nrow, ncol, figsize=(3.2 * ncol, 2.8 * nrow), squeeze=False, sharey=True)
        for ax, sc in zip(axes.flat, scenarios):
            cell = {r["adjustment"]: r for r in grp if r["scenario"] == sc}
            xs = range(len(arms))
            mean = [_f(cell[a]["mean"]) if a in cell else float("nan") for a in arms]
            lo = [_f(cell[a]["p2.5"]) if a in cell else float("nan") for a in arms]
            hi = [_f(cell[a]["p97.5"]) if a in cell else float("nan") for a in arms]
            ax.vlines(list(xs), lo, hi, color="0.4", lw=1.2)
            ax.plot(list(xs), mean, "o", color="C0", ms=4)
            ax.axhline(0.5, color="0.7", lw=0.8, ls="--")
            ax.set_title(sc, fontsize=9)
            ax.set_xticks(list(xs))
            ax.set_xticklabels(arms, rotation=60, ha="right", fontsize=7)
            ax.set_ylim(0.0, 1.0)
        for ax in list(axes.flat)[len(scenarios):]:
            ax.set_visible(False)
        for ax in axes[:, 0]:
            ax.set_ylabel("test C-index")
        fig.suptitle(f"{signal} signal, {method}", fontsize=10)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
        plt.close(fig)
        path = out_dir / f"{stem}_{signal}_{method}.png"
        atomic_write_bytes(path, buf.getvalue())
        written.append(path)
    return written
