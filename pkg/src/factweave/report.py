"""Report rendering: matplotlib figures written next to delimited output.

The offload report mirrors the analysis that picks which facts to keep
externalized: a histogram of per-triplet loss differences with the
keep-threshold for each ratio marked, plus a TSV of the threshold
ladder.  The store report is a bar chart of the database statistics.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .accounting import DeltaLossRecord, rank_offload
from .store import StoreStats

DEFAULT_RATIOS = (0.10, 0.25, 0.50, 0.75, 0.90)


def offload_threshold_ladder(
    records: Sequence[DeltaLossRecord], ratios: Sequence[float] = DEFAULT_RATIOS
) -> list[tuple[float, float, int]]:
    """(ratio, threshold, kept-count) rows, one per requested ratio."""
    ladder = []
    for ratio in ratios:
        keep, threshold = rank_offload(records, ratio)
        ladder.append((ratio, threshold, len(keep)))
    return ladder


def render_offload_report(
    records: Sequence[DeltaLossRecord],
    out_dir,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ladder = offload_threshold_ladder(records, ratios)

    tsv_path = out / "offload_thresholds.tsv"
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("ratio\tthreshold\tkept\ttotal\n")
        for ratio, threshold, kept in ladder:
            fh.write(f"{ratio:g}\t{threshold:.9g}\t{kept}\t{len(records)}\n")

    fig_path = out / "delta_loss_distribution.png"
    deltas = [r.delta for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(deltas, bins=min(50, max(10, len(deltas) // 20 or 10)), color="#4878a8")
    for ratio, threshold, _ in ladder:
        if threshold != float("inf"):
            ax.axvline(threshold, color="#a84848", linestyle="--", linewidth=1)
            ax.text(
                threshold,
                ax.get_ylim()[1] * 0.95,
                f"{ratio:.0%}",
                rotation=90,
                va="top",
                fontsize=8,
            )
    ax.set_xlabel("loss difference (plain minus lookup model)")
    ax.set_ylabel("triplets")
    ax.set_title("Loss-difference distribution with keep thresholds")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return {"tsv": tsv_path, "figure": fig_path}


def render_store_report(stats: StoreStats, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    tsv_path = out / "store_stats.tsv"
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric\tcount\n")
        for name, count in stats.as_dict().items():
            fh.write(f"{name}\t{count}\n")

    fig_path = out / "store_stats.png"
    labels = ["triplets", "entities", "relations", "values"]
    counts = [
        stats.triplet_count,
        stats.unique_entity_count,
        stats.unique_relation_count,
        stats.unique_value_count,
    ]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, counts, color=["#4878a8", "#6aa84f", "#a87948", "#8448a8"])
    ax.set_ylabel("count")
    ax.set_title("Knowledge store contents")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return {"tsv": tsv_path, "figure": fig_path}
