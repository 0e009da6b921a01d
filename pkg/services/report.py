# services/report.py - Static SVG bar charts and CSV tables of analysis results
import csv
import io
import logging
import os
from dataclasses import dataclass
from typing import List, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from utils.helpers import require_file_stem  # noqa: E402

logger = logging.getLogger()

# Fixed ids, text kept as text, no timestamp: identical input gives identical bytes
_SVG_STYLE = {
    "svg.hashsalt": "lsk-report",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
}


@dataclass(frozen=True)
class Chart:
    path: str
    labels: Tuple[str, ...]
    heights: Tuple[float, ...]


def render_bar_chart(path, title, labels, values, ylabel) -> Chart:
    with plt.rc_context(_SVG_STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(labels) + 2.0), 3.5))
        heights: Tuple[float, ...] = ()
        if labels:
            bars = ax.bar(range(len(labels)), values, color="#4c72b0")
            ax.set_xticks(range(len(labels)))
            ax.set_xticklabels(labels, rotation=45, ha="right")
            heights = tuple(float(bar.get_height()) for bar in bars)
        else:
            ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
            ax.set_xticks([])
        ax.set_title(title)
        ax.set_ylabel(ylabel)
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        buffer = io.StringIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
        plt.close(fig)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="\n") as handle:
        handle.write(buffer.getvalue())
    return Chart(path=path, labels=tuple(labels), heights=heights)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(results, output_dir) -> List[Chart]:
    """Charts and tables for an `analyze` result dict.

    `results` carries ``rf_ratio`` (a RatioReport dict) and ``selection``
    (category -> SelectionDifference dict); either may be missing or empty.
    """
    os.makedirs(output_dir, exist_ok=True)
    charts = []

    ratio = results.get("rf_ratio") or {}
    normalized = ratio.get("normalized", {})
    categories = sorted(normalized)
    charts.append(
        render_bar_chart(
            os.path.join(output_dir, "rf_ratio.svg"),
            "Normalised expected selective RF / box area",
            categories,
            [normalized[c] for c in categories],
            "normalised R_c",
        )
    )
    _write_csv(
        os.path.join(output_dir, "rf_ratio.csv"),
        ["category", "ratio", "normalized", "images"],
        [
            [c, repr(ratio["ratios"][c]), repr(normalized[c]), ratio.get("image_counts", {}).get(c, 0)]
            for c in categories
        ],
    )

    selection = results.get("selection") or {}
    selection_rows = []
    for category in sorted(selection):
        require_file_stem(category, "category")
        per_block = selection[category].get("per_block", {})
        blocks = sorted(per_block)
        charts.append(
            render_bar_chart(
                os.path.join(output_dir, f"selection_{category}.svg"),
                f"Kernel selection difference: {category}",
                blocks,
                [per_block[b] for b in blocks],
                "ΔA",
            )
        )
        norm = selection[category].get("normalized", {})
        selection_rows += [[category, b, repr(per_block[b]), repr(norm.get(b, 0.0))] for b in blocks]
    _write_csv(os.path.join(output_dir, "selection.csv"), ["category", "block", "delta", "normalized"], selection_rows)

    logger.info(f"Wrote {len(charts)} charts and 2 tables to {output_dir}")
    return charts
