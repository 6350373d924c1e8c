"""File renderers for metrics, curves, and provenance records.

Reports are files, never interactive windows. Text tables round percent
values to one decimal; the JSON files keep full precision. Figures are
SVG rendered through the Agg backend with a fixed hash salt and no date
metadata, so identical inputs produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import platform

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "aggnet"

import cv2
import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .evaluate import MetricsReport


def metrics_to_dict(report: MetricsReport):
    return {
        "oa_percent": report.oa,
        "oa_sigma_percent": report.oa_sigma,
        "sigma_defined": report.sigma_defined,
        "runs": report.runs,
        "run_oas_percent": list(report.run_oas),
        "classes": list(report.class_names),
        "quality_percent": [
            {"class": name, "percent": q.percent, "undefined": q.undefined}
            for name, q in zip(report.class_names, report.quality)
        ],
        "confusion_counts": report.matrix.counts.tolist(),
        "confusion_row_percent": report.matrix.row_normalized().tolist(),
    }


def write_metrics_json(path, report: MetricsReport):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def confusion_text(report: MetricsReport):
    """Row-normalized confusion table plus the headline numbers."""
    names = report.class_names
    width = max(6, max(len(n) for n in names) + 1)
    perc = report.matrix.row_normalized()
    lines = ["confusion matrix, % of reference class (rows) predicted as (columns)"]
    lines.append(" " * width + "".join(f"{n:>{width}}" for n in names))
    for i, name in enumerate(names):
        row = "".join(f"{perc[i, j]:>{width}.1f}" for j in range(len(names)))
        lines.append(f"{name:<{width}}" + row)
    if report.sigma_defined:
        lines.append(f"OA {report.oa:.1f} % (sigma {report.oa_sigma:.1f}, "
                     f"{report.runs} runs)")
    else:
        lines.append(f"OA {report.oa:.1f} %")
    quality = "  ".join(
        f"{n} {'n/a' if q.undefined else format(q.percent, '.1f')}"
        for n, q in zip(names, report.quality))
    lines.append("quality % per class: " + quality)
    return "\n".join(lines) + "\n"


def write_confusion_text(path, report: MetricsReport):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(confusion_text(report))


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_confusion_svg(path, report: MetricsReport):
    """Heatmap of the row-normalized matrix with one-decimal annotations."""
    perc = report.matrix.row_normalized()
    n = len(report.class_names)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 1.0 + 0.6 * n))
    im = ax.imshow(perc, cmap="viridis", vmin=0.0, vmax=100.0)
    ax.set_xticks(range(n), report.class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), report.class_names)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("reference class")
    for i in range(n):
        for j in range(n):
            if perc[i, j] > 0:
                color = "black" if perc[i, j] > 55 else "white"
                ax.text(j, i, f"{perc[i, j]:.1f}", ha="center", va="center",
                        color=color, fontsize=7)
    fig.colorbar(im, ax=ax, label="% of reference class")
    ax.set_title(f"OA {report.oa:.1f} %")
    fig.tight_layout()
    _save_svg(fig, path)


def write_history_svg(path, history):
    """Loss curves and validation accuracy over epochs."""
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h.train_loss for h in history], label="training loss")
    ax.plot(epochs, [h.val_loss for h in history], label="validation loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h.val_oa for h in history], color="tab:green",
             linestyle="--", label="validation OA")
    ax2.set_ylabel("validation OA [%]")
    ax2.set_ylim(0, 100)
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="center right")
    fig.tight_layout()
    _save_svg(fig, path)


def write_gsd_curve_svg(path, rows):
    """OA over image scale; `rows` holds (gsd, mean_oa, sigma, runs_ok)."""
    usable = [r for r in rows if r[3] > 0]
    fig, ax = plt.subplots(figsize=(6, 4))
    if usable:
        gsds = [r[0] for r in usable]
        means = [r[1] for r in usable]
        sigmas = [r[2] for r in usable]
        ax.errorbar(gsds, means, yerr=sigmas, marker="o", capsize=3)
    ax.set_xlabel("image scale [px/mm]")
    ax.set_ylabel("overall accuracy [%]")
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save_svg(fig, path)


def config_digest(data):
    """Stable sha256 of a config: file bytes or a canonical-JSON fallback."""
    if isinstance(data, bytes):
        blob = data
    else:
        blob = json.dumps(data, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_run_json(path, seed, digest, extra=None):
    """Provenance record: config hash, seed, library versions.

    Deliberately no timestamp, so a rerun with identical inputs leaves an
    identical file.
    """
    record = {
        "config_sha256": digest,
        "seed": seed,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "matplotlib": matplotlib.__version__,
            "opencv": cv2.__version__,
        },
    }
    if extra:
        record.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
