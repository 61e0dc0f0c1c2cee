"""Render evaluation-report figures to image files.

Two charts mirror the report structure: the per-corpus usage ratio of chosen
evidence, and accuracy stratified by the gate decision annotated with the
retrieve fraction. Charts with no underlying data are skipped.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

logger = logging.getLogger(__name__)


def _save(figure, path: Path) -> Path:
    figure.tight_layout()
    figure.savefig(path, dpi=150)
    plt.close(figure)
    logger.info("wrote %s", path)
    return path


def render_corpus_usage(report: dict, path: Path) -> Path | None:
    usage = report.get("corpus_usage") or {}
    if not usage:
        return None
    names = list(usage)
    ratios = [usage[name] for name in names]
    figure, axis = plt.subplots(figsize=(6, 4))
    axis.bar(names, ratios, color="#4878a8")
    axis.set_ylabel("share of chosen evidence")
    axis.set_ylim(0, 1)
    axis.set_title("Evidence usage by corpus")
    for idx, ratio in enumerate(ratios):
        axis.text(idx, ratio + 0.02, f"{ratio:.0%}", ha="center", fontsize=9)
    return _save(figure, path)


def render_gate_split(report: dict, path: Path) -> Path | None:
    strata = report.get("stratified_accuracy") or {}
    pairs = [(name, value) for name, value in strata.items() if value is not None]
    if not pairs:
        return None
    names = [name.replace("_", " ") for name, _ in pairs]
    values = [value for _, value in pairs]
    figure, axis = plt.subplots(figsize=(6, 4))
    axis.bar(names, values, color=["#4878a8", "#a84848"][: len(values)])
    axis.set_ylabel("accuracy")
    axis.set_ylim(0, 1)
    fraction = report.get("retrieve_fraction", 0.0)
    axis.set_title(f"Accuracy by gate decision (retrieved {fraction:.0%} of queries)")
    for idx, value in enumerate(values):
        axis.text(idx, value + 0.02, f"{value:.2f}", ha="center", fontsize=9)
    return _save(figure, path)


def render_report_figures(report: dict, out_dir) -> list[Path]:
    """Write every applicable chart into out_dir; returns the created paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    created = []
    for renderer, name in (
        (render_corpus_usage, "corpus_usage.png"),
        (render_gate_split, "accuracy_by_gate.png"),
    ):
        path = renderer(report, out / name)
        if path is not None:
            created.append(path)
    return created
