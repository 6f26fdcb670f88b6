"""Metric tables, cross-language heatmaps and the markdown summary."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from hybridret.encoder import CODE_MAX_LEN
from hybridret.metrics import EvalResult

METRIC_COLUMNS = ("dataset", "query_lang", "target_lang", "strategy", "alpha", "mrr", "map", "n_queries")


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    query_lang: str
    target_lang: str
    strategy: str
    alpha: str
    mrr: float
    map: float
    n_queries: int

    @classmethod
    def from_result(cls, dataset: str, res: EvalResult) -> "MetricRow":
        sc = res.scenario
        alpha = repr(sc.alpha) if sc.strategy == "Weight" else ""
        return cls(dataset, sc.query_language, sc.target_language, sc.strategy, alpha,
                   res.mrr, res.map, res.n_queries)

    @property
    def label(self) -> str:
        return f"Weight({float(self.alpha):g})" if self.strategy == "Weight" else self.strategy


def write_metrics_csv(rows: Iterable[MetricRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r.dataset, r.query_lang, r.target_lang, r.strategy, r.alpha,
                        repr(float(r.mrr)), repr(float(r.map)), r.n_queries])


def read_metrics_csv(path: Union[str, Path]) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: not a metrics table (header {reader.fieldnames})")
        return [
            MetricRow(r["dataset"], r["query_lang"], r["target_lang"], r["strategy"], r["alpha"],
                      float(r["mrr"]), float(r["map"]), int(r["n_queries"]))
            for r in reader
        ]


# --- heatmap ------------------------------------------------------------------


def write_matrix_csv(langs: Sequence[str], matrix: Sequence[Sequence[Optional[float]]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query\\target", *langs])
        for lang, row in zip(langs, matrix):
            w.writerow([lang, *("" if v is None else repr(float(v)) for v in row)])


def _ramp(v: float) -> str:
    # dark purple -> bright yellow
    lo, hi = (40, 11, 84), (253, 231, 37)
    t = min(max(v, 0.0), 1.0)
    r, g, b = (round(a + (c - a) * t) for a, c in zip(lo, hi))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(langs: Sequence[str], matrix: Sequence[Sequence[Optional[float]]], title: str = "") -> str:
    cell, left, top = 64, 90, 60 if title else 40
    n = len(langs)
    width, height = left + n * cell + 10, top + n * cell + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">'
    ]
    if title:
        out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for j, lang in enumerate(langs):
        out.append(f'<text x="{left + j * cell + cell / 2}" y="{top - 8}" text-anchor="middle">{escape(lang)}</text>')
    for i, lang in enumerate(langs):
        y = top + i * cell
        out.append(f'<text x="{left - 8}" y="{y + cell / 2 + 4}" text-anchor="end">{escape(lang)}</text>')
        for j, v in enumerate(matrix[i]):
            x = left + j * cell
            fill = "#cccccc" if v is None else _ramp(v)
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>')
            label = "n/a" if v is None else f"{100 * v:.1f}"
            ink = "black" if v is None or v > 0.5 else "white"
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" fill="{ink}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- markdown summary -----------------------------------------------------------


def summary_markdown(rows: Sequence[MetricRow]) -> str:
    """Strategies as column groups with MRR/MAP sub-columns, one row per (dataset, scenario)."""
    labels: list[str] = []
    for r in rows:
        if r.label not in labels:
            labels.append(r.label)
    keys: list[tuple[str, str, str]] = []
    cells: dict[tuple[tuple[str, str, str], str], MetricRow] = {}
    for r in rows:
        k = (r.dataset, r.query_lang, r.target_lang)
        if k not in keys:
            keys.append(k)
        cells[(k, r.label)] = r
    head = ["dataset", "query", "target"]
    for lab in labels:
        head += [f"{lab} MRR", f"{lab} MAP"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for k in keys:
        vals = list(k)
        for lab in labels:
            r = cells.get((k, lab))
            vals += ["-", "-"] if r is None else [f"{100 * r.mrr:.2f}", f"{100 * r.map:.2f}"]
        lines.append("| " + " | ".join(vals) + " |")
    notes = ["Scores are percentages."]
    if "Remix" in labels:
        notes.append(f"Remix queries are NL tokens, a separator, then code, cut at {CODE_MAX_LEN} tokens.")
    return "# Retrieval results\n\n" + " ".join(notes) + "\n\n" + "\n".join(lines) + "\n"
