"""CSV tables and degradation plots from evaluation reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .evaluate import EvalReport


def combine(reports: list[EvalReport]) -> list[dict]:
    """Per (method, bucket) rows; several reports are combined by their median."""
    keys: list[tuple[str, str]] = []
    for rep in reports:
        for a in rep.aggregates:
            if (a["method"], a["bucket"]) not in keys:
                keys.append((a["method"], a["bucket"]))
    rows = []
    for method, bucket in keys:
        aggs = [r.aggregate(method, bucket) for r in reports
                if any(a["method"] == method and a["bucket"] == bucket for a in r.aggregates)]
        prs = [a["pr"] for a in aggs if a["pr"] is not None]
        rows.append({
            "method": method, "bucket": bucket,
            "dice": float(np.median([a["dice"] for a in aggs])),
            "pr": float(np.median(prs)) if prs else None,
        })
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "bucket", "DICE", "PR"])
    for r in rows:
        w.writerow([r["method"], r["bucket"], f"{r['dice']:.2f}", "/" if r["pr"] is None else f"{r['pr']:.2f}"])
    return buf.getvalue()


def write_table(reports: list[EvalReport], path) -> str:
    text = table_csv(combine(reports))
    Path(path).write_text(text)
    return text


def plot_degradation(rows: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    buckets = list(dict.fromkeys(r["bucket"] for r in rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in dict.fromkeys(r["method"] for r in rows):
        ys = [next((r["dice"] for r in rows if r["method"] == method and r["bucket"] == b), np.nan)
              for b in buckets]
        ax.plot(buckets, ys, marker="o", label=method)
    ax.set_xlabel("box shift bucket")
    ax.set_ylabel("DICE (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
