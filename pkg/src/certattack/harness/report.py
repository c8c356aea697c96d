"""Render persisted sweep rows into CSV tables, Markdown, and SVG plots."""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .sweep import (_load_jsonl, _point_summaries,  # noqa: E402
                    summary_table)

_POINT_COLUMNS = ("method", "point_id", "sigma", "n", "success_rate",
                  "pct_to_cohen", "median_radius", "timing")


def frontier(point_stats, levels):
    """Minimum achievable %-C as the required success rate falls.

    For each level t: min %-C over config points with success >= t, None
    when no point qualifies. Nonincreasing as t decreases since lower
    thresholds only enlarge the candidate set.
    """
    out = []
    for t in levels:
        ok = [s["pct_to_cohen"] for s in point_stats
              if s["success_rate"] >= t and s["pct_to_cohen"] is not None]
        out.append((float(t), min(ok) if ok else None))
    return out


def _write_points_csv(path, summaries):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_POINT_COLUMNS)
        writer.writeheader()
        for s in summaries:
            writer.writerow({k: ("" if s.get(k) is None else s[k])
                             for k in _POINT_COLUMNS})


def _frontier_svg(path, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    levels = [i / 20 for i in range(21)]
    by_method = {}
    for s in _point_summaries(rows, {}):
        by_method.setdefault(s["method"], []).append(s)
    for method, stats in sorted(by_method.items()):
        pts = [(t, v) for t, v in frontier(stats, levels) if v is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=method)
    ax.set_xlabel("required success rate")
    ax.set_ylabel("min %-C")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _scatter_svg(path, rows, selection):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    wanted = {(m, c["point_id"], c["sigma"]) for m, c in selection.items()}
    for method in sorted(selection):
        xs, ys = [], []
        for r in rows:
            if (r["method"], r["point_id"], r["sigma"]) in wanted \
                    and r["method"] == method and r["norm"] > 0:
                xs.append(r["cohen_radius"])
                ys.append(r["norm"])
        if xs:
            ax.scatter(xs, ys, s=12, label=method, alpha=0.7)
    lim = ax.get_xlim()[1]
    ax.plot([0, lim], [0, lim], "k--", lw=0.8)  # soundness floor r = C
    ax.set_xlabel("clean certified radius")
    ax.set_ylabel("attack norm")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _markdown(rows, timings, sigmas, target_success):
    lines = ["# Sweep summary", ""]
    for sigma in sigmas:
        lines.append(f"## sigma = {sigma}")
        lines.append("")
        try:
            table, selection = summary_table(rows, timings,
                                             target_success=target_success,
                                             sigma=sigma)
        except ValueError:
            lines.append("_no complete cross-method sample set_")
            lines.append("")
            continue
        lines.append("| method | success | best | r50 | %-C | time(s) |")
        lines.append("|---|---|---|---|---|---|")
        for row in table:
            def cell(key, scale=1.0, digits=2):
                v = row.get(key)
                return "-" if v is None else f"{scale * v:.{digits}f}"
            lines.append(
                f"| {row['method']} | {cell('success_rate', 100, 0)}% "
                f"| {cell('best_proportion', 100, 0)}% "
                f"| {cell('median_radius', 1, 4)} "
                f"| {cell('pct_to_cohen', 1, 0)} "
                f"| {cell('timing', 1, 3)} |")
        lines.append("")
        for method, choice in sorted(selection.items()):
            lines.append(f"- {method}: operating point `{choice['point_id']}`"
                         f" (success {choice['success_rate']:.2f})")
        lines.append("")
    return "\n".join(lines) + "\n"


def report(run_dir, out_dir=None, target_success=0.9):
    """Write metrics.csv, summary.md, and SVG plots; returns the paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = list(_load_jsonl(run_dir / "rows.jsonl").values())
    timings = _load_jsonl(run_dir / "timings.jsonl")

    paths = [out / "metrics.csv", out / "summary.md"]
    _write_points_csv(paths[0], _point_summaries(rows, timings))
    if not rows:
        paths[1].write_text("# Sweep summary\n\n_empty record_\n")
        return paths
    sigmas = sorted({r["sigma"] for r in rows})
    paths[1].write_text(_markdown(rows, timings, sigmas, target_success))

    svg1, svg2 = out / "frontier.svg", out / "radius_scatter.svg"
    _frontier_svg(svg1, rows)
    try:
        _, selection = summary_table(rows, timings,
                                     target_success=target_success,
                                     sigma=sigmas[0])
        _scatter_svg(svg2, [r for r in rows if r["sigma"] == sigmas[0]],
                     selection)
        paths.extend([svg1, svg2])
    except ValueError:
        paths.append(svg1)
    return paths
