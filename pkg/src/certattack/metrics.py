"""Evaluation metrics over per-sample attack results.

The unit of account is a (method, sample) cell holding the attack's
perturbation norm, with 0 encoding a failed attack, plus wall time and the
clean-point Cohen radius shared by all methods. Metrics reduce over one
method at a time; best_proportion compares methods on the samples where
every method succeeded.
"""

import csv
import json
import logging

import numpy as np

log = logging.getLogger(__name__)

_ROW_KEYS = ("method", "sample_id", "norm", "elapsed", "cohen_radius")


class ResultsMatrix:
    """Per (method, sample) attack radii, times, and clean Cohen radii.

    Every method must cover the identical sample set (the correctly
    predicted filter set); the clean radius is a per-sample quantity and
    must agree across methods.
    """

    def __init__(self, methods, sample_ids, radii, elapsed, cohen):
        self.methods = tuple(methods)
        self.sample_ids = tuple(int(s) for s in sample_ids)
        self.radii = np.asarray(radii, dtype=np.float64)
        self.elapsed = np.asarray(elapsed, dtype=np.float64)
        self.cohen = np.asarray(cohen, dtype=np.float64)
        m, n = len(self.methods), len(self.sample_ids)
        if n == 0:
            raise ValueError("empty sample set")
        if m == 0:
            raise ValueError("no methods")
        if len(set(self.methods)) != m:
            raise ValueError("duplicate method names")
        if len(set(self.sample_ids)) != n:
            raise ValueError("duplicate sample ids")
        if self.radii.shape != (m, n) or self.elapsed.shape != (m, n):
            raise ValueError("radii/elapsed must be (methods, samples)")
        if self.cohen.shape != (n,):
            raise ValueError("cohen must be one value per sample")
        if np.any(self.radii < 0) or np.any(self.cohen < 0):
            raise ValueError("radii and Cohen radii are nonnegative")
        if not (np.all(np.isfinite(self.radii))
                and np.all(np.isfinite(self.elapsed))
                and np.all(np.isfinite(self.cohen))):
            raise ValueError("non-finite entries")

    @classmethod
    def from_records(cls, records):
        """Build from row dicts as persisted by the sweep harness.

        Required keys per row: method, sample_id, norm (0 on failure),
        elapsed, cohen_radius. An optional certify_elapsed is folded into
        the per-sample time so reported timing covers certification too.
        """
        cells = {}
        cohen = {}
        methods = []
        for row in records:
            missing = [k for k in _ROW_KEYS if k not in row]
            if missing:
                raise ValueError(f"result row missing keys {missing}")
            key = (row["method"], int(row["sample_id"]))
            if key in cells:
                raise ValueError(f"duplicate result row for {key}")
            t = float(row["elapsed"]) + float(row.get("certify_elapsed", 0.0))
            cells[key] = (float(row["norm"]), t)
            if row["method"] not in methods:
                methods.append(row["method"])
            c = float(row["cohen_radius"])
            sid = int(row["sample_id"])
            if sid in cohen and cohen[sid] != c:
                raise ValueError(f"sample {sid}: conflicting Cohen radii")
            cohen[sid] = c
        if not cells:
            raise ValueError("empty sample set")
        sample_ids = sorted(cohen)
        grids = np.zeros((2, len(methods), len(sample_ids)))
        for i, meth in enumerate(methods):
            for j, sid in enumerate(sample_ids):
                if (meth, sid) not in cells:
                    raise ValueError(f"method {meth!r} missing sample {sid}")
                grids[0, i, j], grids[1, i, j] = cells[(meth, sid)]
        return cls(methods, sample_ids, grids[0], grids[1],
                   [cohen[s] for s in sample_ids])

    @classmethod
    def from_jsonl(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        return cls.from_records(rows)

    def _index(self, method):
        try:
            return self.methods.index(method)
        except ValueError:
            raise ValueError(f"unknown method {method!r}") from None

    def row(self, method):
        return self.radii[self._index(method)]


def success_rate(results, method):
    """Fraction of samples where the attack produced a nonzero radius."""
    return float(np.mean(results.row(method) > 0))


def best_proportion(results, method):
    """Fraction of common-success samples where this method's radius is
    no larger than every other method's; ties count for all tied methods.
    Returns None when no sample is attacked successfully by all methods.
    """
    if len(results.methods) < 2:
        raise ValueError("best_proportion needs at least two methods")
    i = results._index(method)
    common = np.all(results.radii > 0, axis=0)
    if not np.any(common):
        return None
    r = results.radii[:, common]
    best = r[i] <= np.min(np.delete(r, i, axis=0), axis=0)
    return float(np.mean(best))


def median_radius(results, method):
    """Median perturbation norm over this method's successes (r50);
    None when the method never succeeded."""
    r = results.row(method)
    r = r[r > 0]
    if r.size == 0:
        return None
    return float(np.median(r))


def pct_to_cohen(results, method):
    """Median percentage gap between attack radii and the clean Cohen
    radius, over this method's successes: med((r - C)/C) * 100.

    Successes whose clean point abstained (C = 0) cannot be normalized;
    they are dropped with a logged count. None when nothing remains.
    """
    i = results._index(method)
    ok = results.radii[i] > 0
    zero_c = ok & (results.cohen == 0)
    if np.any(zero_c):
        log.warning("pct_to_cohen(%s): excluded %d success(es) with zero "
                    "Cohen radius", method, int(np.sum(zero_c)))
    keep = ok & (results.cohen > 0)
    if not np.any(keep):
        return None
    rel = (results.radii[i, keep] - results.cohen[keep]) / results.cohen[keep]
    return float(np.median(rel) * 100.0)


def excluded_zero_cohen(results, method):
    """How many of this method's successes pct_to_cohen had to drop."""
    i = results._index(method)
    return int(np.sum((results.radii[i] > 0) & (results.cohen == 0)))


def timing(results, method):
    """Median wall-clock seconds per sample, certification included,
    across all tested samples (failures too)."""
    return float(np.median(results.elapsed[results._index(method)]))


def metrics_table(results):
    """One summary row per method; absent metrics are None."""
    rows = []
    multi = len(results.methods) >= 2
    for meth in results.methods:
        rows.append({
            "method": meth,
            "success_rate": success_rate(results, meth),
            "best_proportion": best_proportion(results, meth) if multi
                               else None,
            "median_radius": median_radius(results, meth),
            "pct_to_cohen": pct_to_cohen(results, meth),
            "timing": timing(results, meth),
        })
    return rows


_COLUMNS = ("method", "success_rate", "best_proportion", "median_radius",
            "pct_to_cohen", "timing")


def write_csv(rows, path):
    """Raw (unrounded) metric values, one method per row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k])
                             for k in _COLUMNS})


def format_table(rows):
    """Aligned text table; percentages shown with 0 decimals."""
    def fmt(key, v):
        if v is None:
            return "-"
        if key == "success_rate":
            return f"{100 * v:.0f}%"
        if key == "best_proportion":
            return f"{100 * v:.0f}%"
        if key == "pct_to_cohen":
            return f"{v:.0f}"
        if key == "method":
            return str(v)
        return f"{v:.4g}"

    table = [[fmt(k, row.get(k)) for k in _COLUMNS] for row in rows]
    header = ["method", "success", "best", "r50", "%-C", "time(s)"]
    widths = [max(len(header[c]), *(len(t[c]) for t in table)) if table
              else len(header[c]) for c in range(len(_COLUMNS))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for t in table:
        lines.append("  ".join(v.ljust(w) for v, w in zip(t, widths)))
    return "\n".join(lines) + "\n"
