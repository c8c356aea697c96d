"""Sweep execution over methods x parameter points x sigma x samples.

Persistence is split in two: rows.jsonl carries only deterministic,
seed-reproducible fields (reruns are byte-identical), while timings.jsonl
carries wall-clock measurements keyed by the same (method, point, sigma,
sample) tuple. Both are appended incrementally and rewritten in canonical
order at the end, so an interrupted sweep resumes into exactly the files
a fresh run would produce.
"""

import itertools
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..attacks import (CaaConfig, caa_attack, confident, cw_attack,
                       deepfool_attack, pgd_attack)
from ..ibp import IbpEvaluator, ibp_radius
from ..model import (GumbelHead, checkpoint_hash, load_checkpoint, make_cnn,
                     make_mlp, predict, save_checkpoint, train)
from ..smoothing import SmoothingConfig, certify
from .config import RunRecord, config_hash
from .datasets import load_mnist_idx, make_synthetic

_CAA_DEFAULTS = {"eps_min": 4 / 255, "eps_max": 100 / 255, "delta": 0.05,
                 "iters": 40}
_PGD_DEFAULTS = {"eps_step": 0.02, "iters": 20}
_CW_DEFAULTS = {"c": 1.0, "kappa": 0.0, "steps": 40, "lr": 0.02}
_DF_DEFAULTS = {"iters": 10, "overshoot": 1.02}


def output_root():
    return Path(os.environ.get("CERTATTACK_OUTPUT_ROOT", "."))


def _points(grid):
    """Cartesian product of a {param: [values]} grid, key-sorted; the
    empty grid yields one all-defaults point."""
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def _point_id(point):
    return json.dumps(point, sort_keys=True)


def _sample_seeds(global_seed, sample_id, stream):
    ss = np.random.SeedSequence((global_seed, stream, sample_id))
    return [int(v) for v in ss.generate_state(2)]


def build_dataset(cfg):
    """(X, y) shaped for the configured architecture."""
    if cfg.dataset == "idx":
        images, y = load_mnist_idx(cfg.idx_images, cfg.idx_labels)
        if cfg.subset > len(y):
            raise ValueError("subset size exceeds dataset size")
        if cfg.arch == "cnn":
            return images[:, None, :, :], y
        return images.reshape(len(y), -1), y
    X, y = make_synthetic(cfg.dataset, cfg.n_data, seed=cfg.seed)
    if cfg.arch == "cnn":
        raise ValueError("cnn needs image data")
    return X, y


def build_model(cfg, X, y, out_dir=None):
    """Train (or reload from the output dir's checkpoint) the base model."""
    path = None if out_dir is None else Path(out_dir) / "model.json"
    if path is not None and path.exists():
        return load_checkpoint(path)
    n_classes = int(np.max(y)) + 1
    head = GumbelHead(tau=1.0, enabled=True)
    if cfg.arch == "cnn":
        model = make_cnn(n_classes, X.shape[1:], seed=cfg.seed, head=head)
    else:
        model = make_mlp(X.shape[1], n_classes, hidden=cfg.hidden,
                         seed=cfg.seed, head=head)
    train(model, (X, y), sigma=cfg.train_sigma, epochs=cfg.epochs,
          seed=cfg.seed + 1)
    if path is not None:
        save_checkpoint(model, path)
    return model


def _clean_config(cfg, sigma, seed):
    n = cfg.clean_n if cfg.clean_n is not None else 10 * cfg.n_loop
    return SmoothingConfig(sigma=sigma, n_samples=n, alpha=cfg.alpha,
                           seed=seed)


def _filter_set(model, X, y, sigma, cfg):
    """First `subset` samples the smoothed model classifies correctly,
    with their defender-grade clean verdicts."""
    picked = []
    for sid in range(len(y)):
        if len(picked) == cfg.subset:
            break
        seed = _sample_seeds(cfg.seed, sid, 3)[0]
        t0 = time.perf_counter()
        verdict = certify(model, X[sid], _clean_config(cfg, sigma, seed))
        dt = time.perf_counter() - t0
        if verdict.top_class == int(y[sid]):
            picked.append({"sample_id": sid, "x": X[sid],
                           "label": int(y[sid]), "clean": verdict,
                           "certify_elapsed": dt})
    if not picked:
        raise ValueError("no correctly predicted samples to attack")
    return picked


def _run_method(model, x0, label, method, point, loop, recheck_n, seed):
    if method == "caa":
        p = {**_CAA_DEFAULTS, **point}
        ccfg = CaaConfig(smoothing=loop, eps_min=p["eps_min"],
                         eps_max=p["eps_max"], delta_grow=p["delta"],
                         delta_shrink=p["delta"], max_iters=p["iters"],
                         seed=seed, recheck_n=recheck_n)
        return caa_attack(model, x0, ccfg, original_class=label)
    if method == "pgd":
        p = {**_PGD_DEFAULTS, **point}
        return pgd_attack(model, x0, label, p["eps_step"], p["iters"], loop,
                          recheck_n=recheck_n, seed=seed)
    if method == "cw":
        p = {**_CW_DEFAULTS, **point}
        return cw_attack(model, x0, label, p["c"], p["kappa"], p["steps"],
                         p["lr"], loop, recheck_n=recheck_n)
    if method == "deepfool":
        p = {**_DF_DEFAULTS, **point}
        return deepfool_attack(model, x0, p["iters"], loop,
                               overshoot=p["overshoot"],
                               recheck_n=recheck_n, original_class=label)
    raise ValueError(f"unknown attack method {method!r}")


def _attack_one(model, sample, method, point, sigma, cfg):
    sid = sample["sample_id"]
    attack_seed, smoothing_seed = _sample_seeds(cfg.seed, sid, 1)
    loop = SmoothingConfig(sigma=sigma, n_samples=cfg.n_loop,
                           alpha=cfg.loop_alpha, seed=smoothing_seed)
    recheck_n = (cfg.recheck_n if cfg.recheck_n is not None
                 else 10 * cfg.n_loop)
    res = _run_method(model, sample["x"], sample["label"], method, point,
                      loop, recheck_n, attack_seed)
    row = {"method": method, "point_id": _point_id(point), "point": point,
           "sigma": float(sigma), "sample_id": sid,
           "label": sample["label"], "success": bool(res.success),
           "norm": float(res.norm),
           "adv_class": None if res.adv_class is None else int(res.adv_class),
           "original_class": int(res.original_class),
           "iterations": int(res.iterations), "flags": list(res.flags),
           "cohen_radius": float(sample["clean"].radius),
           "clean_class": int(sample["clean"].top_class),
           "adv_radius": (float(res.final_verdict.radius)
                          if res.final_verdict is not None else None),
           "recheck_rank": res.recheck_rank,
           "x_adv": (None if res.x_adv is None
                     else [float(v) for v in np.ravel(res.x_adv)])}
    timing_row = {"method": method, "point_id": row["point_id"],
                  "sigma": float(sigma), "sample_id": sid,
                  "elapsed": float(res.elapsed),
                  "certify_elapsed": float(sample["certify_elapsed"])}
    return row, timing_row


def _row_key(row):
    return (row["method"], row["point_id"], row["sigma"], row["sample_id"])


def _load_jsonl(path):
    if not Path(path).exists():
        return {}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[_row_key(row)] = row
    return out


def _append_jsonl(path, rows):
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.flush()


def _rewrite_jsonl(path, rows):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _now():
    return datetime.now(timezone.utc).isoformat()


def run_sweep(cfg):
    """Execute the full grid, resuming past completed (point, sample)
    pairs, and return the persisted RunRecord."""
    out = output_root() / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    chash = config_hash(cfg)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        prior = json.loads(cfg_path.read_text())
        if prior.get("config_hash") != chash:
            raise ValueError("output dir belongs to a different config")
    else:
        cfg_path.write_text(json.dumps(
            {"config_hash": chash}, sort_keys=True))

    rows_path, timings_path = out / "rows.jsonl", out / "timings.jsonl"
    done = _load_jsonl(rows_path)
    timings = _load_jsonl(timings_path)

    if cfg.methods:
        X, y = build_dataset(cfg)
        model = build_model(cfg, X, y, out)
        model_hash = checkpoint_hash(model)
        clean = {sigma: _filter_set(model, X, y, sigma, cfg)
                 for sigma in cfg.sigmas}
    else:
        model_hash = ""
        clean = {}

    schedule = []  # canonical order of row keys
    for method, grid in cfg.methods.items():
        for point in _points(grid):
            pid = _point_id(point)
            for sigma in cfg.sigmas:
                chunk, todo = [], []
                for sample in clean[sigma]:
                    key = (method, pid, float(sigma), sample["sample_id"])
                    chunk.append(key)
                    if key not in done:
                        todo.append(sample)
                schedule.extend(chunk)
                if not todo:
                    continue
                work = [(model, s, method, point, sigma, cfg) for s in todo]
                if cfg.workers > 1:
                    with ThreadPoolExecutor(cfg.workers) as pool:
                        results = list(pool.map(
                            lambda a: _attack_one(*a), work))
                else:
                    results = [_attack_one(*a) for a in work]
                new_rows, new_times = zip(*results)
                for row, t in results:
                    done[_row_key(row)] = row
                    timings[_row_key(t)] = t
                _append_jsonl(rows_path, new_rows)
                _append_jsonl(timings_path, new_times)

    rows = [done[k] for k in schedule]
    _rewrite_jsonl(rows_path, rows)
    _rewrite_jsonl(timings_path, [timings[k] for k in schedule
                                  if k in timings])
    metrics = {"points": _point_summaries(rows, timings)}
    record = RunRecord(config_hash=chash, model_hash=model_hash, rows=rows,
                       metrics=metrics, started=started, finished=_now())
    record.save(out / "record.json")
    return record


def _group(rows):
    groups = {}
    for row in rows:
        groups.setdefault(
            (row["method"], row["point_id"], row["sigma"]), []).append(row)
    return groups


def _stats(rows):
    """success rate and %-C for one (method, point, sigma) cell."""
    norms = np.array([r["norm"] for r in rows])
    success = float(np.mean(norms > 0))
    rel = [(r["norm"] - r["cohen_radius"]) / r["cohen_radius"]
           for r in rows if r["norm"] > 0 and r["cohen_radius"] > 0]
    pct = float(np.median(rel) * 100) if rel else None
    r50 = float(np.median(norms[norms > 0])) if np.any(norms > 0) else None
    return success, pct, r50


def _point_summaries(rows, timings):
    out = []
    for (method, pid, sigma), group in _group(rows).items():
        success, pct, r50 = _stats(group)
        times = [timings[k]["elapsed"] + timings[k]["certify_elapsed"]
                 for k in map(_row_key, group) if k in timings]
        out.append({"method": method, "point_id": pid,
                    "point": group[0]["point"], "sigma": sigma,
                    "n": len(group), "success_rate": success,
                    "pct_to_cohen": pct, "median_radius": r50,
                    "timing": float(np.median(times)) if times else None})
    return out


def select_operating_point(rows, target_success, sigma=None):
    """Per method: the config point minimizing %-C subject to success rate
    >= target, else the max-success point; ties break to lower %-C then
    lexicographic point id."""
    if sigma is not None:
        rows = [r for r in rows if r["sigma"] == float(sigma)]
    chosen = {}
    by_method = {}
    for (method, pid, sig), group in _group(rows).items():
        by_method.setdefault(method, []).append((pid, sig, group))
    for method, cells in by_method.items():
        stats = []
        for pid, sig, group in sorted(cells, key=lambda c: (c[0], c[1])):
            success, pct, r50 = _stats(group)
            stats.append({"point_id": pid, "point": group[0]["point"],
                          "sigma": sig, "n": len(group),
                          "success_rate": success, "pct_to_cohen": pct,
                          "median_radius": r50})
        feasible = [s for s in stats if s["success_rate"] >= target_success]
        pool = feasible or stats
        inf = float("inf")
        if feasible:
            best = min(pool, key=lambda s: (
                inf if s["pct_to_cohen"] is None else s["pct_to_cohen"],
                s["point_id"]))
        else:
            best = min(pool, key=lambda s: (
                -s["success_rate"],
                inf if s["pct_to_cohen"] is None else s["pct_to_cohen"],
                s["point_id"]))
        chosen[method] = best
    return chosen


def summary_table(rows, timings=None, target_success=0.9, sigma=None):
    """Cross-method metric rows at each method's selected operating point.

    Feeds the records through the metrics module so best-proportion is
    computed on the common-success sample set.
    """
    from .. import metrics as M

    selection = select_operating_point(rows, target_success, sigma=sigma)
    records = []
    timings = timings or {}
    for method, choice in selection.items():
        for row in rows:
            if (row["method"], row["point_id"]) != (method,
                                                    choice["point_id"]):
                continue
            if row["sigma"] != choice["sigma"]:
                continue
            t = timings.get(_row_key(row))
            records.append({
                "method": method, "sample_id": row["sample_id"],
                "norm": row["norm"], "cohen_radius": row["cohen_radius"],
                "elapsed": 0.0 if t is None else t["elapsed"],
                "certify_elapsed": (0.0 if t is None
                                    else t["certify_elapsed"])})
    matrix = M.ResultsMatrix.from_records(records)
    return M.metrics_table(matrix), selection


def sigma_estimation_run(cfg, sigma_true, factors):
    """CAA with the attacker's noise level set to factor * sigma_true while
    the defender certifies with sigma_true; per-factor success is only
    counted when the defender's own check confirms the point."""
    if sigma_true <= 0:
        raise ValueError("sigma_true must be positive")
    factors = [float(f) for f in factors]
    if not factors or any(f <= 0 for f in factors):
        raise ValueError("factors must be positive")
    out = output_root() / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    X, y = build_dataset(cfg)
    model = build_model(cfg, X, y, out)
    defender = {s["sample_id"]: s
                for s in _filter_set(model, X, y, sigma_true, cfg)}
    point = {**_CAA_DEFAULTS,
             **next(_points(cfg.methods.get("caa", {})))}
    recheck_n = (cfg.recheck_n if cfg.recheck_n is not None
                 else 10 * cfg.n_loop)
    results = []
    for factor in factors:
        rows = []
        for sid, sample in defender.items():
            attack_seed, smoothing_seed = _sample_seeds(cfg.seed, sid, 1)
            loop = SmoothingConfig(sigma=factor * sigma_true,
                                   n_samples=cfg.n_loop,
                                   alpha=cfg.loop_alpha, seed=smoothing_seed)
            ccfg = CaaConfig(smoothing=loop, eps_min=point["eps_min"],
                             eps_max=point["eps_max"],
                             delta_grow=point["delta"],
                             delta_shrink=point["delta"],
                             max_iters=point["iters"], seed=attack_seed,
                             recheck_n=recheck_n)
            res = caa_attack(model, sample["x"], ccfg,
                             original_class=sample["label"])
            ok = bool(res.success)
            if ok:
                dcfg = _clean_config(cfg, sigma_true,
                                     _sample_seeds(cfg.seed, sid, 5)[0])
                ok = confident(model, res.x_adv, sample["x"], dcfg,
                               original_class=sample["label"])
            rows.append({"sample_id": sid, "success": ok,
                         "norm": float(res.norm) if ok else 0.0})
        norms = np.array([r["norm"] for r in rows if r["success"]])
        results.append({
            "factor": factor,
            "sigma_attacker": factor * sigma_true,
            "n": len(rows),
            "success_rate": float(np.mean([r["success"] for r in rows])),
            "mean_norm": float(np.mean(norms)) if norms.size else None,
            "median_norm": float(np.median(norms)) if norms.size else None,
            "rows": rows})
    doc = {"sigma_true": float(sigma_true), "factors": factors,
           "config_hash": config_hash(cfg), "results": results}
    with open(out / "sigma_study.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    return results


def ibp_study(cfg, iters=30, eps_min=0.02, eps_max=0.6, delta=0.1,
              eps_step=0.05):
    """CAA vs PGD at a matched step budget against an interval-certified
    model; both attacks consume the deterministic IBP evaluator."""
    out = output_root() / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    X, y = build_dataset(cfg)
    model = build_model(cfg, X, y, out)
    ev = IbpEvaluator(model)
    dummy = SmoothingConfig(sigma=0.25, n_samples=100, alpha=0.05,
                            seed=cfg.seed)
    rows = []
    for sid in range(len(y)):
        if len(rows) == cfg.subset:
            break
        x0, label = X[sid], int(y[sid])
        if predict(model, x0) != label:
            continue
        r0 = float(ibp_radius(model, x0))
        ccfg = CaaConfig(smoothing=dummy, eps_min=eps_min, eps_max=eps_max,
                         delta_grow=delta, delta_shrink=delta,
                         max_iters=iters, seed=cfg.seed)
        res_caa = caa_attack(model, x0, ccfg, evaluator=ev,
                             original_class=label)
        res_pgd = pgd_attack(model, x0, label, eps_step, iters, dummy,
                             evaluator=ev, recheck_evaluator=ev,
                             seed=cfg.seed)
        rows.append({"sample_id": sid, "label": label, "ibp_radius": r0,
                     "caa_success": bool(res_caa.success),
                     "caa_norm": float(res_caa.norm),
                     "pgd_success": bool(res_pgd.success),
                     "pgd_norm": float(res_pgd.norm)})
    if not rows:
        raise ValueError("no correctly predicted samples to attack")
    doc = {"n": len(rows), "iters": iters,
           "caa_success_rate": float(np.mean([r["caa_success"]
                                              for r in rows])),
           "pgd_success_rate": float(np.mean([r["pgd_success"]
                                              for r in rows])),
           "rows": rows}
    with open(out / "ibp_study.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    return doc
