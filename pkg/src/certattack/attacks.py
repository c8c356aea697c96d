"""Certification-aware attack and expectation-level baselines.

The central attack treats the defender's own certificates as search
structure: while the prediction still matches the clean class, each step
must clear the union of every certified same-class ball collected so far;
once flipped, certified adversarial balls license contraction back toward
the clean point without re-crossing the boundary. PGD, Carlini-Wagner, and
DeepFool run against the same class-expectation surface so comparisons are
like for like.

Success is strict throughout: a returned point counts only if a fresh
high-sample certification at that point both flips the argmax and reports a
positive radius. Failed attacks report norm 0.0 by convention.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import (BallLedger, CertifiedBall, clip_step, exit_radius,
                       project, stay_radius)
from .smoothing import SmoothedEvaluator, SmoothingConfig

__all__ = ["CaaConfig", "AttackResult", "caa_attack", "pgd_attack",
           "cw_attack", "deepfool_attack", "confident"]

_GRAD_FLOOR = 1e-12
_PROB_FLOOR = 1e-300
# fresh-certification keys must never collide with loop keys (0..iters)
_RECHECK_KEY = 1_000_000
_CONFIDENT_KEY = 2_000_000
# recheck at most this many snapshots, smallest norm first, to bound cost
_MAX_RECHECKS = 5


@dataclass(frozen=True)
class CaaConfig:
    """Step-size bounds are in [0,1] input units (divide 8-bit grids by 255).

    recheck_n is the sample count for the final confidence check; None means
    ten times the attack-loop count.
    """

    smoothing: SmoothingConfig
    eps_min: float = 4.0 / 255.0
    eps_max: float = 100.0 / 255.0
    delta_grow: float = 0.05
    delta_shrink: float = 0.05
    max_iters: int = 40
    seed: int = 0
    recheck_n: int | None = None

    def __post_init__(self):
        if not 0 < self.eps_min <= self.eps_max:
            raise ValueError("need 0 < eps_min <= eps_max, got (%g, %g)"
                             % (self.eps_min, self.eps_max))
        if not (0 < self.delta_grow < 1 and 0 < self.delta_shrink < 1):
            raise ValueError("delta_grow and delta_shrink must lie in (0,1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.recheck_n is not None and self.recheck_n < 2:
            raise ValueError("recheck_n must be >= 2")


@dataclass
class AttackResult:
    success: bool
    x_adv: np.ndarray | None
    norm: float
    adv_class: int | None
    original_class: int
    iterations: int
    confident: bool
    elapsed: float
    trace: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    method: str = ""
    final_verdict: object = None
    ledger: BallLedger | None = None
    last_snapshot: dict | None = None
    recheck_rank: int | None = None

    def __post_init__(self):
        if self.success:
            if self.x_adv is None:
                raise ValueError("successful result must carry x_adv")
            if self.adv_class == self.original_class:
                raise ValueError("adv_class must differ from original_class")
            if not self.confident:
                raise ValueError("success requires a confident final verdict")
            if not self.norm > 0:
                raise ValueError("successful perturbation must be nonzero")
        else:
            if self.x_adv is not None or self.confident:
                raise ValueError("failed result must not carry x_adv")
            if self.norm != 0.0:
                raise ValueError("failed attacks report norm 0.0")

    def to_json(self, sample_id=None):
        rows = [{k: v for k, v in row.items() if k != "point"}
                for row in self.trace]
        doc = {"success": bool(self.success),
               "norm": float(self.norm),
               "adv_class": None if self.adv_class is None else int(self.adv_class),
               "original_class": int(self.original_class),
               "iterations": int(self.iterations),
               "confident": bool(self.confident),
               "elapsed": float(self.elapsed),
               "method": self.method,
               "flags": list(self.flags),
               "trace": rows,
               "x_adv": (None if self.x_adv is None
                         else [float(v) for v in np.ravel(self.x_adv)]),
               "final_radius": (float(self.final_verdict.radius)
                                if self.final_verdict is not None else None),
               "recheck_rank": self.recheck_rank,
               "balls": 0 if self.ledger is None else len(self.ledger),
               "last_snapshot": self.last_snapshot}
        if sample_id is not None:
            doc["sample_id"] = sample_id
        return doc


# ---------------------------------------------------------------------------
# shared plumbing

def _recheck_config(cfg, n=None):
    return SmoothingConfig(sigma=cfg.sigma,
                           n_samples=n if n is not None else 10 * cfg.n_samples,
                           alpha=cfg.alpha, seed=cfg.seed)


def _evaluators(model, loop_cfg, recheck_n, evaluator, recheck_evaluator):
    ev = evaluator if evaluator is not None else SmoothedEvaluator(
        model, loop_cfg)
    if recheck_evaluator is not None:
        rev = recheck_evaluator
    elif evaluator is not None:
        rev = evaluator  # deterministic evaluators certify exactly once
    else:
        rev = SmoothedEvaluator(model, _recheck_config(loop_cfg, recheck_n))
    return ev, rev


def _unit_or_fallback(g, seed, tag, flags, row):
    """Normalized gradient; seeded random unit direction below the floor."""
    n = float(np.linalg.norm(g))
    if n >= _GRAD_FLOOR:
        return g / n
    rng = np.random.default_rng(np.random.SeedSequence((seed, 777, tag)))
    v = rng.standard_normal(g.size)
    row["grad_fallback"] = True
    if "grad-fallback" not in flags:
        flags.append("grad-fallback")
    return v / np.linalg.norm(v)


def _snapshot(snapshots, x, x0, verdict, i):
    """Record a candidate point; a zero perturbation is never a candidate."""
    norm = float(np.linalg.norm(x - x0))
    if norm <= 0.0:
        return False
    snapshots.append({"x": x.copy(), "norm": norm,
                      "class": int(verdict.top_class),
                      "radius": float(verdict.radius), "iter": int(i)})
    return True


def _best_confident(snapshots, rev, c0, model_shape):
    """Fresh high-budget verdicts over the best few snapshots.

    Candidates are tried smallest recorded norm first (ties to the earlier
    iterate); the first one whose fresh verdict flips the class with a
    positive radius wins.
    """
    order = sorted(range(len(snapshots)),
                   key=lambda k: (snapshots[k]["norm"], snapshots[k]["iter"]))
    for rank, idx in enumerate(order[:_MAX_RECHECKS]):
        snap = snapshots[idx]
        verdict = rev.certify(snap["x"].reshape(model_shape),
                              key=_RECHECK_KEY + rank)
        if verdict.top_class != c0 and verdict.radius > 0:
            return snap, verdict, rank
    return None, None, None


def _failure(c0, iterations, t0, trace, flags, method, ledger=None,
             last_snapshot=None):
    return AttackResult(success=False, x_adv=None, norm=0.0, adv_class=None,
                        original_class=c0, iterations=iterations,
                        confident=False, elapsed=time.perf_counter() - t0,
                        trace=trace, flags=flags, method=method,
                        ledger=ledger, last_snapshot=last_snapshot)


def _finish(snapshots, rev, c0, shape, iterations, t0, trace, flags, method,
            ledger=None):
    last = None
    if snapshots:
        s = snapshots[-1]
        last = {"norm": s["norm"], "iter": s["iter"], "class": s["class"],
                "radius": s["radius"]}
    best, verdict, rank = (None, None, None) if not snapshots else (
        _best_confident(snapshots, rev, c0, shape))
    if best is None:
        return _failure(c0, iterations, t0, trace, flags, method,
                        ledger=ledger, last_snapshot=last)
    x_adv = best["x"].reshape(shape)
    return AttackResult(success=True, x_adv=x_adv,
                        norm=float(best["norm"]),
                        adv_class=int(verdict.top_class), original_class=c0,
                        iterations=iterations, confident=True,
                        elapsed=time.perf_counter() - t0, trace=trace,
                        flags=flags, method=method, final_verdict=verdict,
                        ledger=ledger, last_snapshot=last,
                        recheck_rank=rank)


def _margin_gradient(y_node, x_node, top, second):
    margin = ad.sub(ad.take(y_node, top), ad.take(y_node, second))
    return ad.gradient(margin, x_node).array.reshape(-1)


# ---------------------------------------------------------------------------
# certification-aware attack

def caa_attack(model, x0, cfg, evaluator=None, recheck_evaluator=None,
               original_class=None):
    """Two-phase certificate-guided search for a confident adversarial point.

    Phase 1 (prediction unchanged): descend the expectation gap |E0 - E1|,
    sizing each step to clear the union of all recorded same-class balls
    (grown by delta_grow, clipped to [eps_min, eps_max]); without a live
    certificate the step falls back to eps_min. Phase 2 (prediction
    flipped): a zero-radius verdict triggers a confidence-repair step up the
    new class's margin, otherwise the point is snapshotted and contracted
    toward x0 by min(stay_radius, eps_max)*(1 - delta_shrink), which keeps
    it inside already-certified adversarial territory.

    The returned point is the smallest-norm snapshot that passes a fresh
    high-sample certification; per-iterate balls, verdict summaries, and
    step diagnostics land in result.trace / result.ledger.
    """
    t0 = time.perf_counter()
    shape = np.asarray(x0, dtype=np.float64).shape
    x0f = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    ev, rev = _evaluators(model, cfg.smoothing, cfg.recheck_n, evaluator,
                          recheck_evaluator)
    x = x0f.copy()
    c0 = None if original_class is None else int(original_class)
    ledger = None
    snapshots, trace, flags = [], [], []
    iterations = 0
    try:
        for i in range(cfg.max_iters):
            verdict, x_node, y_node = ev.evaluate(x.reshape(shape), key=i)
            iterations = i + 1
            if c0 is None:
                c0 = int(verdict.top_class)
            if i == 0 and verdict.top_class != c0:
                flags.append("clean-misclassified")
                return _failure(c0, iterations, t0, trace, flags, "caa")
            if ledger is None:
                ledger = BallLedger(original_class=c0)
            ledger.append(CertifiedBall(center=x.copy(),
                                        radius=float(verdict.radius),
                                        class_label=int(verdict.top_class),
                                        step_index=i))
            row = {"iter": i, "class": int(verdict.top_class),
                   "radius": float(verdict.radius),
                   "E0": float(verdict.E0), "E1": float(verdict.E1),
                   "E0_lower": float(verdict.E0_lower),
                   "E1_upper": float(verdict.E1_upper),
                   "norm": float(np.linalg.norm(x - x0f)),
                   "point": x.copy()}
            if verdict.top_class == c0:
                row["phase"] = 1
                g = _margin_gradient(y_node, x_node, verdict.top_class,
                                     verdict.second_class)
                direction = _unit_or_fallback(g, cfg.seed, i, flags, row)
                if verdict.E0_lower > verdict.E1_upper:
                    er = exit_radius(ledger, x, direction)
                    eps_raw = max(float(er), float(verdict.radius)) \
                        * (1.0 + cfg.delta_grow)
                    eps = clip_step(eps_raw, cfg.eps_min, cfg.eps_max)
                    row["exit_radius"] = float(er)
                    row["saturated"] = bool(er.saturated)
                    row["clipped"] = bool(eps != eps_raw)
                else:
                    eps = cfg.eps_min
                    row["clipped"] = False
                row["eps"] = eps
                x_new = project(x - eps * direction)
            elif verdict.radius > 0:
                row["phase"] = 2
                row["snapshot"] = _snapshot(snapshots, x, x0f, verdict, i)
                home = x - x0f
                dist = float(np.linalg.norm(home))
                if dist < _GRAD_FLOOR:
                    trace.append(row)
                    flags.append("stalled")
                    break
                direction = home / dist
                sr = stay_radius(ledger, x, direction)
                step = min(min(float(sr), cfg.eps_max)
                           * (1.0 - cfg.delta_shrink), dist)
                row["stay_radius"] = float(sr)
                row["eps"] = step
                x_new = project(x - step * direction)
            else:
                row["phase"] = 2
                row["repair"] = True
                g = _margin_gradient(y_node, x_node, verdict.top_class,
                                     verdict.second_class)
                direction = _unit_or_fallback(g, cfg.seed, i, flags, row)
                row["eps"] = cfg.eps_min
                x_new = project(x + cfg.eps_min * direction)
            trace.append(row)
            if np.linalg.norm(x_new - x) < 1e-15:
                flags.append("stalled")
                break
            x = x_new
        if not snapshots:
            # the loop certifies points before stepping, so with small
            # budgets the last step's landing point was never examined
            verdict = rev.certify(x.reshape(shape), key=_RECHECK_KEY - 1)
            if verdict.top_class != c0 and verdict.radius > 0:
                _snapshot(snapshots, x, x0f, verdict, iterations)
    except ValueError:
        if iterations == 0:
            raise  # bad inputs, not a mid-attack numeric blowup
        flags.append("non-finite")
        return _failure(c0 if c0 is not None else -1, iterations, t0, trace,
                        flags, "caa", ledger=ledger)
    return _finish(snapshots, rev, c0, shape, iterations, t0, trace, flags,
                   "caa", ledger=ledger)


# ---------------------------------------------------------------------------
# baselines on the expectation surface

def pgd_attack(model, x0, label, eps_step, iters, cfg, recheck_n=None,
               evaluator=None, recheck_evaluator=None, seed=0):
    """Normalized-gradient ascent on cross-entropy of the expectations.

    Fixed step length eps_step, box projection each iterate. Every iterate
    whose verdict already flips the class with positive radius is kept as a
    candidate; the smallest-norm candidate faces the fresh final check.
    """
    if eps_step <= 0:
        raise ValueError("eps_step must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    t0 = time.perf_counter()
    shape = np.asarray(x0, dtype=np.float64).shape
    x0f = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    label = int(label)
    ev, rev = _evaluators(model, cfg, recheck_n, evaluator,
                          recheck_evaluator)
    x = x0f.copy()
    snapshots, trace, flags = [], [], []
    iterations = 0
    try:
        for i in range(iters):
            verdict, x_node, y_node = ev.evaluate(x.reshape(shape), key=i)
            iterations = i + 1
            row = {"iter": i, "class": int(verdict.top_class),
                   "radius": float(verdict.radius),
                   "norm": float(np.linalg.norm(x - x0f)),
                   "point": x.copy()}
            if verdict.top_class != label and verdict.radius > 0:
                row["snapshot"] = _snapshot(snapshots, x, x0f, verdict, i)
            # J = -log E[label]; ascend J to push mass off the true class
            p = ad.maximum_scalar(ad.take(y_node, label), _PROB_FLOOR)
            g = ad.gradient(ad.neg(ad.log(p)), x_node).array.reshape(-1)
            direction = _unit_or_fallback(g, seed, i, flags, row)
            trace.append(row)
            x = project(x + eps_step * direction)
        verdict = rev.certify(x.reshape(shape), key=_RECHECK_KEY - 1)
        if verdict.top_class != label and verdict.radius > 0:
            _snapshot(snapshots, x, x0f, verdict, iters)
    except ValueError:
        if iterations == 0:
            raise
        flags.append("non-finite")
        return _failure(label, iterations, t0, trace, flags, "pgd")
    return _finish(snapshots, rev, label, shape, iterations, t0, trace,
                   flags, "pgd")


def cw_attack(model, x0, label, c, kappa, steps, lr, cfg, recheck_n=None,
              evaluator=None, recheck_evaluator=None):
    """Plain gradient descent on ||x'-x0||^2 + c*max(E[true]-max E[other], -kappa).

    No change of variables; the box is enforced by projection after each
    step. With c=0 the objective is pure distance and the iterate never
    leaves x0.
    """
    if c < 0:
        raise ValueError("c must be nonnegative")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if steps < 1 or lr <= 0:
        raise ValueError("need steps >= 1 and lr > 0")
    t0 = time.perf_counter()
    shape = np.asarray(x0, dtype=np.float64).shape
    x0f = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    label = int(label)
    others = [j for j in range(model.n_classes) if j != label]
    ev, rev = _evaluators(model, cfg, recheck_n, evaluator,
                          recheck_evaluator)
    x = x0f.copy()
    snapshots, trace, flags = [], [], []
    iterations = 0
    try:
        for i in range(steps):
            verdict, x_node, y_node = ev.evaluate(x.reshape(shape), key=i)
            iterations = i + 1
            row = {"iter": i, "class": int(verdict.top_class),
                   "radius": float(verdict.radius),
                   "norm": float(np.linalg.norm(x - x0f)),
                   "point": x.copy()}
            if verdict.top_class != label and verdict.radius > 0:
                row["snapshot"] = _snapshot(snapshots, x, x0f, verdict, i)
            delta = ad.sub(x_node, ad.constant(x0f.reshape(shape)))
            nsq = ad.reduce_sum(ad.mul(delta, delta))
            margin = ad.sub(ad.take(y_node, label),
                            ad.reduce_max(ad.take(y_node, others)))
            hinge = ad.maximum_scalar(margin, -kappa)
            obj = ad.add(nsq, ad.mul(hinge, np.float64(c)))
            g = ad.gradient(obj, x_node).array.reshape(-1)
            row["objective"] = float(obj.a)
            trace.append(row)
            x = project(x - lr * g)
        verdict = rev.certify(x.reshape(shape), key=_RECHECK_KEY - 1)
        if verdict.top_class != label and verdict.radius > 0:
            _snapshot(snapshots, x, x0f, verdict, steps)
    except ValueError:
        if iterations == 0:
            raise
        flags.append("non-finite")
        return _failure(label, iterations, t0, trace, flags, "cw")
    return _finish(snapshots, rev, label, shape, iterations, t0, trace,
                   flags, "cw")


def deepfool_attack(model, x0, iters, cfg, overshoot=1.02, recheck_n=None,
                    evaluator=None, recheck_evaluator=None,
                    original_class=None):
    """Linearized closest-boundary steps over the K expectation components.

    Classic stopping rule: the loop ends at the first argmax flip. The
    flipped point only becomes a success if it also carries a positive
    certified radius under the fresh final check.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if overshoot < 1:
        raise ValueError("overshoot must be >= 1")
    t0 = time.perf_counter()
    shape = np.asarray(x0, dtype=np.float64).shape
    x0f = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    ev, rev = _evaluators(model, cfg, recheck_n, evaluator,
                          recheck_evaluator)
    x = x0f.copy()
    c0 = None if original_class is None else int(original_class)
    snapshots, trace, flags = [], [], []
    iterations = 0
    crossed = False
    try:
        for i in range(iters):
            verdict, x_node, y_node = ev.evaluate(x.reshape(shape), key=i)
            iterations = i + 1
            if c0 is None:
                c0 = int(verdict.top_class)
            row = {"iter": i, "class": int(verdict.top_class),
                   "radius": float(verdict.radius),
                   "norm": float(np.linalg.norm(x - x0f)),
                   "point": x.copy()}
            if verdict.top_class != c0:
                # terminal crossing; the fresh final check decides whether
                # its confidence holds, even if the cheap verdict said r=0
                crossed = True
                row["snapshot"] = _snapshot(snapshots, x, x0f, verdict, i)
                trace.append(row)
                break
            # closest linearized boundary among the other classes; values and
            # slopes both come off the soft surface so the local model is a
            # consistent linearization of one function (the hard verdict
            # above still decides crossings)
            soft = y_node.a
            best = None
            for j in range(model.n_classes):
                if j == c0:
                    continue
                w = _margin_gradient(y_node, x_node, j, c0)
                wn = float(np.linalg.norm(w))
                fj = float(soft[j] - soft[c0])
                ratio = abs(fj) / max(wn, _GRAD_FLOOR)
                if best is None or ratio < best[0]:
                    best = (ratio, j, fj, w, wn)
            _, j_star, f_star, w_star, wn_star = best
            row["target"] = j_star
            if wn_star < _GRAD_FLOOR:
                direction = _unit_or_fallback(w_star, cfg.seed, i, flags,
                                              row)
                pert = (abs(f_star) + 1e-8) * direction
            else:
                pert = (abs(f_star) + 1e-8) / (wn_star ** 2) * w_star
            trace.append(row)
            x = project(x + overshoot * pert)
        if not crossed:
            verdict = rev.certify(x.reshape(shape), key=_RECHECK_KEY - 1)
            if c0 is not None and verdict.top_class != c0 \
                    and verdict.radius > 0:
                _snapshot(snapshots, x, x0f, verdict, iterations)
    except ValueError:
        if iterations == 0:
            raise
        flags.append("non-finite")
        return _failure(c0 if c0 is not None else -1, iterations, t0, trace,
                        flags, "deepfool")
    return _finish(snapshots, rev, c0, shape, iterations, t0, trace, flags,
                   "deepfool")


def confident(model, x_adv, x0, cfg, original_class=None, evaluator=None):
    """Strict success test: fresh certification at x_adv flips the argmax
    away from x0's class and reports a positive radius."""
    ev = evaluator if evaluator is not None else SmoothedEvaluator(model, cfg)
    if original_class is None:
        original_class = ev.certify(np.asarray(x0, dtype=np.float64),
                                    key=_CONFIDENT_KEY + 1).top_class
    verdict = ev.certify(np.asarray(x_adv, dtype=np.float64),
                         key=_CONFIDENT_KEY)
    return bool(verdict.top_class != int(original_class)
                and verdict.radius > 0)
