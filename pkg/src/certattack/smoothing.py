"""Randomized-smoothing certification.

Monte-Carlo class expectations under Gaussian input noise, Goodman (1965)
simultaneous multinomial confidence bounds, and the Cohen-style certified
radius r = (sigma/2) * (ppf(E0_lower) - ppf(E1_upper)).

Per noise draw the hard class is argmax(logits + g) with g standard Gumbel,
an exact Categorical(pi) sample (Gumbel-max), so the class-count vector is a
true multinomial and the Goodman preconditions hold. The differentiable soft
expectation (mean Gumbel-Softmax) shares the same draws, giving consistent
gradients for attack objectives. Confidence-bound computation never touches
the tape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, norm

from . import autodiff as ad

__all__ = [
    "SmoothingConfig", "SmoothedVerdict", "SmoothedEvaluator",
    "expectations", "goodman_intervals", "goodman_bounds", "cohen_radius",
    "certify",
]

# ppf diverges at 0/1; bounds are clamped into this closed interval first.
# Clamping E0_lower down and E1_upper up both shrink the radius, so the
# reported certificate stays conservative.
PPF_CLAMP = 1e-12


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    n_samples: int = 1000
    alpha: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0,1)")


@dataclass
class SmoothedVerdict:
    """Certification outcome at one point."""

    y: np.ndarray          # empirical class distribution, counts / N
    top_class: int
    E0: float              # top expectation
    E1: float              # runner-up expectation
    E0_lower: float        # simultaneous lower bound on E0
    E1_upper: float        # simultaneous upper bound on E1
    radius: float
    sigma: float
    n_samples: int
    alpha: float
    seed: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if abs(y.sum() - 1.0) > 1e-9:
            raise ValueError("y must sum to 1")
        if not (1.0 + 1e-12 >= self.E0 >= self.E1 >= 0.0):
            raise ValueError("expectations must satisfy 1 >= E0 >= E1 >= 0")
        if self.E0_lower > self.E0 + 1e-12:
            raise ValueError("E0_lower must not exceed E0")
        if self.E1_upper < self.E1 - 1e-12:
            raise ValueError("E1_upper must not fall below E1")
        if self.E0_lower <= self.E1_upper and self.radius != 0.0:
            raise ValueError("radius must be 0 when bounds overlap")
        self.y = y

    @property
    def second_class(self):
        order = np.argsort(-self.y, kind="stable")
        return int(order[1])

    def to_json(self, sample_id=None):
        doc = {
            "y": [float(v) for v in self.y],
            "top_class": int(self.top_class),
            "E0": float(self.E0), "E1": float(self.E1),
            "E0_lower": float(self.E0_lower), "E1_upper": float(self.E1_upper),
            "radius": float(self.radius),
            "sigma": float(self.sigma), "n_samples": int(self.n_samples),
            "alpha": float(self.alpha), "seed": int(self.seed),
        }
        if sample_id is not None:
            doc["sample_id"] = sample_id
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(y=np.asarray(doc["y"]), top_class=doc["top_class"],
                   E0=doc["E0"], E1=doc["E1"], E0_lower=doc["E0_lower"],
                   E1_upper=doc["E1_upper"], radius=doc["radius"],
                   sigma=doc["sigma"], n_samples=doc["n_samples"],
                   alpha=doc["alpha"], seed=doc["seed"])

    def dumps(self, sample_id=None):
        return json.dumps(self.to_json(sample_id), sort_keys=True)


# ---------------------------------------------------------------------------
# confidence bounds

def goodman_intervals(counts, n, alpha):
    """Simultaneous two-sided confidence intervals for multinomial proportions.

    Goodman's construction: with q the (1 - alpha/K) quantile of chi-square
    with one degree of freedom, each class proportion p = count/n receives

        [ q + 2*count -+ sqrt(q^2 + 4*count*q*(1 - p)) ] / (2*(n + q))

    All K intervals hold jointly with probability at least 1 - alpha.
    `counts` may carry leading batch axes; the last axis indexes classes.
    Returns (lower, upper) arrays shaped like counts.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0,1)")
    k = counts.shape[-1]
    q = float(chi2.ppf(1.0 - alpha / k, df=1))
    p = counts / n
    root = np.sqrt(q * q + 4.0 * counts * q * (1.0 - p))
    lower = (q + 2.0 * counts - root) / (2.0 * (n + q))
    upper = (q + 2.0 * counts + root) / (2.0 * (n + q))
    return lower, upper


def _top_two(y):
    order = np.argsort(-np.asarray(y), kind="stable")  # ties -> lowest index
    return int(order[0]), int(order[1])


def goodman_bounds(y, n, alpha):
    """(lower bound of the largest class, upper bound of the runner-up).

    `y` must be an empirical distribution of n draws: n*y is checked to be
    integral to 1e-6, because the bounds are only valid for genuine counts.
    """
    y = np.asarray(y.array if isinstance(y, ad.Tensor) else y,
                   dtype=np.float64)
    counts = y * n
    rounded = np.round(counts)
    if np.max(np.abs(counts - rounded)) > 1e-6:
        raise ValueError("n*y is not near-integer; Goodman bounds need counts")
    lower, upper = goodman_intervals(rounded, n, alpha)
    top, second = _top_two(y)
    return float(lower[top]), float(upper[second])


def cohen_radius(E0_lower, E1_upper, sigma):
    """Certified l2 radius (sigma/2) * (ppf(E0_lower) - ppf(E1_upper)).

    Zero whenever the bounds overlap. Bounds equal to exactly 0 or 1 are
    nudged inward by PPF_CLAMP to keep the inverse normal CDF finite.
    """
    if not 0.0 <= E0_lower <= 1.0 or not 0.0 <= E1_upper <= 1.0:
        raise ValueError("bounds must lie in [0,1]")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if E0_lower <= E1_upper:
        return 0.0
    lo = min(max(E0_lower, PPF_CLAMP), 1.0 - PPF_CLAMP)
    hi = min(max(E1_upper, PPF_CLAMP), 1.0 - PPF_CLAMP)
    r = 0.5 * sigma * (norm.ppf(lo) - norm.ppf(hi))
    return float(max(r, 0.0))


# ---------------------------------------------------------------------------
# Monte-Carlo evaluation (chunk-streamed; fixed chunk size => fixed bits)

def _rng_for(cfg, key):
    if key is None:
        ss = np.random.SeedSequence(cfg.seed)
    else:
        ss = np.random.SeedSequence((cfg.seed, int(key)))
    return np.random.default_rng(ss)


def _chunk_sizes(n):
    sizes = [ad.CHUNK] * (n // ad.CHUNK)
    if n % ad.CHUNK:
        sizes.append(n % ad.CHUNK)
    return sizes


def _stream_values(model, x, cfg, key):
    """One pass over the N draws: (soft expectation, hard class counts).

    Draw order per chunk is noise block then Gumbel block; both the order and
    the chunk size are part of the bit-reproducibility contract.
    """
    rng = _rng_for(cfg, key)
    k = model.n_classes
    head = model.head
    soft_sum = np.zeros(k)
    counts = np.zeros(k, dtype=np.int64)
    for b in _chunk_sizes(cfg.n_samples):
        eta = rng.standard_normal((b,) + model.input_shape) * cfg.sigma
        logits = model.forward_np(x[None] + eta)
        if not np.all(np.isfinite(logits)):
            raise ValueError("model produced non-finite logits under noise")
        if head.enabled:
            g = rng.gumbel(size=(b, k))
            soft = ad.softmax_np((ad.log_softmax_np(logits) + g) / head.tau)
            hard = np.argmax(logits + g, axis=1)
        else:
            soft = None
            hard = np.argmax(logits, axis=1)
        chunk_counts = np.bincount(hard, minlength=k)
        counts += chunk_counts
        soft_sum += soft.sum(axis=0) if soft is not None else chunk_counts
    return soft_sum / cfg.n_samples, counts


def _stream_vjp(model, x, cfg, key, gy):
    """Gradient of sum(gy * soft_expectation) w.r.t. x.

    Replays the same draws chunk by chunk on short-lived tapes, so memory
    stays bounded by one chunk regardless of N.
    """
    head = model.head
    if not head.enabled:
        return np.zeros_like(x)  # hard indicator head: piecewise constant
    rng = _rng_for(cfg, key)
    k = model.n_classes
    acc = np.zeros_like(x)
    inv_n = 1.0 / cfg.n_samples
    for b in _chunk_sizes(cfg.n_samples):
        eta = rng.standard_normal((b,) + model.input_shape) * cfg.sigma
        g = rng.gumbel(size=(b, k))
        x_leaf = ad.leaf(x)
        xb = ad.add(x_leaf, ad.constant(eta))
        logits = model.forward_node(xb)
        logpi = ad.log_softmax(logits, axis=-1)
        soft = ad.softmax(ad.mul(ad.add(logpi, ad.constant(g)),
                                 1.0 / head.tau), axis=-1)
        weighted = ad.mul(soft, ad.constant(np.broadcast_to(gy, (b, k))))
        obj = ad.mul(ad.reduce_sum(weighted), inv_n)
        acc += ad.gradient(obj, x_leaf).array
    return acc


def _verdict_from_counts(counts, cfg, key):
    n = int(counts.sum())
    y = counts / n
    top, second = _top_two(y)
    e0, e1 = float(y[top]), float(y[second])
    lo, up = goodman_bounds(y, n, cfg.alpha)
    r = cohen_radius(lo, up, cfg.sigma)
    return SmoothedVerdict(y=y, top_class=top, E0=e0, E1=e1, E0_lower=lo,
                           E1_upper=up, radius=r, sigma=cfg.sigma,
                           n_samples=n, alpha=cfg.alpha,
                           seed=cfg.seed if key is None else int(key))


def _check_domain(model, x):
    x = np.asarray(x.array if isinstance(x, ad.Tensor) else x,
                   dtype=np.float64)
    if tuple(x.shape) != model.input_shape:
        raise ValueError("input shape %s, expected %s"
                         % (x.shape, model.input_shape))
    if x.min() < -1e-9 or x.max() > 1.0 + 1e-9:
        raise ValueError("input outside [0,1] domain")
    return x


def expectations(model, x, cfg, key=None):
    """Differentiable Monte-Carlo expectation (1/N) sum_j head(f(x + eta_j)).

    Returns a Node whose single parent is the input leaf for x; gradients
    w.r.t. x reuse the same N draws (noise treated as constant). Backward
    streams the draws again instead of retaining per-draw activations.
    """
    x = _check_domain(model, x)
    soft, _ = _stream_values(model, x, cfg, key)
    x_node = ad.leaf(x)

    def bw(gy):
        return (_stream_vjp(model, x, cfg, key, gy),)

    return ad.Node(soft, (x_node,), bw)


def certify(model, x, cfg, key=None):
    """Predict-and-certify: empirical counts -> Goodman bounds -> radius.

    Pure array computation; nothing here joins the differentiation tape.
    """
    x = _check_domain(model, x)
    _, counts = _stream_values(model, x, cfg, key)
    return _verdict_from_counts(counts, cfg, key)


class SmoothedEvaluator:
    """One-stop per-iterate evaluation for attacks on the smoothed model.

    evaluate() runs the Monte-Carlo pass once and returns the certification
    verdict together with tape handles (input leaf, soft expectation node)
    sharing those same draws.
    """

    kind = "smoothed"

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg

    def evaluate(self, x, key=None):
        x = _check_domain(self.model, x)
        soft, counts = _stream_values(self.model, x, self.cfg, key)
        verdict = _verdict_from_counts(counts, self.cfg, key)
        x_node = ad.leaf(x)
        cfg, model = self.cfg, self.model

        def bw(gy):
            return (_stream_vjp(model, x, cfg, key, gy),)

        y_node = ad.Node(soft, (x_node,), bw)
        return verdict, x_node, y_node

    def certify(self, x, key=None):
        return certify(self.model, x, self.cfg, key)
