"""Interval bound propagation for the small sequential nets.

Propagates elementwise input intervals through linear/conv/relu layers in
center-radius form (mu = W c + b, rho = |W| r), verifies label stability
over an l-infinity box, and searches the largest verifiable box radius by
bisection. The attack side consumes that radius as the inscribed l2 ball,
so the same ball-union machinery applies unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Conv2d, Flatten, Linear, ReLU

__all__ = ["IntervalBox", "propagate", "ibp_verify", "ibp_radius",
           "IbpEvaluator"]


@dataclass
class IntervalBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        up = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != up.shape:
            raise ValueError("lower/upper shapes differ: %s vs %s"
                             % (lo.shape, up.shape))
        if np.any(lo > up + 1e-12):
            raise ValueError("lower bound exceeds upper bound")
        self.lower, self.upper = lo, up


def propagate(model, box):
    """Push an input IntervalBox through every layer; returns the logit box."""
    lo = box.lower[None]
    up = box.upper[None]
    for layer in model.layers:
        if isinstance(layer, Linear):
            c, r = 0.5 * (lo + up), 0.5 * (up - lo)
            mu = c @ layer.w + layer.b
            rho = r @ np.abs(layer.w)
            lo, up = mu - rho, mu + rho
        elif isinstance(layer, Conv2d):
            c, r = 0.5 * (lo + up), 0.5 * (up - lo)
            mu = ad.conv2d_np(c, layer.w, layer.b)
            rho = ad.conv2d_np(r, np.abs(layer.w), np.zeros(layer.w.shape[0]))
            lo, up = mu - rho, mu + rho
        elif isinstance(layer, ReLU):
            lo, up = np.maximum(lo, 0.0), np.maximum(up, 0.0)
        elif isinstance(layer, Flatten):
            lo, up = lo.reshape(lo.shape[0], -1), up.reshape(up.shape[0], -1)
        else:  # pragma: no cover - architectures are fixed
            raise ValueError("unsupported layer %r" % (type(layer).__name__,))
    return IntervalBox(lower=lo[0], upper=up[0])


def ibp_verify(model, x, eps, label=None):
    """True iff the predicted class provably dominates every other class over
    the box [x - eps, x + eps] intersected with [0,1]^d (strict dominance)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    logits = model.logits_np(x)
    pred = int(np.argmax(logits)) if label is None else int(label)
    box = IntervalBox(lower=np.clip(x - eps, 0.0, 1.0),
                      upper=np.clip(x + eps, 0.0, 1.0))
    out = propagate(model, box)
    others = np.delete(out.upper, pred)
    return bool(out.lower[pred] > np.max(others))


def ibp_radius(model, x, tol=1e-4, label=None):
    """Largest verifiable eps on [0,1] to tolerance `tol`, via bisection.

    ibp_verify is monotone in eps (box nesting), so bisection brackets the
    boundary; the verified (lower) end is returned. A point misclassified
    w.r.t. `label`, or sitting on an exact logit tie, gets radius 0.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=np.float64)
    if label is not None and int(np.argmax(model.logits_np(x))) != int(label):
        return 0.0
    if not ibp_verify(model, x, 0.0):
        return 0.0
    if ibp_verify(model, x, 1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ibp_verify(model, x, mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class IbpVerdict:
    """Deterministic stand-in for a smoothing verdict on IBP-certified models.

    Class expectations are exact softmax probabilities (no Monte-Carlo
    error), so the "bounds" coincide with the point values. The radius is
    the l2 ball inscribed in the largest verifiable l-infinity box.
    """

    y: np.ndarray
    top_class: int
    E0: float
    E1: float
    E0_lower: float
    E1_upper: float
    radius: float

    @property
    def second_class(self):
        order = np.argsort(-self.y, kind="stable")
        return int(order[1])

    def to_json(self, sample_id=None):
        doc = {"y": [float(v) for v in self.y],
               "top_class": int(self.top_class),
               "E0": float(self.E0), "E1": float(self.E1),
               "E0_lower": float(self.E0_lower),
               "E1_upper": float(self.E1_upper),
               "radius": float(self.radius)}
        if sample_id is not None:
            doc["sample_id"] = sample_id
        return doc


class IbpEvaluator:
    """Attack-facing evaluation of a deterministic IBP-certified model.

    Mirrors SmoothedEvaluator's interface; gradients come straight off the
    logit tape (no smoothing head, no noise).
    """

    kind = "ibp"

    def __init__(self, model, tol=1e-4):
        self.model = model
        self.tol = tol

    def _verdict(self, x):
        probs = ad.softmax_np(self.model.logits_np(x))
        order = np.argsort(-probs, kind="stable")
        top, second = int(order[0]), int(order[1])
        radius = ibp_radius(self.model, x, tol=self.tol)
        return IbpVerdict(y=probs, top_class=top, E0=float(probs[top]),
                          E1=float(probs[second]),
                          E0_lower=float(probs[top]),
                          E1_upper=float(probs[second]), radius=radius)

    def evaluate(self, x, key=None):
        x = np.asarray(x, dtype=np.float64)
        verdict = self._verdict(x)
        x_node = ad.leaf(x)
        batched = ad.reshape(x_node, (1,) + self.model.input_shape)
        y_node = ad.reshape(
            ad.softmax(self.model.forward_node(batched), axis=-1),
            (self.model.n_classes,))
        return verdict, x_node, y_node

    def certify(self, x, key=None):
        return self._verdict(np.asarray(x, dtype=np.float64))
