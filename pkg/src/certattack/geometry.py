"""Ball-union geometry for certification-aware stepping.

The attack accumulates certified balls (center, l2 radius, class). Two ray
queries drive its step sizes: the first exit of the projected ray from the
union of same-class balls (how far to jump to leave certified-safe ground),
and the escape point of the union of adversarial-class balls when walking
home toward the clean input (how far one can contract while provably staying
adversarial). Points along the ray are always projected onto the box, so the
path bends at the boundary; both queries bisect along the ray parameter.

The union of balls along a projected ray is nonconvex, so plain bisection
from an arbitrary bracket could latch onto a disconnected component. The
march below only ever advances by the largest certified margin of a ball
containing the current point; the projection is 1-Lipschitz, so such a step
provably cannot leave that ball. Near-tangential stalls fall back to a fixed
small probe. The marched prefix is therefore connected, and the final
bisection refines the true first boundary crossing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CertifiedBall", "BallLedger", "ExitRadius", "StayRadius",
    "project", "exit_radius", "stay_radius", "clip_step",
]

TOL = 1e-6
_PROBE = 1e-5       # stall-breaking step, well below any sane ball radius
_MAX_STEPS = 1_000_000


@dataclass(frozen=True, eq=False)
class CertifiedBall:
    center: np.ndarray
    radius: float
    class_label: int
    step_index: int

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if c.min() < -1e-9 or c.max() > 1.0 + 1e-9:
            raise ValueError("ball center must lie in [0,1]^d")
        object.__setattr__(self, "center", c)

    def to_json(self):
        return {"center": [float(v) for v in self.center.reshape(-1)],
                "radius": float(self.radius),
                "class_label": int(self.class_label),
                "step_index": int(self.step_index)}


@dataclass
class BallLedger:
    """Accumulated certificates of one attack run, split by class."""

    original_class: int
    balls: list = field(default_factory=list)
    _last_step: int = field(default=-1, repr=False)

    def append(self, ball):
        if ball.step_index <= self._last_step:
            raise ValueError("step_index must be strictly increasing "
                             "(%d after %d)" % (ball.step_index,
                                                self._last_step))
        self._last_step = ball.step_index
        if ball.radius > 0.0:  # zero-radius balls constrain nothing
            self.balls.append(ball)

    def __len__(self):
        return len(self.balls)

    def _arrays(self, same_class):
        sel = [b for b in self.balls
               if (b.class_label == self.original_class) == same_class]
        if not sel:
            return np.empty((0, 0)), np.empty(0)
        centers = np.stack([b.center.reshape(-1) for b in sel])
        radii = np.array([b.radius for b in sel])
        return centers, radii

    def same_class_arrays(self):
        return self._arrays(True)

    def adversarial_arrays(self):
        return self._arrays(False)

    def to_json(self):
        return {"original_class": int(self.original_class),
                "balls": [b.to_json() for b in self.balls]}

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


class ExitRadius(float):
    """float result with a .saturated flag (no exit found inside the box)."""

    def __new__(cls, value, saturated=False):
        obj = super().__new__(cls, value)
        obj.saturated = saturated
        return obj


class StayRadius(float):
    """float result with an .outside flag (start point not in the union)."""

    def __new__(cls, value, outside=False):
        obj = super().__new__(cls, value)
        obj.outside = outside
        return obj


def project(x):
    """Projection onto the feasible box [0,1]^d."""
    if hasattr(x, "array"):
        x = x.array
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)


def clip_step(eps, eps_min, eps_max):
    if not 0 < eps_min <= eps_max:
        raise ValueError("need 0 < eps_min <= eps_max, got (%g, %g)"
                         % (eps_min, eps_max))
    return float(min(max(eps, eps_min), eps_max))


def _check_direction(direction):
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(d)
    if abs(n - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector (norm %g)" % n)
    return d


def _first_union_exit(x, direction, centers, radii, cap):
    """Smallest rho in [0, cap] with project(x - rho*direction) outside all
    balls. Returns (rho, saturated). Caller guarantees the start is inside."""

    def gap(rho):
        p = np.clip(x - rho * direction, 0.0, 1.0)
        return np.max(radii - np.linalg.norm(centers - p, axis=1))

    lo, hi = 0.0, None
    rho = 0.0
    for _ in range(_MAX_STEPS):
        g = gap(rho)
        step = g if g > _PROBE else _PROBE
        nxt = rho + step
        if nxt >= cap:
            if gap(cap) >= 0.0:
                return cap, True
            lo, hi = rho, cap
            break
        if gap(nxt) >= 0.0:
            lo = rho = nxt
        else:
            lo, hi = rho, nxt
            break
    else:
        raise RuntimeError("union march failed to terminate")
    while hi - lo > TOL:
        mid = 0.5 * (lo + hi)
        if gap(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), False


def exit_radius(ledger, x_i, direction):
    """First exit of the projected ray rho -> P(x_i - rho*direction) from the
    union of same-class balls. 0 if the start point is already outside (or
    the ledger holds no same-class balls); the box diameter sqrt(d) with
    saturated=True when the projected ray never leaves the union."""
    x = np.asarray(x_i, dtype=np.float64).reshape(-1)
    direction = _check_direction(direction)
    centers, radii = ledger.same_class_arrays()
    if len(radii) == 0:
        return ExitRadius(0.0)
    cap = float(np.sqrt(x.size))
    start_gap = np.max(radii - np.linalg.norm(
        centers - np.clip(x, 0.0, 1.0), axis=1))
    if start_gap < 0.0:
        return ExitRadius(0.0)
    rho, saturated = _first_union_exit(x, direction, centers, radii, cap)
    return ExitRadius(rho, saturated=saturated)


def stay_radius(ledger, x_i, direction):
    """Largest rho such that the projected ray stays inside the connected
    component (around x_i) of the union of adversarial-class balls. 0 with
    outside=True when x_i is not in that union."""
    x = np.asarray(x_i, dtype=np.float64).reshape(-1)
    direction = _check_direction(direction)
    centers, radii = ledger.adversarial_arrays()
    if len(radii) == 0:
        return StayRadius(0.0, outside=True)
    cap = float(np.sqrt(x.size))
    start_gap = np.max(radii - np.linalg.norm(
        centers - np.clip(x, 0.0, 1.0), axis=1))
    if start_gap < 0.0:
        return StayRadius(0.0, outside=True)
    rho, saturated = _first_union_exit(x, direction, centers, radii, cap)
    return StayRadius(rho, outside=False)
