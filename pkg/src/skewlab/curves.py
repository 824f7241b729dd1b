"""Adaptive curves inside center leaves.

A center curve is defined by an analytic seed (a straight fiber segment
over an exact base point) plus a generation count; every sample is the
image of a seed point under that many map applications, evaluated in a
single extended-precision chain.  Refinement inserts seed parameters and
re-evaluates, so polyline error never compounds across generations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import mpmath as mp
import numpy as np

from .precision import center_chain_prec
from .skewmap import MapParams, forward, inverse
from .torus import (
    TWO_PI,
    BasePoint,
    FiberPoint,
    TorusPoint,
    base_apply_power,
    circle_dist,
    reduce_angle,
)

CONE_NAMES = ("horizontal", "vertical")


class RefinementError(RuntimeError):
    """Raised when the evaluation budget runs out; carries the bad interval."""

    def __init__(self, interval: tuple[Fraction, Fraction], budget: int):
        self.interval = interval
        self.budget = budget
        super().__init__(
            f"refinement budget {budget} exceeded on parameter interval "
            f"[{float(interval[0]):.6g}, {float(interval[1]):.6g}]")


@dataclass(frozen=True)
class CenterCurve:
    """Polyline sampling of the image of a straight seed segment.

    seed_fiber_turns holds the seed endpoints as exact pairs of turn
    fractions; samples pair a strictly increasing seed parameter with the
    fiber point of its generation-fold image.  All samples share `base`.
    """

    base: BasePoint
    samples: tuple[tuple[Fraction, FiberPoint], ...]
    generation: int
    seed_base: BasePoint
    seed_fiber_turns: tuple[tuple[Fraction, Fraction], tuple[Fraction, Fraction]]
    direction: str = "forward"
    max_spacing: float = math.inf

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("curve needs at least one sample")
        ts = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("sample parameters must be strictly increasing")
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {self.direction!r}")

    def parameters(self) -> list[Fraction]:
        return [t for t, _ in self.samples]

    def fiber_array(self) -> np.ndarray:
        return np.array([(p.x, p.y) for _, p in self.samples])

    def displacements(self) -> np.ndarray:
        """Wrapped consecutive fiber steps, shortest representative."""
        pts = self.fiber_array()
        d = np.diff(pts, axis=0)
        return (d + math.pi) % TWO_PI - math.pi

    def arclength(self) -> float:
        if len(self.samples) < 2:
            return 0.0
        return float(np.hypot(*self.displacements().T).sum())


def _turn_fraction(angle: float) -> Fraction:
    return Fraction(angle) / Fraction(TWO_PI)


def make_center_curve(params: MapParams, center: TorusPoint, length: float,
                      orientation: str = "horizontal",
                      n_samples: int = 17) -> CenterCurve:
    """Generation-0 straight seed of given fiber length through a point."""
    if orientation not in CONE_NAMES:
        raise ValueError(f"orientation must be one of {CONE_NAMES}")
    if length < 0:
        raise ValueError("length must be nonnegative")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    cx = _turn_fraction(center.fiber.x)
    cy = _turn_fraction(center.fiber.y)
    half = Fraction(length) / Fraction(2 * TWO_PI)
    if orientation == "horizontal":
        ends = ((cx - half, cy), (cx + half, cy))
    else:
        ends = ((cx, cy - half), (cx, cy + half))
    ts = [Fraction(i, n_samples - 1) for i in range(n_samples)]
    samples = []
    for t in ts:
        tx = ends[0][0] + t * (ends[1][0] - ends[0][0])
        ty = ends[0][1] + t * (ends[1][1] - ends[0][1])
        samples.append((t, FiberPoint(reduce_angle(float(tx) * TWO_PI),
                                      reduce_angle(float(ty) * TWO_PI))))
    return CenterCurve(base=center.base, samples=tuple(samples), generation=0,
                       seed_base=center.base, seed_fiber_turns=ends,
                       max_spacing=length if length > 0 else math.inf)


def _seed_point(curve: CenterCurve, t: Fraction, prec: int) -> TorusPoint:
    (ax, ay), (bx, by) = curve.seed_fiber_turns
    tx = ax + t * (bx - ax)
    ty = ay + t * (by - ay)
    with mp.workprec(prec):
        two_pi = 2 * mp.pi
        x = mp.mpf(tx.numerator) / tx.denominator * two_pi
        y = mp.mpf(ty.numerator) / ty.denominator * two_pi
        fiber = FiberPoint(reduce_angle(float(x)), reduce_angle(float(y)))
        return TorusPoint(fiber, curve.seed_base, hp=(x, y, prec))


def evaluate_curve_point(params: MapParams, curve: CenterCurve, t: Fraction,
                         generation: int | None = None) -> TorusPoint:
    """Full-chain evaluation of the curve at parameter t from the seed."""
    gen = curve.generation if generation is None else generation
    prec = center_chain_prec(params.n, gen)
    m = _seed_point(curve, t, prec)
    step = forward if curve.direction == "forward" else inverse
    for _ in range(gen):
        m = step(params, m)
    return m


def _check_center_safe(params: MapParams) -> None:
    # fiber-targeting shears keep the skew structure, so horizontal tori
    # remain actual center leaves; any other perturbation mode bends them
    pert = params.perturbation
    if pert is not None and pert.mode != "fiber":
        raise ValueError("center-curve iteration needs unperturbed params or "
                         "fiber-targeting shears (mode 'fiber')")


def iterate_center_curve(params: MapParams, c: CenterCurve, steps: int,
                         delta: float, max_evals: int = 200_000) -> CenterCurve:
    """Advance a curve by `steps` applications with adaptive refinement.

    Every evaluation is a fresh extended-precision chain from the analytic
    seed.  Working spacing is capped at half the unwrap-safe bound
    pi/(2n+3) so consecutive images never alias across the fiber torus.
    """
    _check_center_safe(params)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    # spacing cap BEFORE each application: images of a gap this size stay
    # under pi/2, so wrapped gap measurements next generation cannot alias
    pre_cap = math.pi / (2.0 * params.n + 3.0) / 2.0
    final_gen = c.generation + steps
    prec = center_chain_prec(params.n, final_gen)
    step_fn = forward if c.direction == "forward" else inverse
    evals = 0

    def seed_chain(t: Fraction, gen: int) -> TorusPoint:
        nonlocal evals
        evals += gen if gen > 0 else 1
        m = _seed_point(c, t, prec)
        for _ in range(gen):
            m = step_fn(params, m)
        return m

    def refine(state: dict, gen: int, target: float) -> None:
        nonlocal evals
        ts = sorted(state)
        stack = list(zip(ts, ts[1:]))
        while stack:
            lo, hi = stack.pop()
            a, b = state[lo].fiber, state[hi].fiber
            gap = math.hypot(circle_dist(a.x, b.x), circle_dist(a.y, b.y))
            if gap <= target:
                continue
            if evals > max_evals:
                raise RefinementError((lo, hi), max_evals)
            mid = (lo + hi) / 2
            state[mid] = seed_chain(mid, gen)
            stack.append((lo, mid))
            stack.append((mid, hi))

    state = {t: seed_chain(t, c.generation) for t, _ in c.samples}
    for gen in range(c.generation, final_gen):
        refine(state, gen, pre_cap)
        for t in sorted(state):
            state[t] = step_fn(params, state[t])
            evals += 1
    refine(state, final_gen, delta)
    samples = tuple((t, state[t].fiber) for t in sorted(state))
    power = params.k_base * steps
    if c.direction == "backward":
        power = -power
    new_base = base_apply_power(params.matrix, power, c.base)
    return CenterCurve(base=new_base, samples=samples, generation=final_gen,
                       seed_base=c.seed_base,
                       seed_fiber_turns=c.seed_fiber_turns,
                       direction=c.direction, max_spacing=delta)


def _cone_flags(curve: CenterCurve, cone: str, theta: float) -> np.ndarray:
    d = curve.displacements()
    if cone == "horizontal":
        return np.abs(d[:, 1]) <= theta * np.abs(d[:, 0])
    return np.abs(d[:, 0]) <= theta * np.abs(d[:, 1])


def extract_cone_subcurves(c: CenterCurve, cone: str, theta: float,
                           min_len: float) -> list[CenterCurve]:
    """Maximal sample runs whose discrete tangents stay in the cone."""
    if cone not in CONE_NAMES:
        raise ValueError(f"cone must be one of {CONE_NAMES}")
    if theta <= 0:
        raise ValueError("theta must be positive")
    if len(c.samples) < 2:
        return []
    flags = _cone_flags(c, cone, theta)
    lengths = np.hypot(*c.displacements().T)
    out = []
    i = 0
    while i < len(flags):
        if not flags[i]:
            i += 1
            continue
        j = i
        while j < len(flags) and flags[j]:
            j += 1
        if float(lengths[i:j].sum()) >= min_len:
            sub = CenterCurve(base=c.base, samples=c.samples[i:j + 1],
                              generation=c.generation, seed_base=c.seed_base,
                              seed_fiber_turns=c.seed_fiber_turns,
                              direction=c.direction, max_spacing=c.max_spacing)
            assert bool(_cone_flags(sub, cone, theta).all())
            out.append(sub)
        i = j
    return out


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned open box on the 4-torus."""

    center: TorusPoint
    half_sides: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.half_sides) != 4:
            raise ValueError("need four half sides")
        if any(not 0.0 < h <= math.pi for h in self.half_sides):
            raise ValueError("half sides must lie in (0, pi]")

    def margin(self, m: TorusPoint, fiber_tol: float = 0.0) -> float:
        """Smallest slack over the four coordinates; positive means inside.

        fiber_tol widens the two fiber coordinates only (membership checks
        after contracting iterations quote a fiber tolerance).
        """
        mine = self.center.angles()
        theirs = m.angles()
        slack = []
        for i in range(4):
            tol = fiber_tol if i < 2 else 0.0
            slack.append(self.half_sides[i] + tol - circle_dist(mine[i], theirs[i]))
        return min(slack)

    def contains(self, m: TorusPoint, fiber_tol: float = 0.0) -> bool:
        return self.margin(m, fiber_tol) > 0.0
