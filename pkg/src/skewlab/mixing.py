"""Box-to-box mixing pipeline built from grown center curves.

The forward leg picks a persistently good point in the source box, seeds a
short horizontal curve through its orbit, and alternates map applications
with good-region pruning until one cone-tangent run spans two full fiber
wraps.  The backward leg mirrors this from the target box with vertical
runs of the inverse map.  A heteroclinic center leaf joins the two carrier
orbits; sliding both spanning curves onto it along strong leaves yields two
transversal fiber polylines whose crossing is polished until its residual
survives the forward center stretch.  The refined point is then verified by
direct iteration: backward into the source box, forward into the target.

Stage failures raise MixingStageError with a stage id, so a sweep can tell
a missing good point from a lost cone run or a failed crossing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache

import mpmath
import numpy as np

from .cones import CRIT_CENTERS
from .curves import (BoxSet, CenterCurve, RefinementError, _seed_point,
                     evaluate_curve_point, extract_cone_subcurves,
                     iterate_center_curve, make_center_curve)
from .leaves import (GoodPointError, HeteroclinicError, heteroclinic_center,
                     leaf_point, leaf_seed_segment, persistent_good_point)
from .precision import center_chain_prec
from .skewmap import MapParams, forward, inverse, iterate, promote
from .torus import TWO_PI, TorusPoint, circle_dist, reduce_angle

SPAN_LEN = 4.0 * math.pi
MIN_SPAN = SPAN_LEN * 1.01
TRIM_SPAN = SPAN_LEN * 1.03

# One application multiplies a guarded good piece by at least 4n^0.7 - 2, so
# spanning runs appear after a handful of generations; the cap only catches
# degenerate boxes.
GROW_CAP = 48

# Good pieces handed to the next generation: at least the half-unit of the
# nested construction, at most a couple of units so per-step cost stays flat.
PIECE_FLOOR = 0.5
PIECE_CAP = 2.0

DELTA_GROW = 0.1
MAX_EVALS = 5_000_000
GOOD_GUARD = 1.05
SAT_RADIUS = 12.0
SAT_OFFSETS = (-12.0, -8.0, -4.0, 4.0, 8.0, 12.0)
HORIZON = 28
NEWTON_CAP = 40


class MixingStageError(RuntimeError):
    """One pipeline stage failed; carries the stage identifier."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass(frozen=True)
class MixingReport:
    """Verified output of one box-to-box run.

    m_n is the crossing point on the connecting center leaf; its backward
    n_u_prime-fold iterate lands in the source box and its forward n-fold
    iterate in the target box, with the quoted fiber tolerance.  Slide
    parameters are the signed eigenline displacements of the two holonomy
    legs; spans are the fiber arclengths of the grown curves.
    """

    m_n: TorusPoint
    n: int
    n_u: int
    n_u_prime: int
    n_s: int
    n_s_prime: int
    slide_u: float
    slide_s: float
    span_u: float
    span_s: float
    crossing_residual: float
    base_residual: float
    back_margin: float
    fwd_margin: float
    saturation_margin: float
    fiber_tol: float
    tie_perturbed: bool


# ---------------------------------------------------------------------------
# polyline geometry


def _unwrap(path: np.ndarray) -> np.ndarray:
    """Lift a fiber polyline to the plane through shortest-step increments."""
    d = (np.diff(path, axis=0) + math.pi) % TWO_PI - math.pi
    out = np.empty_like(path)
    out[0] = path[0]
    out[1:] = path[0] + np.cumsum(d, axis=0)
    return out


def _cross2(ux, uy, vx, vy):
    return ux * vy - uy * vx


def _crossings_planar(ua: np.ndarray, ub: np.ndarray):
    """Strict segment crossings of two planar polylines over 2 pi shifts.

    Returns (hits, touched); hits are (i, j, fa, fb, point) with fractional
    positions along the crossing segments, touched flags any exactly
    degenerate pair (endpoint on a segment, collinear overlap).
    """
    p1, p2 = ua[:-1], ua[1:]
    r = p2 - p1
    hits = []
    touched = False
    cx_lo = int(math.ceil((ua[:, 0].min() - ub[:, 0].max()) / TWO_PI)) - 1
    cx_hi = int(math.floor((ua[:, 0].max() - ub[:, 0].min()) / TWO_PI)) + 1
    cy_lo = int(math.ceil((ua[:, 1].min() - ub[:, 1].max()) / TWO_PI)) - 1
    cy_hi = int(math.floor((ua[:, 1].max() - ub[:, 1].min()) / TWO_PI)) + 1
    for cx in range(cx_lo, cx_hi + 1):
        for cy in range(cy_lo, cy_hi + 1):
            q1 = ub[:-1] + (TWO_PI * cx, TWO_PI * cy)
            q2 = ub[1:] + (TWO_PI * cx, TWO_PI * cy)
            s = q2 - q1
            dx1 = q1[None, :, 0] - p1[:, None, 0]
            dy1 = q1[None, :, 1] - p1[:, None, 1]
            dx2 = q2[None, :, 0] - p1[:, None, 0]
            dy2 = q2[None, :, 1] - p1[:, None, 1]
            d1 = _cross2(r[:, None, 0], r[:, None, 1], dx1, dy1)
            d2 = _cross2(r[:, None, 0], r[:, None, 1], dx2, dy2)
            d3 = _cross2(s[None, :, 0], s[None, :, 1], -dx1, -dy1)
            ex = p2[:, None, 0] - q1[None, :, 0]
            ey = p2[:, None, 1] - q1[None, :, 1]
            d4 = _cross2(s[None, :, 0], s[None, :, 1], ex, ey)
            strict = (d1 * d2 < 0.0) & (d3 * d4 < 0.0)
            grazing = ((d1 * d2 == 0.0) & (d3 * d4 <= 0.0)) \
                | ((d3 * d4 == 0.0) & (d1 * d2 <= 0.0))
            touched |= bool(grazing.any())
            for i, j in zip(*np.nonzero(strict)):
                denom = _cross2(r[i, 0], r[i, 1], s[j, 0], s[j, 1])
                qpx = q1[j, 0] - p1[i, 0]
                qpy = q1[j, 1] - p1[i, 1]
                fa = _cross2(qpx, qpy, s[j, 0], s[j, 1]) / denom
                fb = _cross2(qpx, qpy, r[i, 0], r[i, 1]) / denom
                pt = (reduce_angle(p1[i, 0] + fa * r[i, 0]),
                      reduce_angle(p1[i, 1] + fa * r[i, 1]))
                hits.append((int(i), int(j), float(fa), float(fb), pt))
    return hits, touched


def fiber_polyline_crossings(a, b):
    """All transversal crossings of two fiber polylines on the 2-torus.

    a and b are (k, 2) arrays of angles.  Both are unwrapped through
    shortest steps and compared over integer 2 pi shifts.  Exactly grazing
    pairs are retried once with the second polyline displaced by 1e-9; the
    returned flag records that the perturbation was used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2 or b.ndim != 2 or b.shape[1] != 2:
        raise ValueError("polylines must be (k, 2) angle arrays")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("polylines need at least two vertices")
    ua, ub = _unwrap(a), _unwrap(b)
    hits, touched = _crossings_planar(ua, ub)
    if touched:
        hits, _ = _crossings_planar(ua, ub + 1e-9)
        return hits, True
    return hits, False


# ---------------------------------------------------------------------------
# curve surgery


def _subcurve(curve: CenterCurve, i: int, j: int) -> CenterCurve:
    """Sample window [i, j] as a curve sharing the analytic seed."""
    return CenterCurve(base=curve.base, samples=curve.samples[i:j + 1],
                       generation=curve.generation, seed_base=curve.seed_base,
                       seed_fiber_turns=curve.seed_fiber_turns,
                       direction=curve.direction,
                       max_spacing=curve.max_spacing)


def _segment_lengths(curve: CenterCurve) -> np.ndarray:
    return np.hypot(*curve.displacements().T)


def _trim_center(curve: CenterCurve, target: float) -> CenterCurve:
    """Shortest centered sample window still of at least target length.

    Ends are dropped from whichever side has lost less arc so far, keeping
    the kept window balanced about the original middle.
    """
    lens = _segment_lengths(curve)
    i, j = 0, len(lens)
    total = float(lens.sum())
    cut_l = cut_r = 0.0
    while j - i > 2:
        left, right = float(lens[i]), float(lens[j - 1])
        from_left = cut_l + left <= cut_r + right
        drop = left if from_left else right
        if total - drop < target:
            break
        if from_left:
            cut_l += left
            i += 1
        else:
            cut_r += right
            j -= 1
        total -= drop
    return _subcurve(curve, i, j)


def _good_piece(params: MapParams, curve: CenterCurve, cone: str,
                stage: str) -> CenterCurve:
    """Cone-tangent run clear of the widened critical strips.

    Among maximal runs the one with the largest predicted image length
    (twist stretch integrated over the run) is kept, so the growth loop
    cannot oscillate between the two good intervals; the winner is trimmed
    to PIECE_CAP for the next application.
    """
    region_idx = 0 if cone == "horizontal" else 1
    theta = params.theta()
    disp = curve.displacements()
    if cone == "horizontal":
        cone_ok = np.abs(disp[:, 1]) <= theta * np.abs(disp[:, 0])
    else:
        cone_ok = np.abs(disp[:, 0]) <= theta * np.abs(disp[:, 1])
    coords = curve.fiber_array()[:, region_idx]
    half = GOOD_GUARD * params.crit_half_width()
    good = np.ones(len(coords), dtype=bool)
    for c in CRIT_CENTERS:
        d = np.abs(np.mod(coords, TWO_PI) - c)
        good &= np.minimum(d, TWO_PI - d) >= half
    seg_ok = cone_ok & good[:-1] & good[1:]
    lens = _segment_lengths(curve)
    stretch = np.abs(2.0 * params.n * np.cos(coords[:-1]) + 2.0)
    best = None
    i = 0
    while i < len(seg_ok):
        if not seg_ok[i]:
            i += 1
            continue
        j = i
        while j < len(seg_ok) and seg_ok[j]:
            j += 1
        run_len = float(lens[i:j].sum())
        score = float((lens[i:j] * stretch[i:j]).sum())
        if best is None or score > best[0] + 1e-12:
            best = (score, run_len, i, j)
        i = j
    floor = min(PIECE_FLOOR, 0.98 * curve.arclength())
    if best is None or best[1] < floor:
        got = 0.0 if best is None else best[1]
        raise MixingStageError(stage, "longest good cone run has length "
                               f"{got:.3g}, below the floor {floor:.3g}")
    piece = _subcurve(curve, best[2], best[3])
    if best[1] > PIECE_CAP:
        piece = _trim_center(piece, PIECE_CAP)
    return piece


def _advance(params: MapParams, curve: CenterCurve, cone: str,
             stage: str) -> tuple[CenterCurve, CenterCurve | None]:
    """One growth step: prune to a good piece, apply the map, extract.

    Returns (image, spanning) where spanning is the trimmed two-wrap run
    when the image contains one, else None.
    """
    piece = _good_piece(params, curve, cone, stage)
    try:
        img = iterate_center_curve(params, piece, 1, DELTA_GROW, MAX_EVALS)
    except RefinementError as e:
        raise MixingStageError(stage, f"refinement budget exhausted: {e}") from e
    runs = extract_cone_subcurves(img, cone, params.theta(), MIN_SPAN)
    if not runs:
        return img, None
    best = max(runs, key=lambda c: c.arclength())
    return img, _trim_center(best, TRIM_SPAN)


# ---------------------------------------------------------------------------
# seeds


def _seed_radius(box: BoxSet, vec) -> float:
    """Leaf parameter radius whose base offsets stay inside the box."""
    big = max(abs(float(vec[0])), abs(float(vec[1])))
    return min(1.0, 0.9 * min(box.half_sides[2], box.half_sides[3]) / big)


def _persistent_seed(params: MapParams, box: BoxSet, flavor: str,
                     stage: str) -> tuple[TorusPoint, int]:
    vec = params.matrix.e_u if flavor == "uu" else params.matrix.e_s
    center = promote(box.center, center_chain_prec(params.n, HORIZON + 8))
    seg = leaf_seed_segment(params, center, flavor, _seed_radius(box, vec))
    if not all(box.contains(s) for s in seg.samples):
        raise MixingStageError(stage, "strong-leaf seed leaves the box")
    try:
        point, n_first = persistent_good_point(params, seg, HORIZON)
    except GoodPointError as e:
        raise MixingStageError(stage, str(e)) from e
    if not box.contains(point):
        raise MixingStageError(stage, "persistent point fell outside the box")
    return point, n_first


def _strip_slack(params: MapParams, coord: float) -> float:
    half = params.crit_half_width()
    return min(circle_dist(coord, c) for c in CRIT_CENTERS) - half


def _seed_curve(params: MapParams, through: TorusPoint, orientation: str,
                direction: str, pull: int, box: BoxSet,
                stage: str) -> CenterCurve:
    """Straight center seed through a carrier point, shrunk until its
    pullback sits inside the box (sampled check)."""
    coord = through.fiber.x if orientation == "horizontal" else through.fiber.y
    pad = (GOOD_GUARD - 1.0) * params.crit_half_width()
    slack = _strip_slack(params, coord) - pad
    length = min(0.5, 1.8 * slack)
    if length <= 1e-2:
        raise MixingStageError(stage, "carrier point sits only "
                               f"{slack:.3g} inside the guarded good region")
    checks = [Fraction(k, 4) for k in range(5)]
    for _ in range(7):
        cur = make_center_curve(params, through, length, orientation,
                                n_samples=33)
        if direction == "backward":
            cur = replace(cur, direction="backward")
        if all(box.contains(iterate(params,
                                    evaluate_curve_point(params, cur, t,
                                                         generation=0),
                                    pull))
               for t in checks):
            return cur
        length /= 2.0
    raise MixingStageError(stage, "seed pullback keeps leaving the box")


def _saturation_depth(params: MapParams, box: BoxSet, point: TorusPoint,
                      n_first: int) -> int:
    """Generations after which SAT_RADIUS strong-leaf discs contract into
    the box margin available at the carrier point.

    One spare generation absorbs the gap between that margin and the worst
    margin over the sampled pullback anchors; a single step contracts by
    mu^[2n], orders beyond any margin ratio inside the box.
    """
    margin = max(box.margin(point), 1e-9)
    need = math.log(SAT_RADIUS / margin) \
        / (params.k_base * math.log(params.matrix.mu))
    return max(0, int(math.ceil(need)) + 1 - n_first)


def _disc_margin(params: MapParams, box: BoxSet, curve: CenterCurve,
                 leaf_flavor: str, return_steps: int,
                 fiber_tol: float) -> float:
    """Worst box margin over sampled strong-leaf disc points on the curve,
    each carried to the box by direct iteration.

    return_steps is signed: negative pulls uu-discs backward, positive
    pushes ss-discs forward.  Either way the strong offset contracts in the
    exact base arithmetic while the fiber chain runs at the usual per-step
    budget, so no amplification enters the check.
    """
    ts = curve.parameters()
    lo, hi = ts[0], ts[-1]
    picks = [lo + Fraction(k, 16) * (hi - lo) for k in range(17)]
    depth = abs(return_steps)
    log_tol = math.log(0.25 * fiber_tol) \
        - depth * math.log(2.0 * params.n + 3.0)
    bits = _slide_bits(params, depth)
    prec = max(center_chain_prec(params.n, curve.generation + depth + 4)
               + max(0, int(math.ceil(-log_tol / math.log(2.0)))) + 64,
               bits + 64)
    worst = math.inf
    for t in picks:
        p = _chain_point(params, curve, t, prec)
        for sg in SAT_OFFSETS:
            q = leaf_point(params, p, leaf_flavor, sg, log_tol=log_tol,
                           work_prec=prec, bits=bits)
            back = iterate(params, q, return_steps)
            worst = min(worst, box.margin(back, fiber_tol))
    return worst


# ---------------------------------------------------------------------------
# the two legs


@dataclass(frozen=True)
class _FutureLeg:
    point: TorusPoint
    n_u: int
    n_prime: int
    curve: CenterCurve
    carrier: TorusPoint
    sat_margin: float


@lru_cache(maxsize=8)
def _future_leg(params: MapParams, box: BoxSet) -> _FutureLeg:
    point, n_u = _persistent_seed(params, box, "uu", "good-point-u")
    m_plus = iterate(params, point, n_u)
    cur = _seed_curve(params, m_plus, "horizontal", "forward", -n_u, box,
                      "good-curve-u")
    span = None
    for j in range(1, GROW_CAP + 1):
        cur, span = _advance(params, cur, "horizontal", "good-curve-u")
        if span is not None:
            break
    if span is None:
        raise MixingStageError("good-curve-u", "no two-wrap cone run within "
                               f"{GROW_CAP} generations")
    n2 = _saturation_depth(params, box, point, n_u)
    while span.generation < n2:
        img, nxt = _advance(params, span, "horizontal", "good-curve-u")
        if nxt is None:
            raise MixingStageError("good-curve-u", "cone run lost while "
                                   "deepening to the saturation depth at "
                                   f"generation {img.generation}")
        span = nxt
    n_prime = n_u + span.generation
    carrier = iterate(params,
                      promote(point, center_chain_prec(params.n, n_prime + 8)),
                      n_prime)
    sat = _disc_margin(params, box, span, "uu", -n_prime,
                       _resolve_fiber_tol(params, None))
    if sat <= 0.0:
        raise MixingStageError("saturation", "a strong-unstable disc leaves "
                               f"the box backward (margin {sat:.3g})")
    return _FutureLeg(point, n_u, n_prime, span, carrier, sat)


@dataclass(frozen=True)
class _PastState:
    curve: CenterCurve
    first_span: int | None
    spanning: bool
    point: TorusPoint
    n_s: int
    n2: int


@lru_cache(maxsize=None)
def _past_state(params: MapParams, box: BoxSet, j: int) -> _PastState:
    if j == 0:
        point, n_s = _persistent_seed(params, box, "ss", "good-point-s")
        q0 = iterate(params, point, -n_s)
        seed = _seed_curve(params, q0, "vertical", "backward", n_s, box,
                           "good-curve-s")
        n2 = _saturation_depth(params, box, point, n_s)
        return _PastState(seed, None, False, point, n_s, n2)
    prev = _past_state(params, box, j - 1)
    img, span = _advance(params, prev.curve, "vertical", "good-curve-s")
    if span is not None:
        first = prev.first_span if prev.first_span is not None else j
        return _PastState(span, first, True, prev.point, prev.n_s, prev.n2)
    return _PastState(img, prev.first_span, False, prev.point, prev.n_s,
                      prev.n2)


def mixing_threshold(params: MapParams, box: BoxSet) -> int:
    """First n for which the backward leg from the box can deliver a
    two-wrap vertical curve with its strong-stable discs contracted."""
    st = _past_state(params, box, 0)
    for j in range(1, GROW_CAP + 1):
        stj = _past_state(params, box, j)
        if stj.first_span is not None:
            return stj.n_s + max(stj.first_span, stj.n2)
    raise MixingStageError("good-curve-s", "no two-wrap cone run within "
                           f"{GROW_CAP} generations")


# ---------------------------------------------------------------------------
# crossing refinement


def _slide_bits(params: MapParams, depth: int) -> int:
    """Base bit width surviving `depth` steps of full hyperbolic
    amplification on top of the center stretch."""
    per_step = params.k_base * math.log2(params.matrix.mu) \
        + math.log2(2.0 * params.n + 3.0)
    return int(math.ceil(per_step * (depth + 4))) + 192


def _mp_connection(params: MapParams, p: TorusPoint, q: TorusPoint,
                   t_f: float, s_f: float, prec: int):
    """Re-solve the connection slides at working precision.

    The float solve fixes the lattice representative; redoing the 2x2
    system with mp eigenvectors and the exact dyadic base difference keeps
    the implied base mismatch near 2^-prec, small enough that forward
    iterates of the slid points still track the target orbit after the
    mu^[2n]-per-step amplification.
    """
    mat = params.matrix
    eu_f, es_f = mat.e_u, mat.e_s
    ru_f = t_f * float(eu_f[0]) - s_f * float(es_f[0])
    rv_f = t_f * float(eu_f[1]) - s_f * float(es_f[1])
    bits = max(p.base.bits, q.base.bits)
    a, b = q.base.rebit(bits), p.base.rebit(bits)
    mod, half = 1 << bits, 1 << (bits - 1)
    dnu = (a.nu - b.nu + half) % mod - half
    dnv = (a.nv - b.nv + half) % mod - half
    with mpmath.workprec(prec):
        two_pi = 2 * mpmath.pi
        du0 = mpmath.ldexp(mpmath.mpf(dnu), -bits) * two_pi
        dv0 = mpmath.ldexp(mpmath.mpf(dnv), -bits) * two_pi
        ka = int(round((ru_f - float(du0)) / TWO_PI))
        kb = int(round((rv_f - float(dv0)) / TWO_PI))
        eu, es = mat.unit_vectors_mp(prec)
        ru = du0 + two_pi * ka
        rv = dv0 + two_pi * kb
        det = es[0] * eu[1] - es[1] * eu[0]
        t = (es[0] * rv - es[1] * ru) / det
        s = (eu[0] * rv - eu[1] * ru) / det
        return t, s


def _pick_crossing(gamma_p: CenterCurve, gamma_m: CenterCurve):
    """Detect crossings on the stored polylines and keep the most central.

    Detection runs on the raw sampled fibers; the holonomy slides displace
    them by at most the sweep rate times the slide radius, far below one
    sample spacing, and the refinement re-solves on the true slid curves.
    """
    a = gamma_p.fiber_array()
    b = gamma_m.fiber_array()
    hits, tie = fiber_polyline_crossings(a, b)
    if not hits:
        raise MixingStageError("crossing",
                               "spanning curve polylines do not cross")
    la = np.concatenate(([0.0], np.cumsum(_segment_lengths(gamma_p))))
    lb = np.concatenate(([0.0], np.cumsum(_segment_lengths(gamma_m))))

    def centrality(hit):
        i, j, fa, fb, _ = hit
        pa = (la[i] + fa * (la[i + 1] - la[i])) / la[-1] - 0.5
        pb = (lb[j] + fb * (lb[j + 1] - lb[j])) / lb[-1] - 0.5
        return (pa * pa + pb * pb, i, j)

    best = min(hits, key=centrality)
    i, j, fa, fb, _ = best
    ta = gamma_p.parameters()
    tb = gamma_m.parameters()
    t0 = ta[i] + Fraction(fa).limit_denominator(1 << 30) * (ta[i + 1] - ta[i])
    s0 = tb[j] + Fraction(fb).limit_denominator(1 << 30) * (tb[j + 1] - tb[j])
    return t0, s0, tie


def _chain_point(params: MapParams, curve: CenterCurve, t: Fraction,
                 prec: int) -> TorusPoint:
    m = _seed_point(curve, t, prec)
    step = forward if curve.direction == "forward" else inverse
    for _ in range(curve.generation):
        m = step(params, m)
    return m


def _refine_crossing(params: MapParams, gamma_p: CenterCurve, slide_u,
                     gamma_m: CenterCurve, slide_s, t0: Fraction,
                     s0: Fraction, log_target: float, bits: int):
    """Newton polish of the slid-curve crossing in exact seed parameters.

    Both coordinates of the mismatch are driven below exp(log_target); the
    finite-difference Jacobian is accurate to the parameter step, which
    keeps convergence superlinear long past double precision.  bits sets
    the dyadic base grid of the slid points, sized by the caller so grid
    rounding survives the verification iterations.
    """
    gen = max(gamma_p.generation, gamma_m.generation)
    prec = max(center_chain_prec(params.n, gen)
               + int(-log_target / math.log(2.0)) + 96, bits + 64)
    log_leaf = log_target - math.log(4.0)

    def phi(t: Fraction) -> TorusPoint:
        w = _chain_point(params, gamma_p, t, prec)
        return leaf_point(params, w, "uu", slide_u, log_tol=log_leaf,
                          work_prec=prec, bits=bits)

    def psi(t: Fraction) -> TorusPoint:
        w = _chain_point(params, gamma_m, t, prec)
        return leaf_point(params, w, "ss", slide_s, log_tol=log_leaf,
                          work_prec=prec, bits=bits)

    def gap(pa: TorusPoint, pb: TorusPoint):
        with mpmath.workprec(prec):
            two_pi = 2 * mpmath.pi
            fx = (pa.hp[0] - pb.hp[0] + mpmath.pi) % two_pi - mpmath.pi
            fy = (pa.hp[1] - pb.hp[1] + mpmath.pi) % two_pi - mpmath.pi
            return fx, fy

    lo_p, hi_p = gamma_p.parameters()[0], gamma_p.parameters()[-1]
    lo_m, hi_m = gamma_m.parameters()[0], gamma_m.parameters()[-1]
    # deep chains compress the live seed window geometrically, so the
    # difference step must scale with it or the probe leaves the nest
    h_p = (hi_p - lo_p) / (1 << 26)
    h_m = (hi_m - lo_m) / (1 << 26)
    t_cur, s_cur = t0, s0
    best = None
    with mpmath.workprec(prec):
        target = mpmath.exp(mpmath.mpf(log_target))
        cap_t = mpmath.mpf(float(hi_p - lo_p)) / 4
        cap_s = mpmath.mpf(float(hi_m - lo_m)) / 4
    for _ in range(NEWTON_CAP):
        pa, pb = phi(t_cur), psi(s_cur)
        with mpmath.workprec(prec):
            f1, f2 = gap(pa, pb)
            res = mpmath.sqrt(f1 * f1 + f2 * f2)
        if best is None or res < best[0]:
            best = (res, t_cur, s_cur, pa, pb)
        if res < target:
            break
        pa_h = phi(t_cur + h_p)
        pb_h = psi(s_cur + h_m)
        with mpmath.workprec(prec):
            g1, g2 = gap(pa_h, pb)
            k1, k2 = gap(pa, pb_h)
            hh_p = mpmath.mpf(h_p.numerator) / h_p.denominator
            hh_m = mpmath.mpf(h_m.numerator) / h_m.denominator
            j11, j21 = (g1 - f1) / hh_p, (g2 - f2) / hh_p
            j12, j22 = (k1 - f1) / hh_m, (k2 - f2) / hh_m
            det = j11 * j22 - j12 * j21
            if abs(det) < mpmath.mpf("1e-12"):
                raise MixingStageError("crossing",
                                       "degenerate crossing Jacobian")
            dt = -(j22 * f1 - j12 * f2) / det
            ds = -(-j21 * f1 + j11 * f2) / det
            scale = max(abs(dt) / cap_t, abs(ds) / cap_s)
            if scale > 1:
                dt, ds = dt / scale, ds / scale
            dt_f, ds_f = float(dt), float(ds)
        t_cur = min(max(t_cur + Fraction(dt_f), lo_p), hi_p)
        s_cur = min(max(s_cur + Fraction(ds_f), lo_m), hi_m)
    res, t_cur, s_cur, pa, pb = best
    with mpmath.workprec(prec):
        if not res < target:
            raise MixingStageError("crossing", "refinement stalled at "
                                   f"residual {mpmath.nstr(res, 6)}")
    return t_cur, s_cur, pa, pb, res


# ---------------------------------------------------------------------------
# the full pipeline


def _resolve_fiber_tol(params: MapParams, fiber_tol: float | None) -> float:
    if fiber_tol is not None:
        return fiber_tol
    if params.perturbation is None:
        return 1e-3
    # perturbed center leaves are only epsilon-close to horizontal tori
    return 10.0 * params.perturbation.epsilon


def mixing_intersection(params: MapParams, U: BoxSet, V: BoxSet, n: int, *,
                        fiber_tol: float | None = None) -> MixingReport:
    """Point of g^[n_u'](U) whose forward n-fold iterate lies in V.

    Runs the whole pipeline: persistent good points in both boxes, grown
    spanning curves forward from U and backward from V, a heteroclinic
    center leaf between the carrier orbits, strong-leaf slides of both
    curves onto it, and the polished crossing.  Membership of the crossing
    point is then re-checked by direct iteration; the crossing residual is
    driven below fiber_tol (2n+3)^-n / 4 beforehand, so the forward center
    stretch cannot consume the quoted tolerance.
    """
    if n < 1:
        raise ValueError("n must be a positive iterate count")
    ftol = _resolve_fiber_tol(params, fiber_tol)
    leg = _future_leg(params, U)
    n0 = mixing_threshold(params, V)
    st0 = _past_state(params, V, 0)
    if n < n0:
        raise MixingStageError("horizon", f"n={n} is below the first "
                               f"workable iterate {n0}")
    j = n - st0.n_s
    st = _past_state(params, V, j)
    if not st.spanning:
        raise MixingStageError("good-curve-s", "backward leg lost its "
                               f"two-wrap run at generation {j}")
    gamma_p, gamma_m = leg.curve, st.curve

    q_n = iterate(params,
                  promote(st.point, center_chain_prec(params.n, n + 8)), -n)
    try:
        hc = heteroclinic_center(params, leg.carrier, q_n, radius=SAT_RADIUS)
    except HeteroclinicError as e:
        raise MixingStageError("heteroclinic", str(e)) from e
    bits_het = _slide_bits(params, max(n, leg.n_prime))
    slide_u, slide_s = _mp_connection(params, leg.carrier, q_n, hc.t, hc.s,
                                      bits_het)

    t0, s0, tie = _pick_crossing(gamma_p, gamma_m)
    log_target = min(math.log(1e-11),
                     math.log(0.25 * ftol)
                     - max(n, leg.n_prime) * math.log(2.0 * params.n + 3.0))
    _, _, m_n, psi_pt, res = _refine_crossing(
        params, gamma_p, slide_u, gamma_m, slide_s, t0, s0, log_target,
        bits_het)

    base_res = max(hc.base_residual,
                   math.hypot(circle_dist(m_n.angles()[2], psi_pt.angles()[2]),
                              circle_dist(m_n.angles()[3], psi_pt.angles()[3])))

    ver_prec = center_chain_prec(params.n, n + leg.n_prime + 8) \
        + int(-log_target / math.log(2.0)) + 64
    m_hp = promote(m_n, ver_prec)
    back_margin = U.margin(iterate(params, m_hp, -leg.n_prime), ftol)
    fwd_margin = V.margin(iterate(params, m_hp, n), ftol)
    if back_margin <= 0.0 or fwd_margin <= 0.0:
        raise MixingStageError("verification", "crossing point failed the "
                               f"box membership check (backward margin "
                               f"{back_margin:.4g}, forward margin "
                               f"{fwd_margin:.4g})")

    return MixingReport(m_n=m_n, n=n, n_u=leg.n_u, n_u_prime=leg.n_prime,
                        n_s=st.n_s, n_s_prime=n0,
                        slide_u=float(slide_u), slide_s=float(slide_s),
                        span_u=gamma_p.arclength(), span_s=gamma_m.arclength(),
                        crossing_residual=float(res),
                        base_residual=float(base_res),
                        back_margin=float(back_margin),
                        fwd_margin=float(fwd_margin),
                        saturation_margin=float(leg.sat_margin),
                        fiber_tol=float(ftol), tie_perturbed=tie)
