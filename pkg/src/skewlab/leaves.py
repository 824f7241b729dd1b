"""Strong-leaf constructions: pointwise charts, sampled arcs, the nested
good-point search, heteroclinic connections, and strong holonomies.

The skew structure slaves every strong leaf to an eigenline of the base
matrix, so a leaf is a one-parameter family: the signed displacement along
the unit eigenvector addresses its points.  A leaf point is built by pulling
the anchor back, offsetting the pulled base by the contracted parameter, and
pushing forward again; the transverse seeding error contracts geometrically
while the base lands on the eigenline exactly (up to the dyadic base grid).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import mpmath
import numpy as np

from .bundles import invariant_direction
from .cones import CRIT_CENTERS, good_mask, in_good_region
from .curves import RefinementError
from .precision import center_chain_prec, strong_unstable_prec
from .skewmap import MapParams, iterate, promote
from .torus import (TWO_PI, BasePoint, FiberPoint, HyperbolicMatrix,
                    TorusPoint, mat2_power, reduce_angle, split_batch,
                    torus_dist)

LEAF_FLAVORS = ("ss", "uu")

# Polyline growth costs one map evaluation per mu^[2n]-stretched gap, so the
# twist must stay small there; the pointwise chart has no such limit.
GROWTH_N_CAP = 12.0

_PULL_CAP = 400


class GoodPointError(RuntimeError):
    """Nested good-window selection failed; carries the failing generation."""

    def __init__(self, generation: int, message: str):
        self.generation = generation
        super().__init__(f"generation {generation}: {message}")


class HeteroclinicError(RuntimeError):
    """No connection within the requested radius; carries the smallest seen."""

    def __init__(self, min_radius: float):
        self.min_radius = min_radius
        super().__init__("no connection within the requested radius; smallest "
                         f"candidate needs {min_radius:.6g}")


class HolonomyError(RuntimeError):
    """Target base does not lie on the strong leaf line of the source."""


def _flavor_data(params: MapParams, flavor: str):
    """(unit eigenvector, push sign, swept fiber index, drift coefficient)."""
    mat = params.matrix
    if flavor == "uu":
        return mat.e_u, 1, 0, abs(mat.e_u[0])
    if flavor == "ss":
        return mat.e_s, -1, 1, abs(mat.e_s[0])
    raise ValueError(f"flavor must be one of {LEAF_FLAVORS}, got {flavor!r}")


def _check_leaf_safe(params: MapParams) -> None:
    pert = params.perturbation
    if pert is not None and pert.mode != "fiber":
        raise ValueError("strong-leaf charts require the exact base skew; "
                         "only fiber-targeting perturbations are supported")


def sweep_rate(params: MapParams, flavor: str = "uu") -> float:
    """Drift of the swept fiber coordinate per unit of leaf parameter.

    The coupling power pinches leaf tangents onto a line whose fiber slope
    is the eigenvector component scaled by lam^[n]; that slope is exactly
    the speed at which x (uu) or y (ss) moves along the leaf.
    """
    _, _, _, coeff = _flavor_data(params, flavor)
    return coeff * params.matrix.lam ** params.k_couple


def sweep_threshold(params: MapParams, flavor: str = "uu") -> float:
    """Leaf length past which every image box sweeps the tested coordinate."""
    _, _, _, coeff = _flavor_data(params, flavor)
    lam_n = params.matrix.lam ** params.k_couple
    return (1.0 / lam_n) / (coeff * lam_n + 3.0 * lam_n)


def _mp_eigen(mat: HyperbolicMatrix, prec: int):
    (a, _), (_, d) = mat.entries
    with mpmath.workprec(prec):
        tr = mpmath.mpf(a + d)
        mu = (tr + mpmath.sqrt(tr * tr - 4)) / 2
    eu, es = mat.unit_vectors_mp(prec)
    return mu, eu, es


def _pull_depth(params: MapParams, s_log: float, log_tol: float) -> int:
    """Contraction steps that push the transverse seeding error under tol.

    s_log is log(|s| + 1) for the leaf parameter; the error model is
    |s| * alpha * ratio^k with alpha ~ 4 lam^[n] and ratio the center-to-
    strong dominance quotient.  Logs throughout so deep twists never
    overflow a double.
    """
    mat = params.matrix
    log_ratio = math.log(2.0 * params.n + 3.0) - params.k_base * math.log(mat.mu)
    if log_ratio >= 0.0:
        raise ValueError("base power does not dominate the center stretch")
    log_alpha = math.log(4.0) + params.k_couple * math.log(mat.lam)
    need = log_tol - s_log - log_alpha
    if need >= 0.0:
        return 1
    return min(_PULL_CAP, max(1, math.ceil(need / log_ratio)))


def leaf_point(params: MapParams, m: TorusPoint, flavor: str, s, *,
               tol: float = 1e-12, log_tol: float | None = None,
               bits: int | None = None,
               work_prec: int | None = None) -> TorusPoint:
    """Point of the strong leaf through m at signed base-line parameter s.

    s measures displacement along the unit eigenvector of the base matrix
    (leaf arclength up to the lam^[n] fiber slope) and may be a float or an
    mpf; pass work_prec when s carries more digits than a double.  log_tol
    replaces log(tol) when the transverse budget underflows a float.  The
    pull depth, working precision, and base bit width are all sized from s
    and the tolerance, so the only accuracy knob callers need is tol.
    """
    _check_leaf_safe(params)
    _, push, _, _ = _flavor_data(params, flavor)
    mat = params.matrix
    with mpmath.workprec(64):
        s_log = float(mpmath.log(abs(mpmath.mpf(s)) + 1))
    if log_tol is None:
        log_tol = math.log(tol)
    k = _pull_depth(params, s_log, log_tol)
    amp_bits = int(math.ceil(k * params.k_base * math.log2(mat.mu))) + 128
    prec = max(work_prec or 0,
               strong_unstable_prec(params.k_base, mat.mu, k),
               center_chain_prec(params.n, k),
               int(-log_tol / math.log(2.0)) + 64)
    use_bits = max(bits or 0, m.base.bits, amp_bits)
    anchor = promote(m.with_bits(use_bits), prec)
    pulled = iterate(params, anchor, -push * k)
    mu_mp, eu_mp, es_mp = _mp_eigen(mat, prec)
    ev = eu_mp if flavor == "uu" else es_mp
    with mpmath.workprec(prec):
        sigma = mpmath.mpf(s) * mu_mp ** (-k * params.k_base)
        du = sigma * ev[0] / (2 * mpmath.pi)
        dv = sigma * ev[1] / (2 * mpmath.pi)
    seeded = TorusPoint(pulled.fiber, pulled.base.add_offsets(du, dv),
                        pulled.hp)
    return iterate(params, seeded, push * k)


@dataclass(frozen=True)
class LeafSegment:
    """Sampled arc of a strong leaf, addressed by base-line parameter.

    span holds the signed parameters of the two ends relative to the anchor;
    samples run from span[0] to span[1].  The anchor itself need not be a
    sample (growth trims at sample granularity).
    """

    flavor: str
    anchor: TorusPoint
    samples: tuple[TorusPoint, ...]
    arclength: float
    span: tuple[float, float]

    def __post_init__(self):
        if self.flavor not in LEAF_FLAVORS:
            raise ValueError(f"flavor must be one of {LEAF_FLAVORS}")
        if len(self.samples) < 2:
            raise ValueError("a leaf segment needs at least two samples")
        if not self.span[0] < self.span[1]:
            raise ValueError("span must be increasing")


def _circ(d: float) -> float:
    r = math.fmod(d + math.pi, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    return r - math.pi


def _base_delta(b1: BasePoint, b0: BasePoint) -> tuple[float, float]:
    """Componentwise angular difference b1 - b0, wrapped to [-pi, pi)."""
    bits = max(b1.bits, b0.bits)
    a, b = b1.rebit(bits), b0.rebit(bits)
    mod = 1 << bits
    half = mod >> 1
    dnu = (a.nu - b.nu + half) % mod - half
    dnv = (a.nv - b.nv + half) % mod - half
    return (float(Fraction(dnu, mod)) * TWO_PI,
            float(Fraction(dnv, mod)) * TWO_PI)


def _wrapped_deltas(samples: tuple[TorusPoint, ...]) -> np.ndarray:
    """(k, 4) consecutive displacements, each coordinate wrapped to [-pi, pi)."""
    rows = []
    for a, b in zip(samples, samples[1:]):
        du, dv = _base_delta(b.base, a.base)
        rows.append((_circ(b.fiber.x - a.fiber.x),
                     _circ(b.fiber.y - a.fiber.y), du, dv))
    return np.array(rows, dtype=np.float64)


def base_line_residual(params: MapParams, seg: LeafSegment) -> float:
    """Largest distance from the unwrapped base track to its eigenline."""
    vec, _, _, _ = _flavor_data(params, seg.flavor)
    d = _wrapped_deltas(seg.samples)
    cum_u = np.concatenate([[0.0], np.cumsum(d[:, 2])])
    cum_v = np.concatenate([[0.0], np.cumsum(d[:, 3])])
    proj = cum_u * vec[0] + cum_v * vec[1]
    return float(np.hypot(cum_u - proj * vec[0], cum_v - proj * vec[1]).max())


def _assert_leaf_tangents(params: MapParams, samples, flavor: str) -> None:
    d = _wrapped_deltas(samples)
    _, v_s, v_u = split_batch(params.matrix, d)
    fib = np.hypot(d[:, 0], d[:, 1])
    dom, cross = (np.abs(v_u), np.abs(v_s)) if flavor == "uu" \
        else (np.abs(v_s), np.abs(v_u))
    slack = max(0.1, 8.0 * params.matrix.lam ** params.k_couple)
    assert not (np.hypot(fib, cross) > slack * dom).any(), \
        "leaf tangent left its strong cone"


def leaf_seed_segment(params: MapParams, m: TorusPoint, flavor: str,
                      radius: float, n_pts: int | None = None) -> LeafSegment:
    """Directly sampled leaf arc; cost is linear in n_pts at any twist.

    Each sample is an independent pull-offset-push chart evaluation, so the
    arc stays affordable where polyline growth is priced out.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    if n_pts is None:
        n_pts = max(17, int(math.ceil(2.0 * radius / 0.5)) + 1)
    if n_pts < 2:
        raise ValueError("need at least two samples")
    pts = tuple(leaf_point(params, m, flavor, float(sg))
                for sg in np.linspace(-radius, radius, n_pts))
    _assert_leaf_tangents(params, pts, flavor)
    d = _wrapped_deltas(pts)
    arclength = float(np.hypot(np.hypot(d[:, 0], d[:, 1]),
                               np.hypot(d[:, 2], d[:, 3])).sum())
    return LeafSegment(flavor, m, pts, arclength, (-radius, radius))


def grow_leaf_segment(params: MapParams, m: TorusPoint, flavor: str,
                      radius: float, n_gen: int = 2, delta: float = 0.02,
                      max_evals: int = 200_000) -> LeafSegment:
    """Grow a strong-leaf arc by pushing a contracted seed through n_gen maps.

    The seed sits on the finite-time strong direction at the pulled anchor;
    every push multiplies its length by mu^[2n] while refinement keeps the
    polyline gap below a wrap-safe cap, so the result is a genuine leaf
    polyline rather than a chart sweep.  Trimmed to the requested parameter
    radius around the anchor at sample granularity.
    """
    _check_leaf_safe(params)
    if params.n > GROWTH_N_CAP:
        raise ValueError(f"polyline growth is limited to n <= {GROWTH_N_CAP:g}; "
                         "use leaf_seed_segment for deeper twists")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    if n_gen < 1:
        raise ValueError("need at least one growth generation")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    vec, push, _, _ = _flavor_data(params, flavor)
    mat = params.matrix
    if not math.isfinite(mat.mu ** (params.k_base * n_gen)):
        raise ValueError("growth depth overflows the stretch factor")
    prec = max(strong_unstable_prec(params.k_base, mat.mu, n_gen + 2),
               center_chain_prec(params.n, n_gen + 8))
    use_bits = max(m.base.bits, int(math.ceil(
        (n_gen + 2) * params.k_base * math.log2(mat.mu))) + 128)
    anchor = promote(m.with_bits(use_bits), prec)
    pulled = iterate(params, anchor, -push * n_gen)
    n_dir = max(8, _pull_depth(params, 0.0, math.log(1e-10)))
    est = invariant_direction(params, pulled, flavor, n_iter=n_dir)
    mu_mp, _, _ = _mp_eigen(mat, prec)
    with mpmath.workprec(prec):
        half = (mpmath.mpf(radius) + 1) * mu_mp ** (-params.k_base * n_gen)
        v_mp = tuple(mpmath.mpf(float(c)) for c in est.vector)
        hx, hy = pulled.hp[0], pulled.hp[1]

    def seed_at(t: Fraction) -> TorusPoint:
        with mpmath.workprec(prec):
            off = half * t.numerator / t.denominator
            x = hx + off * v_mp[0]
            y = hy + off * v_mp[1]
            du = off * v_mp[2] / (2 * mpmath.pi)
            dv = off * v_mp[3] / (2 * mpmath.pi)
            return TorusPoint(FiberPoint(reduce_angle(float(x)),
                                         reduce_angle(float(y))),
                              pulled.base.add_offsets(du, dv), (x, y, prec))

    budget = [max_evals]

    def chain(t: Fraction, gen: int) -> TorusPoint:
        budget[0] -= 1
        return iterate(params, seed_at(t), push * gen)

    def refine(state: dict, gen: int, target: float) -> None:
        ts = sorted(state)
        i = 0
        while i + 1 < len(ts):
            a, b = ts[i], ts[i + 1]
            if torus_dist(state[a], state[b]) <= target:
                i += 1
                continue
            if budget[0] <= 0:
                raise RefinementError((a, b), max_evals)
            mid = (a + b) / 2
            state[mid] = chain(mid, gen)
            ts.insert(i + 1, mid)

    # gap cap that one push cannot stretch past a quarter turn
    cap = (math.pi / 2.0) / (2.2 * (mat.mu ** params.k_base
                                    + 2.0 * params.n + 3.0))
    state = {Fraction(i, 8): chain(Fraction(i, 8), 0) for i in range(-8, 9)}
    refine(state, 0, cap)
    for gen in range(1, n_gen + 1):
        state = {t: iterate(params, p, push) for t, p in state.items()}
        refine(state, gen, cap if gen < n_gen else delta)

    ts = sorted(state)
    pts = [state[t] for t in ts]
    i0 = ts.index(Fraction(0))
    d = _wrapped_deltas(tuple(pts))
    cum_u = np.concatenate([[0.0], np.cumsum(d[:, 2])])
    cum_v = np.concatenate([[0.0], np.cumsum(d[:, 3])])
    proj = ((cum_u - cum_u[i0]) * vec[0] + (cum_v - cum_v[i0]) * vec[1])
    if proj[-1] < proj[0]:
        pts.reverse()
        proj = -proj[::-1]
        i0 = len(pts) - 1 - i0
    if proj[-1] < radius or proj[0] > -radius:
        raise RuntimeError("grown arc is shorter than the requested radius; "
                           "increase n_gen")
    hi = int(np.searchsorted(proj, radius, side="left"))
    lo = int(np.searchsorted(proj, -radius, side="right")) - 1
    samples = tuple(pts[lo:hi + 1])
    _assert_leaf_tangents(params, samples, flavor)
    d = _wrapped_deltas(samples)
    arclength = float(np.hypot(np.hypot(d[:, 0], d[:, 1]),
                               np.hypot(d[:, 2], d[:, 3])).sum())
    return LeafSegment(flavor, m, samples, arclength,
                       (float(proj[lo]), float(proj[hi])))


def _angles_from_nums(nums: list, bits: int) -> np.ndarray:
    shift = bits - 64
    scale = TWO_PI / 2.0 ** 64
    return np.fromiter(((v >> shift) for v in nums), dtype=np.float64,
                       count=len(nums)) * scale


def _batch_shears(terms, xs, ys, zs, ws, invert: bool):
    if invert:
        terms = tuple(reversed(terms))
    for term in terms:
        k = term.freq
        arg = k[0] * xs + k[1] * ys + k[2] * zs + k[3] * ws + term.phase
        disp = term.amp * np.sin(arg)
        if invert:
            disp = -disp
        if term.target == 0:
            xs = np.mod(xs + disp, TWO_PI)
        else:
            ys = np.mod(ys + disp, TWO_PI)
    return xs, ys


def _batch_push(params: MapParams, xs, ys, nus, nvs, bits: int, steps: int,
                direction: int):
    """Vectorized double-precision fiber chains over exact integer bases.

    Mirrors the double paths of the map, fiber shears included, for a batch
    sharing one generation schedule.  Base-targeting shears would break the
    integer base stepping, hence the fiber-mode gate.
    """
    pert = params.perturbation
    if pert is not None and pert.mode != "fiber":
        raise ValueError("batched sweeps require fiber-targeting perturbations")
    terms = pert.terms if pert is not None else ()
    mod = 1 << bits
    ent = params.matrix.entries
    step = mat2_power(ent, params.k_base if direction > 0 else -params.k_base)
    cpl = mat2_power(ent, params.k_couple)
    n2 = 2.0 * params.n
    for _ in range(steps):
        if direction > 0:
            cnum = [(cpl[0][0] * u + cpl[0][1] * v) % mod
                    for u, v in zip(nus, nvs)]
            t = _angles_from_nums(cnum, bits)
            x2 = np.mod(n2 * np.sin(xs) + 2.0 * xs - ys + t, TWO_PI)
            ys = xs
            xs = x2
            nus, nvs = ([(step[0][0] * u + step[0][1] * v) % mod
                         for u, v in zip(nus, nvs)],
                        [(step[1][0] * u + step[1][1] * v) % mod
                         for u, v in zip(nus, nvs)])
            if terms:
                xs, ys = _batch_shears(terms, xs, ys,
                                       _angles_from_nums(nus, bits),
                                       _angles_from_nums(nvs, bits),
                                       invert=False)
        else:
            if terms:
                xs, ys = _batch_shears(terms, xs, ys,
                                       _angles_from_nums(nus, bits),
                                       _angles_from_nums(nvs, bits),
                                       invert=True)
            nus, nvs = ([(step[0][0] * u + step[0][1] * v) % mod
                         for u, v in zip(nus, nvs)],
                        [(step[1][0] * u + step[1][1] * v) % mod
                         for u, v in zip(nus, nvs)])
            cnum = [(cpl[0][0] * u + cpl[0][1] * v) % mod
                    for u, v in zip(nus, nvs)]
            t = _angles_from_nums(cnum, bits)
            x = np.mod(ys, TWO_PI)
            y = np.mod(n2 * np.sin(x) + 2.0 * x + t - xs, TWO_PI)
            xs, ys = x, y
    return xs, ys, nus, nvs


def _sweep_values(params: MapParams, anchor: TorusPoint, flavor: str, lo, hi,
                  count: int, tol: float = 1e-6) -> np.ndarray:
    """Swept fiber coordinate at count leaf parameters spanning [lo, hi].

    lo and hi may be mpf of any magnitude; offsets enter the base lattice as
    a two-conversion integer ramp so the batch needs exactly two
    high-precision multiplies regardless of count.
    """
    if count < 2:
        raise ValueError("need at least two sweep samples")
    _, push, coord, _ = _flavor_data(params, flavor)
    with mpmath.workprec(64):
        s_log = float(mpmath.log(max(abs(mpmath.mpf(lo)),
                                     abs(mpmath.mpf(hi))) + 1))
    # the double-precision batch amplifies rounding by (2n+3) per step, so
    # the pull depth is capped where that noise reaches ~1e-6; callers keep
    # parameters window-local (one coordinate wrap) so the cap never binds
    k_float = max(1, int(22.0 / math.log(2.0 * params.n + 3.0)))
    k = min(_pull_depth(params, s_log, math.log(tol)), k_float)
    pulled = iterate(params, promote(anchor, center_chain_prec(params.n, k + 4)),
                     -push * k)
    bits = pulled.base.bits
    mod = 1 << bits
    prec_off = bits + 128 + max(0, int(math.ceil(s_log / math.log(2.0))))
    mu_mp, eu_mp, es_mp = _mp_eigen(params.matrix, prec_off)
    ev = eu_mp if flavor == "uu" else es_mp
    with mpmath.workprec(prec_off):
        shrink = mu_mp ** (-k * params.k_base)
        lo_mp = mpmath.mpf(lo) * shrink
        step_mp = (mpmath.mpf(hi) - mpmath.mpf(lo)) / (count - 1) * shrink
        scale = mpmath.mpf(2) ** (bits + 64)
        au = int(mpmath.nint(lo_mp * ev[0] / (2 * mpmath.pi) * scale))
        bu = int(mpmath.nint(step_mp * ev[0] / (2 * mpmath.pi) * scale))
        av = int(mpmath.nint(lo_mp * ev[1] / (2 * mpmath.pi) * scale))
        bv = int(mpmath.nint(step_mp * ev[1] / (2 * mpmath.pi) * scale))
    nus = [(pulled.base.nu + ((au + i * bu) >> 64)) % mod for i in range(count)]
    nvs = [(pulled.base.nv + ((av + i * bv) >> 64)) % mod for i in range(count)]
    xs = np.full(count, reduce_angle(float(pulled.hp[0])))
    ys = np.full(count, reduce_angle(float(pulled.hp[1])))
    xs, ys, _, _ = _batch_push(params, xs, ys, nus, nvs, bits, k, push)
    return xs if coord == 0 else ys


def good_fraction(params: MapParams, seg: LeafSegment, n_steps: int, *,
                  per_wrap: int = 256, max_samples: int = 1 << 17,
                  min_samples: int = 4096) -> float:
    """Fraction of the n_steps-image of a leaf arc whose swept coordinate
    is good.

    The image is measured through charts anchored at the advanced anchor: a
    centered window of up to max_samples/per_wrap full coordinate sweeps is
    sampled uniformly in the leaf parameter, deterministically.  Requires
    the image length to clear the sweep threshold so the window spans at
    least one full wrap.
    """
    _check_leaf_safe(params)
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    mat = params.matrix
    rate = sweep_rate(params, seg.flavor)
    _, push, _, _ = _flavor_data(params, seg.flavor)
    length0 = seg.span[1] - seg.span[0]
    log_len = math.log(length0) + n_steps * params.k_base * math.log(mat.mu)
    if log_len < math.log(sweep_threshold(params, seg.flavor)):
        raise ValueError("image length below the sweep threshold; "
                         "increase n_steps or the seed radius")
    log_wraps = log_len + math.log(rate) - math.log(TWO_PI)
    budget_wraps = max_samples / per_wrap
    wraps = budget_wraps if log_wraps > math.log(budget_wraps) \
        else math.exp(log_wraps)
    count = min(max_samples, int(max(min_samples, math.ceil(per_wrap * wraps))))
    prec_sigma = int(math.ceil((n_steps + 2) * params.k_base
                               * math.log2(mat.mu))) + 192
    use_bits = max(params.bits, seg.anchor.base.bits, prec_sigma + 64)
    anchor = promote(seg.anchor.with_bits(use_bits),
                     max(center_chain_prec(params.n, n_steps + 8),
                         prec_sigma + 128))
    anchor_adv = iterate(params, anchor, push * n_steps)
    mu_mp, _, _ = _mp_eigen(mat, prec_sigma)
    with mpmath.workprec(prec_sigma):
        growth = mu_mp ** (n_steps * params.k_base)
        c = (mpmath.mpf(seg.span[0]) + mpmath.mpf(seg.span[1])) / 2 * growth
        whalf = mpmath.mpf(wraps) * TWO_PI / rate / 2
    if c != 0:
        # re-base the window on an on-leaf center so the batched sweep only
        # sees one-wrap local parameters (exact chain, no float noise)
        anchor_adv = leaf_point(params, anchor_adv, seg.flavor, c, tol=1e-10,
                                bits=use_bits, work_prec=prec_sigma + 64)
    vals = _sweep_values(params, anchor_adv, seg.flavor, -whalf, whalf, count)
    return float(np.mean(good_mask(params.n, vals)))


def persistent_good_point(params: MapParams, seg: LeafSegment, horizon: int, *,
                          window_samples: int = 8192,
                          margin_floor: float = 0.05):
    """Leaf point whose swept coordinate stays good from step n_u onward.

    Follows nested parameter windows: once the image of the seed interval
    clears the sweep threshold, each generation samples a one-wrap central
    window, keeps a radius-1/4 subinterval around the sample of largest
    good margin, and hands its image (length mu^[2n] / 2, again above
    threshold) to the next generation.  Returns (point, n_u); the point is
    re-simulated over the full horizon and hard-checked before returning.
    """
    _check_leaf_safe(params)
    if horizon < 1:
        raise ValueError("horizon must be at least one step")
    _, push, _, _ = _flavor_data(params, seg.flavor)
    mat = params.matrix
    region = "u" if seg.flavor == "uu" else "s"
    rate = sweep_rate(params, seg.flavor)
    threshold = sweep_threshold(params, seg.flavor)
    half_w = 2.0 * params.n ** -0.3
    prec_sigma = int(math.ceil((horizon + 2) * params.k_base
                               * math.log2(mat.mu))) + 192
    log_tol = math.log(1e-3) - horizon * math.log(2.0 * params.n + 3.0)
    prec_fiber = max(center_chain_prec(params.n, horizon + 8)
                     + max(0, int(math.ceil(-log_tol / math.log(2.0)))),
                     prec_sigma + 128)
    use_bits = max(params.bits, seg.anchor.base.bits, prec_sigma + 64)
    anchor = promote(seg.anchor.with_bits(use_bits), prec_fiber)
    mu_mp, _, _ = _mp_eigen(mat, prec_sigma)

    def pick(anchor_g: TorusPoint, center, half, gen: int):
        """One nested-window step at generation gen.

        center/half describe the live parameter interval relative to the
        pristine anchor orbit.  The window midpoint is materialized on the
        leaf through the exact chain, so the batched sweep only ever sees
        one-wrap local parameters and stays clear of its float-noise cap.
        """
        with mpmath.workprec(prec_sigma):
            wrap = mpmath.mpf(TWO_PI) / rate
            whalf = min(half, mpmath.mpf("0.55") * wrap)
        center_pt = leaf_point(params, anchor_g, seg.flavor, center,
                               tol=1e-10, bits=use_bits,
                               work_prec=prec_sigma + 64)
        vals = _sweep_values(params, center_pt, seg.flavor, -whalf, whalf,
                             window_samples)
        margins = np.full(window_samples, np.inf)
        for cc in CRIT_CENTERS:
            dd = np.abs(np.mod(vals, TWO_PI) - cc)
            margins = np.minimum(margins, np.minimum(dd, TWO_PI - dd) - half_w)
        i = int(np.argmax(margins))
        if margins[i] < margin_floor:
            raise GoodPointError(gen, f"largest good margin {margins[i]:.4f} "
                                 f"is below the floor {margin_floor:g}")
        with mpmath.workprec(prec_sigma):
            return center + (-whalf + 2 * whalf * i / (window_samples - 1))

    with mpmath.workprec(prec_sigma):
        center = (mpmath.mpf(seg.span[0]) + mpmath.mpf(seg.span[1])) / 2
        half = (mpmath.mpf(seg.span[1]) - mpmath.mpf(seg.span[0])) / 2
        rate1 = mu_mp ** params.k_base
        quarter = mpmath.mpf(1) / 4
    n_u = None
    anchor_g = anchor
    if float(2 * half) >= threshold:
        center = pick(anchor_g, center, half, 0)
        half = quarter
        n_u = 0
    for g in range(1, horizon + 1):
        with mpmath.workprec(prec_sigma):
            center, half = center * rate1, half * rate1
        anchor_g = iterate(params, anchor_g, push)
        if n_u is None and float(2 * half) < threshold:
            continue
        center = pick(anchor_g, center, half, g)
        half = quarter
        if n_u is None:
            n_u = g
    if n_u is None:
        raise GoodPointError(horizon, "image never cleared the sweep "
                             "threshold within the horizon")
    with mpmath.workprec(prec_sigma):
        sigma0 = center * mu_mp ** (-horizon * params.k_base)
    point = leaf_point(params, seg.anchor, seg.flavor, sigma0, log_tol=log_tol,
                       bits=use_bits, work_prec=max(prec_sigma, prec_fiber) + 64)
    cur = point
    if n_u == 0 and not in_good_region(params.n, cur, region):
        raise GoodPointError(0, "re-simulated orbit left the good region")
    for g in range(1, horizon + 1):
        cur = iterate(params, cur, push)
        if g >= n_u and not in_good_region(params.n, cur, region):
            raise GoodPointError(g, "re-simulated orbit left the good region")
    return point, n_u


@dataclass(frozen=True)
class HeteroclinicCenter:
    """Connection data: z lies on the uu-leaf of p and on the same center
    leaf as the ss-leaf point of q.

    w_u and m_q are the chart evaluations from each side; base_residual is
    the wrapped base distance between them (their fiber coordinates differ,
    the two charts land on one center leaf rather than one point).
    """

    z: TorusPoint
    w_u: TorusPoint
    m_q: TorusPoint
    t: float
    s: float
    radius: float
    base_residual: float


def heteroclinic_center(params: MapParams, p: TorusPoint, q: TorusPoint,
                        radius: float = 10.0) -> HeteroclinicCenter:
    """Center leaf hit by both the uu-leaf of p and the ss-leaf of q.

    Solves t e_u - s e_s = base(q) - base(p) over the 2 pi lattice for the
    smallest max(|t|, |s|) within radius.  Exact base arithmetic makes the
    two landings agree to the dyadic grid; the residual is measured, not
    assumed.
    """
    mat = params.matrix
    eu, es = mat.e_u, mat.e_s
    du0, dv0 = _base_delta(q.base, p.base)
    det = es[0] * eu[1] - es[1] * eu[0]
    best = None
    kmax = int(math.ceil((2.0 * radius + 10.0) / TWO_PI)) + 1
    for ka in range(-kmax, kmax + 1):
        for kb in range(-kmax, kmax + 1):
            ru = du0 + TWO_PI * ka
            rv = dv0 + TWO_PI * kb
            t = (es[0] * rv - es[1] * ru) / det
            s = (eu[0] * rv - eu[1] * ru) / det
            if best is None or max(abs(t), abs(s)) < best[0] - 1e-12:
                best = (max(abs(t), abs(s)), t, s)
    size, t, s = best
    if size > radius:
        raise HeteroclinicError(size)
    w_u = leaf_point(params, p, "uu", t)
    m_q = leaf_point(params, q, "ss", s)
    res = math.hypot(*_base_delta(w_u.base, m_q.base))
    return HeteroclinicCenter(w_u, w_u, m_q, float(t), float(s), float(size),
                              float(res))


def line_parameter(params: MapParams, p: TorusPoint, q: TorusPoint,
                   flavor: str, *, radius: float = 12.0,
                   residual_tol: float = 1e-8) -> float:
    """Signed eigenline displacement carrying base(p) onto base(q).

    Enumerates 2 pi lattice representatives of the base difference and keeps
    the one closest to the eigenline of the given flavor; HolonomyError when
    the best representative is off the line by more than residual_tol or
    needs a slide longer than radius.
    """
    if flavor not in ("s", "u"):
        raise ValueError(f"flavor must be 's' or 'u', got {flavor!r}")
    leaf_flavor = "ss" if flavor == "s" else "uu"
    vec, _, _, _ = _flavor_data(params, leaf_flavor)
    du0, dv0 = _base_delta(q.base, p.base)
    kmax = int(math.ceil((radius + 10.0) / TWO_PI)) + 1
    best = None
    for ka in range(-kmax, kmax + 1):
        for kb in range(-kmax, kmax + 1):
            ru = du0 + TWO_PI * ka
            rv = dv0 + TWO_PI * kb
            sig = ru * vec[0] + rv * vec[1]
            res = math.hypot(ru - sig * vec[0], rv - sig * vec[1])
            if best is None or (res, abs(sig)) < (best[0], abs(best[1])):
                best = (res, sig)
    res, sig = best
    if res > residual_tol:
        raise HolonomyError(f"target base is off the {flavor}-line by {res:.3g}")
    if abs(sig) > radius:
        raise HolonomyError(f"holonomy parameter {sig:.3g} exceeds the radius "
                            f"{radius:g}")
    return sig


def holonomy(params: MapParams, p: TorusPoint, q: TorusPoint, w, flavor: str,
             *, radius: float = 12.0, residual_tol: float = 1e-8) -> TorusPoint:
    """Slide the point over fiber w on the center leaf of p along a strong
    leaf onto the center leaf of q.

    flavor 's' or 'u' picks the carrying family.  The base of q must lie on
    the corresponding eigenline through the base of p up to the 2 pi
    lattice, otherwise HolonomyError.  w may be a FiberPoint, an angle pair,
    or a TorusPoint; the latter keeps its extended-precision fiber payload.
    """
    leaf_flavor = "ss" if flavor == "s" else "uu"
    sig = line_parameter(params, p, q, flavor, radius=radius,
                         residual_tol=residual_tol)
    if isinstance(w, TorusPoint):
        src = TorusPoint(w.fiber, p.base, w.hp)
    else:
        fiber = w if isinstance(w, FiberPoint) \
            else FiberPoint(reduce_angle(w[0]), reduce_angle(w[1]))
        src = TorusPoint(fiber, p.base)
    return leaf_point(params, src, leaf_flavor, sig)


def holonomy_defect_grid(params: MapParams, p: TorusPoint, q: TorusPoint,
                         flavor: str = "s", grid_n: int = 20, *,
                         radius: float = 12.0,
                         residual_tol: float = 1e-8) -> float:
    """Sup fiber displacement of the strong holonomy over a fiber grid.

    The reference map is the vertical identification that keeps fiber angles
    while jumping between the two center tori; the skew structure slaves the
    true holonomy to it, so the defect is bounded by the leaf fiber slope
    times the slide length and contracts with the coupling power.
    """
    if grid_n < 1:
        raise ValueError("grid_n must be positive")
    leaf_flavor = "ss" if flavor == "s" else "uu"
    sig = line_parameter(params, p, q, flavor, radius=radius,
                         residual_tol=residual_tol)
    worst = 0.0
    step = TWO_PI / grid_n
    for i in range(grid_n):
        for j in range(grid_n):
            w = FiberPoint(reduce_angle(i * step), reduce_angle(j * step))
            out = leaf_point(params, TorusPoint(w, p.base), leaf_flavor, sig)
            gap = math.hypot(_circ(out.fiber.x - w.x),
                             _circ(out.fiber.y - w.y))
            worst = max(worst, gap)
    return worst
