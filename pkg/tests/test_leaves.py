"""Strong-leaf charts, sampled arcs, good-fraction sweeps, the nested
good-point search, heteroclinic connections, and holonomies.

Oracles: a slaved leaf arc of parameter radius R has arclength
2 R sqrt(1 + rate^2) with rate the fiber drift per unit of base-line
parameter; the good fraction of a long swept arc is the complement of the
critical-strip measure; heteroclinic parameters solve a 2x2 lattice system
reproduced inline; everything else is cross-checked between two independent
constructions (pointwise chart vs grown polyline, batch sweep vs per-point
orbits).
"""

import math

import mpmath
import numpy as np
import pytest

from skewlab.bundles import invariant_direction
from skewlab.cones import RegionSpec, in_good_region
from skewlab.curves import RefinementError
from skewlab.leaves import (
    GoodPointError,
    HeteroclinicError,
    HolonomyError,
    LeafSegment,
    base_line_residual,
    good_fraction,
    grow_leaf_segment,
    heteroclinic_center,
    holonomy,
    holonomy_defect_grid,
    leaf_point,
    leaf_seed_segment,
    persistent_good_point,
    sweep_rate,
    sweep_threshold,
)
from skewlab.skewmap import iterate, make_params, perturb, promote
from skewlab.torus import TWO_PI, TorusPoint, circle_dist, torus_dist

ANCHOR8 = (1.0, 2.0, 0.3, 0.8)


def setup8(radius=5.0, flavor="uu"):
    params = make_params(8)
    m = TorusPoint.from_angles(*ANCHOR8)
    return params, m, leaf_seed_segment(params, m, flavor, radius)


def base_gap(a: TorusPoint, b: TorusPoint) -> float:
    au, av = a.base.angles()
    bu, bv = b.base.angles()
    return math.hypot(circle_dist(au, bu), circle_dist(av, bv))


class TestSweepScales:
    def test_rate_and_threshold_formulas(self):
        params = make_params(8)
        lam_n = params.matrix.lam ** 8
        coeff = abs(params.matrix.e_u[0])
        assert math.isclose(sweep_rate(params), coeff * lam_n, rel_tol=1e-12)
        expect = (1.0 / lam_n) / (coeff * lam_n + 3.0 * lam_n)
        assert math.isclose(sweep_threshold(params), expect, rel_tol=1e-12)

    def test_ss_rate_uses_stable_eigenvector(self):
        params = make_params(8)
        coeff = abs(params.matrix.e_s[0])
        expect = coeff * params.matrix.lam ** 8
        assert math.isclose(sweep_rate(params, "ss"), expect, rel_tol=1e-12)

    def test_threshold_exceeds_one_wrap(self):
        # a window past the threshold carries at least one full sweep of the
        # tested coordinate, so good samples always exist in it
        for n in (4, 8, 20, 100):
            params = make_params(n)
            wrap = TWO_PI / sweep_rate(params)
            assert sweep_threshold(params) > wrap


class TestLeafPoint:
    def test_zero_parameter_is_identity(self):
        params, m, _ = setup8()
        for flavor in ("uu", "ss"):
            assert torus_dist(leaf_point(params, m, flavor, 0.0), m) < 1e-13

    def test_tolerance_refinement_is_consistent(self):
        # deeper pulls must agree within the coarse tolerance
        params, m, _ = setup8()
        coarse = leaf_point(params, m, "uu", 6.0, tol=1e-12)
        fine = leaf_point(params, m, "uu", 6.0, tol=1e-24)
        assert torus_dist(coarse, fine) < 1e-12
        assert base_gap(coarse, fine) < 1e-12

    def test_leaf_is_invariant(self):
        # f(leaf(s)) lies on the leaf of f(m) at parameter s mu^[2n]
        params, m, _ = setup8()
        mat = params.matrix
        s = 0.35
        image = iterate(params, leaf_point(params, m, "uu", s), 1)
        expect = leaf_point(params, iterate(params, m, 1), "uu",
                            s * mat.mu ** params.k_base)
        assert torus_dist(image, expect) < 1e-8

    def test_ss_leaf_contracts_forward(self):
        params, m, _ = setup8()
        mat = params.matrix
        s = 0.35
        image = iterate(params, leaf_point(params, m, "ss", s), 1)
        expect = leaf_point(params, iterate(params, m, 1), "ss",
                            s * mat.mu ** -params.k_base)
        assert torus_dist(image, expect) < 1e-8

    def test_tangent_matches_finite_time_direction(self):
        params, m, _ = setup8()
        h = 1e-4
        a = leaf_point(params, m, "uu", -h)
        b = leaf_point(params, m, "uu", h)
        dx = circle_dist(b.fiber.x, a.fiber.x)
        est = invariant_direction(params, m, "uu", n_iter=12)
        v = np.abs(np.asarray(est.vector))
        slope_chart = dx / (2.0 * h)
        slope_bundle = v[0] / math.hypot(v[2], v[3])
        assert abs(slope_chart - slope_bundle) < 1e-6

    def test_deep_twist_chart_is_affordable(self):
        params = make_params(250)
        m = TorusPoint.from_angles(0.4, 1.1, 0.2, 0.9)
        pt = leaf_point(params, m, "uu", 2.0)
        assert base_gap(pt, m) > 0.1

    def test_flavor_validation(self):
        params, m, _ = setup8()
        with pytest.raises(ValueError, match="flavor"):
            leaf_point(params, m, "cc", 1.0)

    def test_fiber_mode_perturbation_allowed(self):
        params, m, _ = setup8()
        pert = perturb(params, 1e-3, seed=7, mode="fiber")
        assert torus_dist(leaf_point(pert, m, "uu", 0.0), m) < 1e-13

    def test_mixed_mode_perturbation_rejected(self):
        params, m, _ = setup8()
        pert = perturb(params, 1e-3, seed=7, mode="mixed")
        with pytest.raises(ValueError, match="fiber"):
            leaf_point(pert, m, "uu", 1.0)


class TestSeedSegments:
    def test_arclength_matches_slaving_formula(self):
        params, _, seg = setup8(radius=5.0)
        rate = sweep_rate(params)
        expect = 10.0 * math.sqrt(1.0 + rate * rate)
        assert math.isclose(seg.arclength, expect, rel_tol=1e-9)

    def test_base_track_sits_on_eigenline(self):
        params, _, seg = setup8(radius=5.0)
        assert base_line_residual(params, seg) < 1e-10

    def test_ss_flavor_follows_stable_line(self):
        params, _, seg = setup8(radius=3.0, flavor="ss")
        rate = sweep_rate(params, "ss")
        expect = 6.0 * math.sqrt(1.0 + rate * rate)
        assert math.isclose(seg.arclength, expect, rel_tol=1e-9)
        assert base_line_residual(params, seg) < 1e-10

    def test_span_and_default_sampling(self):
        _, _, seg = setup8(radius=5.0)
        assert seg.span == (-5.0, 5.0)
        assert len(seg.samples) == max(17, int(math.ceil(20.0)) + 1)

    def test_deep_twist_segment(self):
        params = make_params(150)
        m = TorusPoint.from_angles(0.7, 1.9, 0.25, 0.65)
        seg = leaf_seed_segment(params, m, "uu", 2.0, n_pts=9)
        assert base_line_residual(params, seg) < 1e-10

    def test_validation(self):
        params, m, _ = setup8()
        with pytest.raises(ValueError, match="radius"):
            leaf_seed_segment(params, m, "uu", 0.0)
        with pytest.raises(ValueError, match="two samples"):
            leaf_seed_segment(params, m, "uu", 1.0, n_pts=1)
        with pytest.raises(ValueError, match="flavor"):
            LeafSegment("cc", m, (m, m), 1.0, (0.0, 1.0))
        with pytest.raises(ValueError, match="increasing"):
            LeafSegment("uu", m, (m, m), 1.0, (1.0, 1.0))


class TestGrownSegments:
    def test_polyline_matches_pointwise_chart(self):
        # two independent constructions of the same leaf: every polyline
        # sample must reproduce under the chart at its base-line parameter
        params, m, _ = setup8()
        seg = grow_leaf_segment(params, m, "uu", 3.0, n_gen=2, delta=0.05)
        eu = params.matrix.e_u
        au, av = m.base.angles()
        for i in np.linspace(0, len(seg.samples) - 1, 7).astype(int):
            pt = seg.samples[int(i)]
            bu, bv = pt.base.angles()
            du = (bu - au + math.pi) % TWO_PI - math.pi
            dv = (bv - av + math.pi) % TWO_PI - math.pi
            sig = du * eu[0] + dv * eu[1]
            chart = leaf_point(params, m, "uu", sig)
            assert torus_dist(chart, pt) < 1e-9

    def test_growth_depth_consistency(self):
        params, m, _ = setup8()
        a = grow_leaf_segment(params, m, "uu", 2.0, n_gen=2, delta=0.05)
        b = grow_leaf_segment(params, m, "uu", 2.0, n_gen=3, delta=0.05)
        assert abs(a.arclength - b.arclength) / a.arclength < 1e-6

    def test_arclength_agrees_with_seed_segment(self):
        params, m, _ = setup8()
        grown = grow_leaf_segment(params, m, "uu", 3.0, n_gen=2, delta=0.02)
        seeded = leaf_seed_segment(params, m, "uu", 3.0)
        # grown span is trimmed at sample granularity, compare densities
        grown_rate = grown.arclength / (grown.span[1] - grown.span[0])
        seeded_rate = seeded.arclength / 6.0
        assert abs(grown_rate - seeded_rate) / seeded_rate < 1e-3

    def test_twist_cap_enforced(self):
        params = make_params(20)
        m = TorusPoint.from_angles(*ANCHOR8)
        with pytest.raises(ValueError, match="leaf_seed_segment"):
            grow_leaf_segment(params, m, "uu", 1.0)

    def test_budget_overflow_raises(self):
        params, m, _ = setup8()
        with pytest.raises(RefinementError):
            grow_leaf_segment(params, m, "uu", 3.0, n_gen=2, delta=0.05,
                              max_evals=30)

    def test_validation(self):
        params, m, _ = setup8()
        with pytest.raises(ValueError, match="radius"):
            grow_leaf_segment(params, m, "uu", -1.0)
        with pytest.raises(ValueError, match="generation"):
            grow_leaf_segment(params, m, "uu", 1.0, n_gen=0)
        with pytest.raises(ValueError, match="delta"):
            grow_leaf_segment(params, m, "uu", 1.0, delta=0.0)


class TestGoodFraction:
    def test_matches_strip_complement_at_deep_twist(self):
        params = make_params(100)
        m = TorusPoint.from_angles(1.2, 0.4, 0.15, 0.45)
        seg = leaf_seed_segment(params, m, "uu", 5.0)
        frac = good_fraction(params, seg, 2)
        expect = 1.0 - RegionSpec(100).excluded_fraction()
        assert abs(frac - expect) < 0.005

    def test_matches_strip_complement_at_small_twist(self):
        params, _, seg = setup8()
        frac = good_fraction(params, seg, 3)
        expect = 1.0 - RegionSpec(8).excluded_fraction()
        assert abs(frac - expect) < 0.02

    def test_depth_stability(self):
        params = make_params(100)
        m = TorusPoint.from_angles(1.2, 0.4, 0.15, 0.45)
        seg = leaf_seed_segment(params, m, "uu", 5.0)
        assert abs(good_fraction(params, seg, 2)
                   - good_fraction(params, seg, 3)) < 0.02

    def test_monte_carlo_cross_check(self):
        # independent construction: per-point charts pushed by the exact
        # orbit chain, no batching
        params, m, seg = setup8()
        n_steps, count = 2, 120
        growth = params.matrix.mu ** (n_steps * params.k_base)
        rng = np.random.default_rng(20240811)
        hits = 0
        for s in rng.uniform(-5.0, 5.0, size=count):
            pt = iterate(params, leaf_point(params, m, "uu", float(s)),
                         n_steps)
            hits += in_good_region(params.n, pt, "u")
        mc = hits / count
        frac = good_fraction(params, seg, n_steps)
        sigma = math.sqrt(mc * (1.0 - mc) / count)
        assert abs(mc - frac) < 4.0 * sigma + 0.02

    def test_below_threshold_rejected(self):
        params, m, _ = setup8()
        seg = leaf_seed_segment(params, m, "uu", 0.001)
        with pytest.raises(ValueError, match="threshold"):
            good_fraction(params, seg, 0)


class TestPersistentGoodPoint:
    def test_small_twist_long_horizon(self):
        params, _, seg = setup8()
        horizon = 30
        point, n_u = persistent_good_point(params, seg, horizon)
        assert n_u == 1
        cur = point
        for g in range(1, horizon + 1):
            cur = iterate(params, cur, 1)
            if g >= n_u:
                assert in_good_region(params.n, cur, "u"), f"left at step {g}"

    def test_deep_twist(self):
        params = make_params(150)
        m = TorusPoint.from_angles(0.7, 1.9, 0.25, 0.65)
        seg = leaf_seed_segment(params, m, "uu", 5.0)
        horizon = 8
        point, n_u = persistent_good_point(params, seg, horizon)
        cur = point
        for g in range(1, horizon + 1):
            cur = iterate(params, cur, 1)
            if g >= n_u:
                assert in_good_region(params.n, cur, "u")

    def test_determinism(self):
        params, _, seg = setup8()
        a, na = persistent_good_point(params, seg, 10)
        b, nb = persistent_good_point(params, seg, 10)
        assert na == nb
        assert torus_dist(a, b) == 0.0

    def test_point_lies_on_seed_leaf(self):
        params, _, seg = setup8()
        point, _ = persistent_good_point(params, seg, 10)
        # its base must sit on the unstable eigenline through the anchor
        eu = params.matrix.e_u
        au, av = seg.anchor.base.angles()
        bu, bv = point.base.angles()
        du = (bu - au + math.pi) % TWO_PI - math.pi
        dv = (bv - av + math.pi) % TWO_PI - math.pi
        sig = du * eu[0] + dv * eu[1]
        res = math.hypot(du - sig * eu[0], dv - sig * eu[1])
        assert res < 1e-9

    def test_horizon_validation(self):
        params, _, seg = setup8()
        with pytest.raises(ValueError, match="horizon"):
            persistent_good_point(params, seg, 0)


class TestHeteroclinic:
    def test_same_point_is_trivial(self):
        params, m, _ = setup8()
        hc = heteroclinic_center(params, m, m)
        assert hc.t == 0.0 and hc.s == 0.0
        assert torus_dist(hc.z, m) < 1e-13

    def test_lattice_solution_matches_inline_oracle(self):
        params = make_params(8)
        p = TorusPoint.from_angles(1.0, 2.0, 0.0, 0.0)
        q = TorusPoint.from_angles(0.4, 5.0, math.pi, math.pi)
        hc = heteroclinic_center(params, p, q)
        eu, es = params.matrix.e_u, params.matrix.e_s
        best = None
        for ka in range(-4, 5):
            for kb in range(-4, 5):
                ru = math.pi + TWO_PI * ka
                rv = math.pi + TWO_PI * kb
                det = es[0] * eu[1] - es[1] * eu[0]
                t = (es[0] * rv - es[1] * ru) / det
                s = (eu[0] * rv - eu[1] * ru) / det
                if best is None or max(abs(t), abs(s)) < best[0] - 1e-12:
                    best = (max(abs(t), abs(s)), t, s)
        assert abs(hc.t - best[1]) < 1e-9
        assert abs(hc.s - best[2]) < 1e-9
        assert abs(hc.t - -4.324031329886051) < 1e-9

    def test_two_charts_land_on_one_center_leaf(self):
        params, m, _ = setup8()
        q = TorusPoint.from_angles(0.4, 5.0, 2.0, 4.0)
        hc = heteroclinic_center(params, m, q)
        assert hc.base_residual < 1e-12
        assert base_gap(hc.w_u, hc.m_q) < 1e-12

    def test_radius_too_small_raises(self):
        params = make_params(8)
        p = TorusPoint.from_angles(1.0, 2.0, 0.0, 0.0)
        q = TorusPoint.from_angles(0.4, 5.0, math.pi, math.pi)
        with pytest.raises(HeteroclinicError) as err:
            heteroclinic_center(params, p, q, radius=1.0)
        assert err.value.min_radius > 4.0


class TestHolonomy:
    def test_identity(self):
        params, m, _ = setup8()
        assert torus_dist(holonomy(params, m, m, m.fiber, "s"), m) < 1e-13

    def test_unstable_leg_matches_chart(self):
        params, m, _ = setup8()
        q = TorusPoint.from_angles(0.4, 5.0, 2.0, 4.0)
        hc = heteroclinic_center(params, m, q)
        w = holonomy(params, m, hc.z, m.fiber, "u")
        assert torus_dist(w, leaf_point(params, m, "uu", hc.t)) < 1e-12

    def test_composite_reaches_target_base(self):
        params, m, _ = setup8()
        q = TorusPoint.from_angles(0.4, 5.0, 2.0, 4.0)
        hc = heteroclinic_center(params, m, q)
        w1 = holonomy(params, m, hc.z, m.fiber, "u")
        w2 = holonomy(params, hc.z, q, w1.fiber, "s")
        assert base_gap(w2, q) < 1e-12

    def test_off_line_target_rejected(self):
        params = make_params(8)
        p = TorusPoint.from_angles(1.0, 2.0, 0.0, 0.0)
        q = TorusPoint.from_angles(0.4, 5.0, math.pi, math.pi)
        with pytest.raises(HolonomyError, match="off the s-line"):
            holonomy(params, p, q, p.fiber, "s")

    def test_flavor_validation(self):
        params, m, _ = setup8()
        with pytest.raises(ValueError, match="flavor"):
            holonomy(params, m, m, m.fiber, "x")

    def test_defect_grid_within_slope_bound(self):
        # the vertical identification defect is the swept-coordinate drift,
        # bounded by the leaf fiber slope times the slide length
        params = make_params(8)
        p = TorusPoint.from_angles(1.0, 2.0, 0.3, 0.8)
        q = leaf_point(params, p, "ss", 3.0)
        d = holonomy_defect_grid(params, p, q, "s", 6)
        assert 0.0 < d <= 2.0 * sweep_rate(params, "ss") * 3.0

    def test_defect_grid_contracts_with_coupling(self):
        p = TorusPoint.from_angles(1.0, 2.0, 0.3, 0.8)
        defects = []
        for n in (8, 10):
            params = make_params(n)
            q = leaf_point(params, p, "ss", 3.0)
            defects.append(holonomy_defect_grid(params, p, q, "s", 5))
        assert defects[1] < defects[0]

    def test_defect_grid_rejects_empty_grid(self):
        params, m, _ = setup8()
        with pytest.raises(ValueError, match="grid_n"):
            holonomy_defect_grid(params, m, m, "s", 0)


class TestPromotionChain:
    def test_promote_keeps_extended_payload(self):
        # raising the working precision must not fall back to the float64
        # mirror once an orbit has accumulated extended-precision digits
        params, m, _ = setup8()
        hp = promote(m, 200)
        chain = iterate(params, hp, 12)
        raised = promote(chain, 800)
        with mpmath.workprec(800):
            dx = abs(raised.hp[0] - chain.hp[0])
        assert dx == 0
        assert raised.hp[2] == 800
