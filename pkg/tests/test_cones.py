import math

import numpy as np
import pytest

from skewlab.cones import (
    ConeSpec,
    ConeSweepReport,
    RegionSpec,
    boundary_vectors,
    center_expansion_sweep,
    check_center_expansion,
    cone_contains,
    cone_invariance_sweep,
    cone_ratio,
    good_intervals,
    good_mask,
    in_good_region,
)
from skewlab.precision import derive_rng
from skewlab.skewmap import make_params, perturb
from skewlab.torus import TWO_PI, TorusPoint, eigen_data

MAT = eigen_data(((2, 1), (1, 1)))


class TestRegions:
    def test_half_width_formula(self):
        spec = RegionSpec(100)
        assert spec.half_width == pytest.approx(2.0 * 100 ** -0.3, abs=1e-15)
        assert spec.half_width == pytest.approx(0.50238, abs=1e-5)

    def test_excluded_fraction_value(self):
        assert RegionSpec(100).excluded_fraction() == pytest.approx(0.31983, abs=1e-5)

    def test_half_width_override_validated(self):
        with pytest.raises(ValueError):
            RegionSpec(100, half_width=0.5)

    def test_good_region_examples(self):
        assert in_good_region(100, TorusPoint.from_angles(0, 0, 0, 0), "u")
        assert not in_good_region(100, TorusPoint.from_angles(1.6, 0, 0, 0), "u")
        # the complement is closed: the exact boundary point is good
        edge = math.pi / 2 + 2.0 * 100 ** -0.3
        assert in_good_region(100, TorusPoint.from_angles(edge, 0, 0, 0), "u")

    def test_flavor_s_tests_y(self):
        m = TorusPoint.from_angles(1.6, 0.0, 0, 0)
        assert in_good_region(100, m, "s")
        assert not in_good_region(100, m, "u")
        with pytest.raises(ValueError):
            in_good_region(100, m, "x")

    def test_mask_agrees_with_pointwise(self):
        xs = np.linspace(0, TWO_PI, 500, endpoint=False)
        mask = good_mask(8, xs)
        for x, ok in zip(xs, mask):
            assert ok == in_good_region(8, TorusPoint.from_angles(x, 0, 0, 0), "u")

    def test_good_intervals_cover_mask(self):
        ivals = good_intervals(8)
        half = 2.0 * 8 ** -0.3
        assert ivals[0][1] == pytest.approx(math.pi / 2 - half, abs=1e-15)
        assert ivals[1] == pytest.approx((math.pi / 2 + half, 3 * math.pi / 2 - half))
        total = sum(hi - lo for lo, hi in ivals)
        assert total == pytest.approx(TWO_PI - 4 * half, abs=1e-12)


class TestConeMembership:
    def test_pure_stable_vector(self):
        assert cone_contains(MAT, ConeSpec("stable", 1e-6), np.array([0, 0, *MAT.e_s]))

    def test_horizontal_examples(self):
        cone = ConeSpec("horizontal", 0.0631)
        assert cone_ratio(MAT, cone, np.array([102.0, 1.0, 0, 0])) == pytest.approx(1 / 102)
        assert cone_contains(MAT, cone, np.array([102.0, 1.0, 0, 0]))
        assert not cone_contains(MAT, cone, np.array([1.0, 1.0, 0, 0]))

    def test_duality_under_coordinate_swap(self):
        rng = derive_rng(61, 0)
        for _ in range(100):
            v = rng.normal(size=4)
            swapped = np.array([v[1], v[0], v[2], v[3]])
            theta = rng.uniform(0.01, 1.0)
            assert cone_contains(MAT, ConeSpec("horizontal", theta), v) == \
                cone_contains(MAT, ConeSpec("vertical", theta), swapped)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cone_ratio(MAT, ConeSpec("stable", 0.1), np.zeros(4))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ConeSpec("diagonal", 0.1)
        with pytest.raises(ValueError):
            ConeSpec("stable", 0.0)

    def test_boundary_vectors_sit_on_boundary(self):
        rng = derive_rng(62, 0)
        for kind in ("stable", "unstable"):
            cone = ConeSpec(kind, 0.1)
            vecs = boundary_vectors(MAT, cone, 50, rng)
            for v in vecs:
                assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
                assert cone_ratio(MAT, cone, v) == pytest.approx(0.1, abs=1e-12)


class TestInvarianceSweep:
    @pytest.mark.parametrize("n", [10, 20, 50])
    def test_unperturbed_both_cones(self, n):
        p = make_params(n)
        for kind in ("unstable", "stable"):
            rep = cone_invariance_sweep(p, ConeSpec(kind, 0.1), 2000, seed=2)
            assert rep.passed, rep
            assert rep.worst_ratio < 0.1

    def test_perturbed_still_contracts(self):
        pp = perturb(make_params(20), 1e-3, 5)
        for kind in ("unstable", "stable"):
            rep = cone_invariance_sweep(pp, ConeSpec(kind, 0.1), 2000, seed=3)
            assert rep.passed, rep

    def test_eigendirection_maps_to_zero_ratio(self):
        # a pure base unstable vector stays pure under the triangular blocks:
        # its center image comes only from the coupling row, which feeds the
        # unstable coefficient, so the ratio stays far inside the cone
        p = make_params(50)
        from skewlab.skewmap import derivative
        from skewlab.torus import random_point
        rng = derive_rng(63, 0)
        m = random_point(rng)
        v = np.array([0.0, 0.0, *MAT.e_u])
        img = derivative(p, m).apply(v)
        ratio = cone_ratio(MAT, ConeSpec("unstable", 0.1), img)
        assert ratio < 1e-12

    def test_center_cone_kind_rejected(self):
        p = make_params(10)
        with pytest.raises(ValueError):
            cone_invariance_sweep(p, ConeSpec("horizontal", 0.1), 10, seed=1)


class TestCenterExpansion:
    def test_growth_at_origin(self):
        p = make_params(100)
        m = TorusPoint.from_angles(0, 0, 1.1, 2.2)
        rep = check_center_expansion(p, m, np.array([1.0, 0, 0, 0]))
        assert rep.precondition is None
        assert rep.growth == pytest.approx(math.hypot(102.0, 1.0), abs=1e-12)
        assert rep.growth == pytest.approx(102.005, abs=1e-3)
        assert rep.in_cone_after and rep.passed

    def test_growth_at_good_boundary(self):
        p = make_params(100)
        x = math.pi / 2 - 2.0 * 100 ** -0.3   # cos x = sin(half_width)
        m = TorusPoint.from_angles(x, 0, 0.5, 0.7)
        rep = check_center_expansion(p, m, np.array([1.0, 0, 0, 0]))
        assert rep.precondition is None
        expected = math.hypot(100.0 * math.cos(x) + 2.0, 1.0)
        assert rep.growth == pytest.approx(expected, abs=1e-12)
        assert rep.growth == pytest.approx(50.16, abs=0.01)
        assert rep.passed

    def test_cone_boundary_vector_still_expands(self):
        p = make_params(100)
        theta = p.theta()
        m = TorusPoint.from_angles(0, 0, 0.2, 0.9)
        rep = check_center_expansion(p, m, np.array([1.0, theta, 0, 0]))
        assert rep.precondition is None
        assert rep.in_cone_after and rep.growth > 10.0

    def test_preconditions_reported_not_raised(self):
        p = make_params(100)
        inside_crit = TorusPoint.from_angles(1.6, 0, 0, 0)
        rep = check_center_expansion(p, inside_crit, np.array([1.0, 0, 0, 0]))
        assert rep.precondition == "point outside the good region"
        assert not rep.passed
        good = TorusPoint.from_angles(0, 0, 0, 0)
        rep = check_center_expansion(p, good, np.array([1.0, 0, 0.1, 0]))
        assert rep.precondition == "vector has base components"
        rep = check_center_expansion(p, good, np.array([1.0, 0.9, 0, 0]))
        assert rep.precondition == "vector outside the horizontal cone"
        with pytest.raises(ValueError):
            check_center_expansion(p, good, np.zeros(4))

    @pytest.mark.parametrize("n", [100, 150, 200])
    def test_sweep_no_violations(self, n):
        rep = center_expansion_sweep(make_params(n), 10_000, seed=4)
        assert rep.passed and rep.violations == 0
        assert rep.min_growth > math.sqrt(n)

    def test_sweep_perturbed(self):
        rep = center_expansion_sweep(perturb(make_params(100), 1e-3, 6), 10_000, seed=4)
        assert rep.passed and rep.violations == 0
