"""Strong direction, pinch, Lyapunov, and conservativity tests.

The fixed-point cases are cross-checked against plain power iteration on
the explicit derivative matrix, computed here independently of the module
under test.  Spectrum extremes compare against the analytic k_base*log(mu).
"""

import math

import numpy as np
import pytest

from skewlab.bundles import (
    direction_gap,
    invariant_direction,
    lyapunov_batch,
    lyapunov_spectrum,
    transversality_check,
    volume_defect,
)
from skewlab.precision import derive_rng
from skewlab.skewmap import derivative, forward, inverse, make_params
from skewlab.torus import TorusPoint, eigen_data, random_point, split_vector

MAT = eigen_data(((2, 1), (1, 1)))
LOG_MU = math.log(MAT.mu)
ORIGIN = TorusPoint.from_angles(0.0, 0.0, 0.0, 0.0)


def power_iterate(mat: np.ndarray, v0: np.ndarray, rounds: int = 200) -> np.ndarray:
    v = v0.copy()
    for _ in range(rounds):
        v = mat @ v
        v /= np.linalg.norm(v)
    return v


class TestInvariantDirection:
    def test_fixed_point_uu_matches_power_iteration(self):
        params = make_params(10.0)
        target = power_iterate(derivative(params, ORIGIN).as_array(),
                               np.array([1.0, 0.0, 1.0, 1.0]))
        est = invariant_direction(params, ORIGIN, "uu", 8)
        assert abs(np.linalg.norm(est.vector) - 1.0) < 1e-12
        assert est.converged
        assert est.convergence_gap < 1e-12
        assert direction_gap(est.vector, target) < 1e-10

    def test_fixed_point_ss_matches_inverse_power_iteration(self):
        params = make_params(10.0)
        target = power_iterate(derivative(params, ORIGIN, "backward").as_array(),
                               np.array([1.0, 0.3, 1.0, -0.5]))
        est = invariant_direction(params, ORIGIN, "ss", 8)
        assert est.converged
        assert direction_gap(est.vector, target) < 1e-10

    def test_uu_field_invariant_under_derivative(self):
        # Df(m) E_uu(m) must align with E_uu(f m); residual is the rejection
        # norm, which resolves below the arccos granularity.
        params = make_params(20.0)
        rng = derive_rng(5, 1)
        worst = 0.0
        for _ in range(100):
            m = random_point(rng, params.bits)
            here = invariant_direction(params, m, "uu", 6).vector
            there = invariant_direction(params, forward(params, m), "uu", 6).vector
            image = derivative(params, m).apply(here)
            image /= np.linalg.norm(image)
            worst = max(worst, direction_gap(image, there))
        assert worst < 1e-8

    def test_ss_field_invariant_under_backward_derivative(self):
        params = make_params(20.0)
        rng = derive_rng(23, 0)
        for _ in range(20):
            m = random_point(rng, params.bits)
            here = invariant_direction(params, m, "ss", 6).vector
            there = invariant_direction(params, inverse(params, m), "ss", 6).vector
            image = derivative(params, m, "backward").apply(here)
            image /= np.linalg.norm(image)
            assert direction_gap(image, there) < 1e-8

    def test_gap_shrinks_with_depth(self):
        params = make_params(5.0)
        m = random_point(derive_rng(22, 0), params.bits)
        gaps = [invariant_direction(params, m, "uu", d).convergence_gap
                for d in (2, 3, 6)]
        assert gaps[0] > gaps[1] > gaps[2]
        shallow = invariant_direction(params, m, "uu", 2, tol=1e-9)
        assert not shallow.converged
        assert math.isfinite(shallow.convergence_gap)

    def test_sign_convention(self):
        params = make_params(12.0)
        rng = derive_rng(31, 4)
        for _ in range(10):
            m = random_point(rng, params.bits)
            uu = invariant_direction(params, m, "uu", 5)
            ss = invariant_direction(params, m, "ss", 5)
            assert split_vector(MAT, uu.vector).v_u > 0
            assert split_vector(MAT, ss.vector).v_s > 0

    def test_input_validation(self):
        params = make_params(10.0)
        with pytest.raises(ValueError, match="flavor"):
            invariant_direction(params, ORIGIN, "cu", 5)
        with pytest.raises(ValueError, match="n_iter"):
            invariant_direction(params, ORIGIN, "uu", 0)

    def test_perturbed_field_still_invariant(self):
        params = make_params(15.0, epsilon=1e-3, seed=8)
        rng = derive_rng(37, 2)
        for _ in range(10):
            m = random_point(rng, params.bits)
            here = invariant_direction(params, m, "uu", 6).vector
            there = invariant_direction(params, forward(params, m), "uu", 6).vector
            image = derivative(params, m).apply(here)
            image /= np.linalg.norm(image)
            assert direction_gap(image, there) < 1e-8


class TestTransversality:
    def test_pinch_bands_n20(self):
        params = make_params(20.0)
        rep = transversality_check(params, 200, seed=3)
        assert rep.passed
        assert rep.scale == pytest.approx(MAT.lam ** 20, rel=1e-12)
        assert rep.center_u == pytest.approx(0.8506508083520399, abs=1e-15)
        assert rep.center_s == pytest.approx(0.5257311121191336, abs=1e-15)
        lo_u, hi_u = rep.ratios_u
        assert rep.center_u - rep.halfwidth <= lo_u <= hi_u <= rep.center_u + rep.halfwidth
        lo_s, hi_s = rep.ratios_s
        assert rep.center_s - rep.halfwidth <= lo_s <= hi_s <= rep.center_s + rep.halfwidth
        assert rep.worst_gap < 1e-9

    def test_pinch_bands_n10(self):
        rep = transversality_check(make_params(10.0), 100, seed=3)
        assert rep.passed
        # wider bands at smaller n: halfwidth tracks 3 lam^n
        assert rep.halfwidth == pytest.approx(3.0 * MAT.lam ** 10 + 1e-7, rel=1e-12)

    def test_large_n_rejected(self):
        with pytest.raises(ValueError, match="n <= 40"):
            transversality_check(make_params(41.0), 10, seed=0)

    def test_deterministic(self):
        params = make_params(20.0)
        assert transversality_check(params, 50, seed=12) == \
            transversality_check(params, 50, seed=12)


class TestLyapunovSpectrum:
    def test_extremes_and_symmetry_n10(self):
        params = make_params(10.0)
        m = random_point(derive_rng(9, 2), params.bits)
        rep = lyapunov_spectrum(params, m, 10_000)
        extreme = 20.0 * LOG_MU
        assert rep.exponents[0] == pytest.approx(extreme, abs=1e-3)
        assert rep.exponents[3] == pytest.approx(-extreme, abs=1e-3)
        assert rep.sum_defect < 1e-6
        assert rep.exponents[1] > 0.5
        assert rep.exponents[2] < -0.5
        assert abs(rep.exponents[1] + rep.exponents[2]) < 0.05

    def test_sorted_descending(self):
        params = make_params(8.0)
        m = random_point(derive_rng(15, 6), params.bits)
        rep = lyapunov_spectrum(params, m, 500)
        assert list(rep.exponents) == sorted(rep.exponents, reverse=True)

    def test_batch_matches_single(self):
        params = make_params(8.0)
        m = random_point(derive_rng(16, 1), params.bits)
        single = lyapunov_spectrum(params, m, 300)
        batch = lyapunov_batch(params, [m], 300)[0]
        assert single.exponents == batch.exponents

    def test_alternate_matrix_extreme(self):
        entries = ((3, 2), (1, 1))
        params = make_params(3.0, entries=entries)
        m = random_point(derive_rng(21, 0), params.bits)
        rep = lyapunov_spectrum(params, m, 1000)
        assert rep.exponents[0] == pytest.approx(6.0 * math.log(eigen_data(entries).mu),
                                                 abs=1e-3)
        assert rep.sum_defect < 1e-6

    def test_perturbed_full_qr(self):
        params = make_params(2.0, epsilon=1e-3, seed=6)
        m = random_point(derive_rng(13, 1), params.bits)
        rep = lyapunov_spectrum(params, m, 2000)
        assert rep.exponents[0] == pytest.approx(4.0 * LOG_MU, abs=0.05)
        assert rep.exponents[3] == pytest.approx(-4.0 * LOG_MU, abs=0.05)
        assert rep.sum_defect < 1e-9

    def test_short_horizon_rejected(self):
        with pytest.raises(ValueError, match="horizon"):
            lyapunov_spectrum(make_params(5.0), ORIGIN, 50)


class TestVolumeDefect:
    def test_unperturbed_blockwise_exact(self):
        assert volume_defect(make_params(20.0), 200) < 1e-9

    def test_perturbed_small(self):
        assert volume_defect(make_params(20.0, epsilon=1e-2, seed=4), 200) < 1e-8

    def test_large_n_perturbed(self):
        assert volume_defect(make_params(200.0, epsilon=1e-3, seed=2), 100) < 1e-6
