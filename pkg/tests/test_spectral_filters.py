import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iresnet_reg.exceptions import DatasetAssumptionError, DegenerateModeError, DimMismatchError
from iresnet_reg.iresnet_core import extract_filter, invert
from iresnet_reg.operator_core import SingularSystem, build_singular_system
from iresnet_reg.spectral_filters import (
    FilterSpec,
    big_F_from_r,
    bias_regularization_check,
    closed_form_affine,
    closed_form_one_param,
    closed_form_relu,
    closed_form_soft_threshold,
    eval_on_training_ray,
    filter_curve,
    filter_reconstruction,
    piecewise_linear_extension,
    relu_filter,
    soft_threshold_filter,
    soft_threshold_ray,
    squared_soft_tsvd,
    tikhonov_filter,
    tsvd_bias,
    write_filter_csv,
)


class TestTikhonov:
    @pytest.mark.parametrize("L", [0.1, 0.5, 0.99])
    def test_unit_sigma(self, L):
        assert tikhonov_filter(1.0, 0.3, L) == pytest.approx(1.0)

    def test_zero_sigma(self):
        assert tikhonov_filter(0.0, 0.0, 0.9) == pytest.approx(10.0)

    def test_two_forms_agree(self):
        L, s2 = 0.5, 0.3
        alpha = (1 - L) / L
        assert (1 / L) / (alpha + s2) == pytest.approx(1 / 0.65)
        assert tikhonov_filter(s2, 0.0, L) == pytest.approx(1 / 0.65)

    def test_rejects_zero_L(self):
        with pytest.raises(ValueError):
            tikhonov_filter(0.5, 0.0, 0.0)


class TestSquaredSoftTSVD:
    def test_plateau_value(self):
        r = squared_soft_tsvd(0.5, 0.8)
        assert r == pytest.approx(2.0)
        assert 0.5 * r == pytest.approx(1.0)

    def test_zero_sigma(self):
        assert squared_soft_tsvd(0.0, 0.7) == pytest.approx(1 / 0.3)

    def test_bias(self):
        np.testing.assert_allclose(tsvd_bias(0.8, np.array([0.1]), np.array([1.0])), [0.5])

    def test_bias_vanishes_above_cutoff(self):
        b = tsvd_bias(0.8, np.array([0.2, 0.5, 0.9]), np.ones(3))
        np.testing.assert_array_equal(b, 0.0)

    def test_bias_shape_mismatch(self):
        with pytest.raises(DimMismatchError):
            tsvd_bias(0.5, np.ones(2), np.ones(3))


class TestReLUFilter:
    def test_negative_s(self):
        np.testing.assert_array_equal(relu_filter(np.array([0.01, 0.5, 1.0]), -1.0, 0.9), 1.0)

    def test_positive_s_above_cutoff(self):
        assert relu_filter(0.5, 1.0, 0.8) == pytest.approx(2.0)

    def test_zero_s_branch(self):
        assert relu_filter(0.05, 0.0, 0.8) == pytest.approx(1 / 0.2)


class TestSoftThresholdFilter:
    def test_below_threshold(self):
        # w = min(0.1 + 0.5, 0.8) = 0.6, threshold alpha / w = 0.1 / 0.6
        assert soft_threshold_filter(0.5, 0.1, 0.8, 0.1, 1.0) == 1.0

    def test_alpha_zero_reduces_to_tsvd(self):
        s2 = np.linspace(0.01, 1, 50)
        np.testing.assert_allclose(soft_threshold_filter(s2, 1.3, 0.8, 0.0, 1.0), squared_soft_tsvd(s2, 0.8))

    def test_third_regime(self):
        p, L = 2.0, 0.8
        r = soft_threshold_filter(0.5, p * 0.5, L, 0.1 * p, p)
        assert r == pytest.approx(1 / 0.5, rel=1e-14)

    @pytest.mark.parametrize("s2,q,L", [(0.5, 0.1, 0.8), (0.05, 0.2, 0.9), (0.9, 0.3, 0.5)])
    def test_continuity_at_threshold(self, s2, q, L):
        w = min(q + 1 - s2, L)
        t = q / w
        left = soft_threshold_filter(s2, t * (1 - 1e-13), L, q, 1.0)
        right = soft_threshold_filter(s2, t * (1 + 1e-13), L, q, 1.0)
        assert abs(left - right) <= 1e-12

    def test_degenerate(self):
        with pytest.raises(DegenerateModeError):
            soft_threshold_filter(1.5, 1.0, 0.5, 0.1, 10.0)


class TestTrainingRay:
    q_const = staticmethod(lambda q: lambda s2: np.full_like(s2, q))

    def test_first_regime(self):
        r = eval_on_training_ray(np.array([0.05]), 0.8, self.q_const(0.1), self.q_const(1.0))
        assert r[0] == 1.0

    def test_middle_regime(self):
        r = eval_on_training_ray(np.array([0.15]), 0.8, self.q_const(0.1), self.q_const(1.0))
        assert r[0] == pytest.approx(5.0 / 3.0, rel=1e-13)
        assert soft_threshold_ray(0.15, 0.8, 0.1) == pytest.approx(5.0 / 3.0, rel=1e-13)

    @pytest.mark.parametrize("L,q", [(0.8, 0.1), (0.9, 0.05), (0.6, 0.3)])
    def test_matches_three_regime_form(self, L, q):
        s2 = np.linspace(1e-3, 1, 400)
        r = eval_on_training_ray(s2, L, self.q_const(q), self.q_const(1.0))
        np.testing.assert_allclose(r, soft_threshold_ray(s2, L, q), rtol=0, atol=1e-12)

    def test_upper_boundary_continuity(self):
        L, q = 0.8, 0.1
        kink = q + 1 - L
        mid = (1 - q / kink) / (1 - L)
        assert mid == pytest.approx(1 / kink, rel=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.05, 0.98), st.floats(0.0, 0.5))
    def test_regime_order_and_bound(self, L, q):
        assert q / L <= q + 1 - L + 1e-15 or q / L > q + 1 - L  # ordering is data dependent
        s2 = np.linspace(1e-3, 1, 100)
        r = soft_threshold_ray(s2, L, q)
        assert np.all(r >= 0)
        assert np.all(s2 * r <= 1 + 1e-12)

    def test_lower_below_upper_when_p_large(self):
        # p > alpha / L  <=>  q < L, then alpha/(L p) < alpha/p + 1 - L
        for L in (0.5, 0.8, 0.95):
            for q in np.linspace(0.01, L - 0.01, 20):
                assert q / L < q + 1 - L

    def test_piecewise_extension(self):
        f = piecewise_linear_extension([0.1, 0.5, 0.9], [1.0, 3.0, 2.0])
        np.testing.assert_allclose(f(np.array([0.0, 0.3, 0.9, 1.0])), [1.0, 2.0, 2.0, 2.0])


class TestBigF:
    def test_unit_filter(self):
        assert big_F_from_r(0.6, 1.0, lambda s2, s: np.ones_like(s)) == pytest.approx(0.36)

    def test_tikhonov_unit_sigma(self):
        assert big_F_from_r(1.0, 2.0, lambda s2, s: tikhonov_filter(s2, s, 0.9)) == pytest.approx(1.0)

    def test_tikhonov_value(self):
        F = big_F_from_r(0.5, 1.0, lambda s2, s: tikhonov_filter(s2, s, 0.9))
        assert F == pytest.approx(0.25 / (0.1 + 0.225))


class TestClosedForm:
    def test_one_param_k(self, small_system):
        net = closed_form_one_param(small_system, 0.5)
        assert net.k == 0.5

    def test_one_param_zero_L(self, small_system, rng):
        net = closed_form_one_param(small_system, 0.0)
        x = rng.standard_normal(10)
        np.testing.assert_array_equal(net.forward(x), x)

    def test_one_param_induced_filter(self):
        net = closed_form_one_param(SingularSystem.diagonal([1.0, 0.25]), 0.9)
        r, _ = extract_filter(net, 1, 1.0, k_max=2000)
        assert r == pytest.approx(1 / (0.1 + 0.225), rel=1e-10)

    def test_affine_weights(self):
        net = closed_form_affine(SingularSystem.diagonal([0.3, 0.05]), 0.9, [1.0, 2.0])
        np.testing.assert_allclose(net.w, [0.7, 0.9])
        np.testing.assert_allclose(net.b, [0.0, 0.1])

    def test_affine_no_bias_above_cutoff(self):
        net = closed_form_affine(SingularSystem.diagonal([0.5, 0.3]), 0.8, [4.0, 4.0])
        np.testing.assert_array_equal(net.b, 0.0)

    def test_affine_induced_bias(self):
        s2 = np.array([1.0, 0.1])
        mu = np.array([0.5, 1.0])
        net = closed_form_affine(SingularSystem.diagonal(s2), 0.8, mu)
        _, bias = extract_filter(net, 1, 1.0, k_max=500)
        assert bias == pytest.approx(tsvd_bias(0.8, s2, mu)[1], rel=1e-10)

    def test_relu_weights(self):
        net = closed_form_relu(SingularSystem.diagonal([0.5]), 0.8)
        assert net.w[0] == pytest.approx(0.5)
        assert net.scalar_residual(0, -3.0) == 0.0

    def test_relu_zero_L(self, small_system):
        np.testing.assert_array_equal(closed_form_relu(small_system, 0.0).w, 0.0)

    def test_soft_threshold_p(self):
        basis = SingularSystem.diagonal([0.5])
        net = closed_form_soft_threshold(basis, 0.9, 0.9, np.array([[0.5], [2.0]]))
        assert net.stats["p"][0] == pytest.approx(2.0)
        assert net.stats["I_sizes"][0] == 1

    def test_soft_threshold_single_sample(self):
        net = closed_form_soft_threshold(SingularSystem.diagonal([0.5]), 0.9, 0.1, np.array([[1.7]]))
        assert net.stats["p"][0] == pytest.approx(1.7)

    def test_soft_threshold_alpha_zero_is_affine(self, small_system, rng):
        C = rng.standard_normal((30, 10))
        net = closed_form_soft_threshold(small_system, 0.9, 0.0, C)
        np.testing.assert_allclose(net.w, np.minimum(1 - small_system.sigma_sq, 0.9))

    def test_soft_threshold_assumption(self):
        with pytest.raises(DatasetAssumptionError):
            closed_form_soft_threshold(SingularSystem.diagonal([0.5]), 0.9, 1.0, np.array([[0.5]]))

    def test_soft_threshold_optimum(self, rng):
        # the closed-form weight minimizes the per-mode training loss over w in [0, L]
        s2, L, alpha = 0.3, 0.9, 0.2
        c = rng.uniform(0.5, 2.0, 200) * rng.choice([-1, 1], 200)
        net = closed_form_soft_threshold(SingularSystem.diagonal([s2]), L, alpha, c[:, None])

        def loss(w):
            f = np.sign(w * c) * np.maximum(np.abs(w * c) - alpha, 0)
            return np.sum((c - f - s2 * c) ** 2)

        grid = np.linspace(0, L, 20001)
        best = grid[np.argmin([loss(w) for w in grid])]
        assert net.w[0] == pytest.approx(best, abs=1e-4)


def _random_system(rng, n=20, m=24):
    A = rng.standard_normal((m, n))
    return A / np.linalg.norm(A, 2)


class TestFilterReconstruction:
    def test_zero(self, small_system):
        out = filter_reconstruction(np.zeros(10), small_system, FilterSpec("tikhonov", 0.9))
        np.testing.assert_array_equal(out, 0.0)

    def test_plateau_exact(self, rng):
        s2 = np.linspace(1, 0.5, 5)
        A = np.diag(np.sqrt(s2))
        basis = build_singular_system(A)
        x = rng.standard_normal(5)
        out = filter_reconstruction(A @ x, basis, FilterSpec("squared_soft_tsvd", 0.8))
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_dim_mismatch(self, small_system):
        with pytest.raises(DimMismatchError):
            filter_reconstruction(np.zeros(3), small_system, FilterSpec("tikhonov", 0.9))

    @pytest.mark.parametrize("L", [0.5, 0.9, 0.99])
    def test_oracle_equivalence(self, L, rng):
        A = _random_system(rng)
        basis = build_singular_system(A)
        X = rng.standard_normal((50, 20))
        C = basis.coefficients(X)
        nets = [closed_form_one_param(basis, L), closed_form_affine(basis, L, C.mean(axis=0)),
                closed_form_relu(basis, L), closed_form_soft_threshold(basis, L, 0.05, C)]
        Y = rng.standard_normal((100, 24))
        for net in nets:
            direct = filter_reconstruction(Y, basis, net.filter_spec())
            fixed = invert(net, Y @ A, k_max=20000, tol=1e-12).x
            assert np.abs(direct - fixed).max() <= 1e-8, net.family

    def test_relu_matches_tsvd_on_nonnegative(self):
        s2 = np.linspace(1, 0.01, 8)
        basis = SingularSystem.diagonal(s2)
        y = np.linspace(0.1, 2, 8)  # positive data coefficients
        a = filter_reconstruction(y, basis, FilterSpec("relu", 0.9))
        b = filter_reconstruction(y, basis, FilterSpec("squared_soft_tsvd", 0.9))
        np.testing.assert_array_equal(a, b)


class TestBiasRegularization:
    def test_squared_soft_tsvd_passes(self):
        s2 = np.geomspace(1, 1e-3, 12)
        L = 1 - 2.0 ** -np.arange(1, 14)
        rep = bias_regularization_check(L, s2, np.ones(12))
        assert rep["passed"]
        assert np.all(rep["sigma_sq_r_max"] <= 1 + 1e-12)
        assert rep["bias_norm"][-1] == 0.0

    def test_bias_strictly_decreasing(self):
        s2 = np.geomspace(1, 1e-3, 12)
        L = 1 - 2.0 ** -np.arange(1, 9)
        b = bias_regularization_check(L, s2, np.ones(12))["bias_norm"]
        assert np.all(np.diff(b) < 0)

    def test_requires_increasing_grid(self):
        with pytest.raises(ValueError):
            bias_regularization_check([0.9, 0.5], [0.5], [1.0])


class TestFilterCurve:
    def test_tikhonov_curve(self):
        s2 = np.linspace(0.005, 1, 200)
        rows = filter_curve("tikhonov", 0.9, s2)
        got = np.array([r["sigma_sq_times_r"] for r in rows])
        np.testing.assert_allclose(got, s2 / (1 - 0.9 + 0.9 * s2), rtol=1e-12)

    def test_csv_columns(self, tmp_path):
        path = tmp_path / "f.csv"
        write_filter_csv(path, filter_curve("relu", 0.8, [0.1, 0.5]))
        with open(path) as fh:
            header = next(csv.reader(fh))
        assert header == ["sigma_sq", "s", "r", "sigma_sq_times_r", "family", "L", "gamma"]

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            FilterSpec("landweber", 0.5)
