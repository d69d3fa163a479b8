import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iresnet_reg.exceptions import NoConvergenceError, NotSymmetricError, ZeroOperatorError
from iresnet_reg.operator_core import (
    NoiseModel,
    build_singular_system,
    jacobi_eigh,
    normalize_operator,
    power_iteration_norm,
    radon_matrix,
    sample_noise,
)


class TestJacobiEigh:
    def test_identity(self):
        w, V = jacobi_eigh(np.eye(2))
        np.testing.assert_allclose(w, [1.0, 1.0])
        np.testing.assert_allclose(np.abs(V), np.eye(2))

    def test_already_diagonal(self):
        w, V = jacobi_eigh(np.diag([4.0, 1.0]))
        np.testing.assert_allclose(w, [4.0, 1.0])
        np.testing.assert_allclose(V, np.eye(2))

    def test_two_by_two_hand_solution(self):
        w, V = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-14)
        r = 1 / np.sqrt(2)
        np.testing.assert_allclose(V[:, 0], [r, r], atol=1e-14)
        np.testing.assert_allclose(V[:, 1], [r, -r], atol=1e-14)

    def test_sign_convention(self, rng):
        M = rng.standard_normal((9, 9))
        w, V = jacobi_eigh(M + M.T)
        for j in range(9):
            first = V[np.flatnonzero(np.abs(V[:, j]) > 1e-12)[0], j]
            assert first > 0

    @pytest.mark.parametrize("n", [1, 2, 3, 7, 30])
    def test_matches_lapack(self, n, rng):
        M = rng.standard_normal((n, n))
        M = M + M.T
        w, V = jacobi_eigh(M)
        np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(M))[::-1], atol=1e-12)
        np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-12)
        np.testing.assert_allclose(M @ V, V * w, atol=1e-11)

    def test_descending(self, rng):
        M = rng.standard_normal((12, 12))
        w, _ = jacobi_eigh(M @ M.T)
        assert np.all(np.diff(w) <= 0)

    def test_rejects_asymmetric(self):
        with pytest.raises(NotSymmetricError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_non_square(self):
        with pytest.raises(NotSymmetricError):
            jacobi_eigh(np.ones((2, 3)))

    def test_sweeps_exhausted(self, rng):
        M = rng.standard_normal((20, 20))
        with pytest.raises(NoConvergenceError):
            jacobi_eigh(M + M.T, max_sweeps=1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31))
    def test_off_diagonal_tolerance(self, n, seed):
        M = np.random.default_rng(seed).standard_normal((n, n))
        M = M + M.T
        w, V = jacobi_eigh(M, tol=1e-13)
        rotated = V.T @ M @ V
        off = rotated - np.diag(np.diag(rotated))
        assert np.linalg.norm(off) <= 1e-12 * np.linalg.norm(M)


class TestSingularSystem:
    def test_diagonal_operator(self):
        s = build_singular_system(np.diag([1.0, 0.5]))
        np.testing.assert_allclose(s.sigma_sq, [1.0, 0.25])
        np.testing.assert_allclose(s.v, np.eye(2))
        assert s.null_dim == 0

    def test_rank_one(self):
        s = build_singular_system(np.array([[0.0, 1.0], [0.0, 0.0]]))
        assert s.n == 1
        assert s.null_dim == 1
        np.testing.assert_allclose(s.sigma_sq, [1.0])

    def test_zero_operator(self):
        with pytest.raises(ZeroOperatorError):
            build_singular_system(np.zeros((3, 2)))

    @pytest.mark.parametrize("method", ["jacobi", "lapack"])
    def test_invariants_random(self, method, rng):
        A, _ = normalize_operator(rng.standard_normal((15, 10)))
        s = build_singular_system(A, method=method)
        assert np.abs(s.v.T @ s.v - np.eye(s.n)).max() <= 1e-10
        assert np.all(np.linalg.norm(A @ s.v - s.u * s.sigma, axis=0) <= 1e-8)
        assert np.all(np.diff(s.sigma_sq) < 0)
        assert abs(s.sigma_sq[0] - 1.0) <= 1e-10

    def test_reconstruction_on_range(self, rng):
        A = rng.standard_normal((4, 7))
        s = build_singular_system(A)
        x = A.T @ rng.standard_normal(4)  # orthogonal to the null space
        assert np.linalg.norm(s.project(x) - x) <= 1e-8

    def test_data_coefficients_match_adjoint(self, rng):
        A = rng.standard_normal((6, 5))
        s = build_singular_system(A)
        y = rng.standard_normal(6)
        np.testing.assert_allclose(s.data_coefficients(y), s.coefficients(A.T @ y), atol=1e-12)


class TestNormalizeOperator:
    def test_diag(self):
        B, scale = normalize_operator(np.diag([2.0, 1.0]))
        np.testing.assert_allclose(B, np.diag([1.0, 0.5]))
        assert scale == pytest.approx(2.0, abs=1e-12)

    def test_idempotent(self, rng):
        B, _ = normalize_operator(rng.standard_normal((8, 5)))
        C, scale = normalize_operator(B)
        assert abs(scale - 1.0) <= 1e-10
        assert np.abs(C - B).max() <= 1e-10

    def test_matches_svd(self, rng):
        A = rng.standard_normal((12, 9))
        assert power_iteration_norm(A) == pytest.approx(np.linalg.norm(A, 2), rel=1e-12)

    def test_zero(self):
        with pytest.raises(ZeroOperatorError):
            normalize_operator(np.zeros((2, 2)))


class TestRadonMatrix:
    def test_default_shape(self):
        R = radon_matrix()
        assert R.shape == (30 * 41, 784)
        assert np.all(R >= 0)

    def test_zero_image(self):
        assert not np.any(radon_matrix() @ np.zeros(784))

    def test_center_pixel_chord(self):
        # odd image: the central ray at angle 0 crosses the center pixel along its full side
        R = radon_matrix(img_side=5, n_angles=4, n_detectors=7)
        center = 2 * 5 + 2
        assert R[3, center] == pytest.approx(1.0, abs=1e-12)

    def test_vertical_ray_column_sums(self):
        # angle 0 rays are vertical; an interior ray crosses img_side pixels of length 1
        R = radon_matrix(img_side=5, n_angles=2, n_detectors=7)
        assert R[3].sum() == pytest.approx(5.0, abs=1e-12)

    def test_mass_nearly_preserved_across_angles(self):
        # line integrals sampled at discrete detectors preserve mass only up to
        # discretization (measured spread 7.8e-4); exact preservation would need strip integrals
        R = radon_matrix()
        mass = (R @ np.ones(784)).reshape(30, 41).sum(axis=1)
        assert np.ptp(mass) / mass.mean() < 1e-3

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            radon_matrix(img_side=0)


class TestNoise:
    def test_zero_delta(self):
        assert not np.any(sample_noise(NoiseModel(0.0), 10))

    def test_std(self):
        eta = sample_noise(NoiseModel(1.0, seed=3), 10**6)
        assert 0.998 <= eta.std() <= 1.002

    def test_deterministic(self):
        a = sample_noise(NoiseModel(0.5, seed=7), 20)
        b = sample_noise(NoiseModel(0.5, seed=7), 20)
        np.testing.assert_array_equal(a, b)

    def test_negative_delta(self):
        with pytest.raises(ValueError):
            NoiseModel(-1.0)
