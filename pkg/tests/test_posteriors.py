"""Posterior value types and their natural-parameter algebra."""

import math

import numpy as np
import pytest

from mergeview import (
    BetaNaturals,
    BetaPosterior,
    ContractViolationError,
    GaussianPosterior,
    InvalidPosteriorError,
    MixturePosterior,
    NaturalParams,
    NoInteriorModeError,
    beta_map,
    beta_update,
    from_natural,
    gaussian_surrogate,
    mixture_surrogate,
    to_natural,
)

from _oracles import (
    beta_grid_argmax,
    gauss_elim_solve,
    gauss_logpdf_naive,
    mixture_logpdf_naive,
    quad_form_naive,
    random_gaussian,
)


class TestGaussianPosterior:
    def test_diag_requires_positive_precision(self):
        with pytest.raises(InvalidPosteriorError):
            GaussianPosterior(np.zeros(3), np.array([1.0, 0.0, 2.0]))

    def test_full_requires_spd(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
        with pytest.raises(InvalidPosteriorError):
            GaussianPosterior(np.zeros(2), bad)

    def test_full_requires_symmetry(self):
        bad = np.array([[2.0, 0.5], [0.0, 2.0]])
        with pytest.raises(InvalidPosteriorError):
            GaussianPosterior(np.zeros(2), bad)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolationError):
            GaussianPosterior(np.zeros(3), np.ones(4))

    def test_arrays_are_readonly(self):
        q = GaussianPosterior(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            q.mean[0] = 1.0

    def test_log_density_matches_scipy(self):
        rng = np.random.default_rng(0)
        for layout in ("diag", "full"):
            for _ in range(10):
                mean, prec = random_gaussian(rng, 4, layout)
                q = GaussianPosterior(mean, prec)
                theta = rng.normal(size=4)
                assert q.log_density(theta) == pytest.approx(
                    gauss_logpdf_naive(theta, mean, prec), abs=1e-10
                )

    def test_sample_covariance_inverts_precision(self):
        rng = np.random.default_rng(3)
        mean, prec = random_gaussian(rng, 3, "full")
        q = GaussianPosterior(mean, prec)
        draws = q.sample(np.random.default_rng(7), size=200_000)
        cov = np.cov(draws.T)
        np.testing.assert_allclose(cov, np.linalg.inv(prec), atol=0.02)
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.02)


class TestSurrogates:
    def test_gaussian_surrogate_matches_naive_quadratic_form(self):
        # random 5-D instances against the explicit triple loop
        rng = np.random.default_rng(11)
        for layout in ("diag", "full"):
            for _ in range(20):
                mean, prec = random_gaussian(rng, 5, layout)
                q = GaussianPosterior(mean, prec)
                theta = rng.normal(size=5)
                assert gaussian_surrogate(q, theta) == pytest.approx(
                    quad_form_naive(theta, mean, prec), rel=1e-12
                )

    def test_gaussian_surrogate_zero_at_mean(self):
        q = GaussianPosterior([1.0, -2.0], [2.0, 3.0])
        assert gaussian_surrogate(q, q.mean) == 0.0

    def test_mixture_surrogate_one_dim_against_density_sum(self):
        # pi=(0.3, 0.7), means (-1, 2), precisions (1, 4), theta = 0
        mix = MixturePosterior(
            [0.3, 0.7],
            (
                GaussianPosterior([-1.0], [1.0]),
                GaussianPosterior([2.0], [4.0]),
            ),
        )
        expected = -mixture_logpdf_naive(
            [0.0], [0.3, 0.7], [[-1.0], [2.0]], [[1.0], [4.0]]
        )
        assert mixture_surrogate(mix, [0.0]) == pytest.approx(expected, rel=1e-12)

    def test_mixture_surrogate_k1_is_gaussian_plus_constant(self):
        rng = np.random.default_rng(5)
        mean, prec = random_gaussian(rng, 3, "full")
        comp = GaussianPosterior(mean, prec)
        mix = MixturePosterior([1.0], (comp,))
        thetas = rng.normal(size=(10, 3))
        diffs = [
            mixture_surrogate(mix, th) - gaussian_surrogate(comp, th)
            for th in thetas
        ]
        assert np.ptp(diffs) < 1e-10

    def test_mixture_surrogate_lower_bound(self):
        # -log sum_k pi_k N_k >= min_k [surrogate_k + log-normalizer_k
        #                                - log pi_k] - log K
        rng = np.random.default_rng(17)
        for _ in range(10):
            k = int(rng.integers(2, 5))
            comps, weights = [], rng.uniform(0.2, 1.0, size=k)
            weights /= weights.sum()
            for _ in range(k):
                mean, prec = random_gaussian(rng, 2, "diag")
                comps.append(GaussianPosterior(mean, prec))
            mix = MixturePosterior(weights, tuple(comps))
            theta = rng.normal(size=2)
            log_norms = [
                0.5 * (2 * math.log(2 * math.pi) - c.log_det_precision)
                for c in comps
            ]
            bound = min(
                gaussian_surrogate(c, theta) + ln - math.log(w)
                for c, ln, w in zip(comps, log_norms, weights)
            ) - math.log(k)
            assert mixture_surrogate(mix, theta) >= bound - 1e-10


class TestNaturalParams:
    def test_standard_normal_round_trip(self):
        nat = NaturalParams(np.zeros(3), np.eye(3))
        q = from_natural(nat)
        np.testing.assert_array_equal(q.mean, np.zeros(3))
        np.testing.assert_array_equal(q.precision, np.eye(3))

    def test_scalar_case(self):
        q = from_natural(NaturalParams([6.0], [3.0]))
        assert q.mean[0] == pytest.approx(2.0)

    def test_from_natural_solves_linear_system(self):
        # mean solves H m = linear; cross-check with Gaussian elimination
        rng = np.random.default_rng(23)
        for _ in range(10):
            _, prec = random_gaussian(rng, 6, "full")
            linear = rng.normal(size=6)
            q = from_natural(NaturalParams(linear, prec))
            np.testing.assert_allclose(
                q.mean, gauss_elim_solve(prec, linear), rtol=1e-9, atol=1e-12
            )

    def test_round_trip_diag(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            mean, prec = random_gaussian(rng, 4, "diag")
            q = GaussianPosterior(mean, prec)
            back = from_natural(to_natural(q))
            np.testing.assert_allclose(back.mean, q.mean, rtol=1e-13)
            np.testing.assert_allclose(back.precision, q.precision, rtol=1e-13)

    def test_round_trip_full(self):
        rng = np.random.default_rng(31)
        mean, prec = random_gaussian(rng, 5, "full")
        back = from_natural(to_natural(GaussianPosterior(mean, prec)))
        np.testing.assert_allclose(back.mean, mean, rtol=1e-10, atol=1e-12)

    def test_linear_algebra(self):
        a = NaturalParams([1.0, 2.0], [1.0, 1.0])
        b = NaturalParams([3.0, -1.0], [2.0, 0.5])
        s = 0.25 * a + 0.75 * b
        np.testing.assert_allclose(s.linear, [2.5, -0.25])
        np.testing.assert_allclose(s.quadratic, [1.75, 0.625])

    def test_layout_mismatch_rejected(self):
        a = NaturalParams([1.0, 2.0], [1.0, 1.0])
        b = NaturalParams([1.0, 2.0], np.eye(2))
        with pytest.raises(ContractViolationError):
            a + b

    def test_singular_quadratic_rejected(self):
        with pytest.raises(InvalidPosteriorError):
            from_natural(NaturalParams([1.0, 1.0], np.zeros((2, 2))))


class TestBeta:
    def test_parameters_must_be_positive(self):
        with pytest.raises(InvalidPosteriorError):
            BetaPosterior(0.0, 1.0)

    def test_conjugate_update(self):
        q = beta_update(BetaPosterior(1.0, 1.0), 1)
        assert (q.a, q.b) == (2.0, 1.0)
        q = beta_update(q, 0)
        assert (q.a, q.b) == (2.0, 2.0)

    def test_update_rejects_non_binary(self):
        with pytest.raises(ContractViolationError):
            beta_update(BetaPosterior(1.0, 1.0), 2)

    def test_map_against_dense_grid(self):
        # Beta(2.7, 4.1): mode vs argmax of the log-density over 1e6 points
        assert beta_map(BetaPosterior(2.7, 4.1)) == pytest.approx(
            beta_grid_argmax([(1.0, 2.7, 4.1)]), abs=1e-4
        )

    def test_map_closed_form(self):
        assert beta_map(BetaPosterior(3.0, 2.0)) == pytest.approx(2.0 / 3.0)

    def test_no_interior_mode(self):
        with pytest.raises(NoInteriorModeError):
            beta_map(BetaPosterior(0.5, 2.0))

    def test_naturals_round_trip(self):
        q = BetaPosterior(2.5, 3.5)
        back = q.to_natural().to_posterior()
        assert (back.a, back.b) == (q.a, q.b)

    def test_naturals_linear_algebra(self):
        merged = 0.5 * BetaNaturals(2.0, 1.0) + 0.5 * BetaNaturals(1.0, 4.0)
        assert (merged.eta_a, merged.eta_b) == (1.5, 2.5)


class TestMixturePosterior:
    def test_weights_must_sum_to_one(self):
        comp = GaussianPosterior([0.0], [1.0])
        with pytest.raises(InvalidPosteriorError):
            MixturePosterior([0.5, 0.4], (comp, comp))

    def test_component_layouts_must_match(self):
        a = GaussianPosterior([0.0, 0.0], [1.0, 1.0])
        b = GaussianPosterior([0.0, 0.0], np.eye(2))
        with pytest.raises(ContractViolationError):
            MixturePosterior([0.5, 0.5], (a, b))

    def test_log_density_matches_naive_sum(self):
        rng = np.random.default_rng(41)
        for _ in range(10):
            k = int(rng.integers(1, 4))
            weights = rng.uniform(0.1, 1.0, size=k)
            weights /= weights.sum()
            means, precs, comps = [], [], []
            for _ in range(k):
                m, h = random_gaussian(rng, 2, "diag")
                means.append(m)
                precs.append(h)
                comps.append(GaussianPosterior(m, h))
            mix = MixturePosterior(weights, tuple(comps))
            theta = rng.normal(size=2)
            assert mix.log_density(theta) == pytest.approx(
                mixture_logpdf_naive(theta, weights, means, precs), rel=1e-10
            )
