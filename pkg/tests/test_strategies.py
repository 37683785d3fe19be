"""Estimator-style merge strategies: fitting, artifact validation, merging,
and scikit-learn plumbing (get_params/set_params/clone)."""

import numpy as np
import pytest
from sklearn.base import clone

from mergeview import (
    ContractViolationError,
    GaussianPosterior,
    HessianWeightedMerge,
    HessianWeightedTaMerge,
    MixtureEmMerge,
    MixturePosterior,
    PosteriorArtifact,
    Provenance,
    SimpleAverageMerge,
    SimplexWeights,
    TaskArithmeticMerge,
    TrainerConfig,
    make_strategy,
)


def _prov(i):
    return Provenance(f"task-{i}", TrainerConfig(method="gd"), 0.0)


def _point_artifacts(rng, n=3, dim=4):
    return [
        PosteriorArtifact("point", rng.normal(size=dim), _prov(i))
        for i in range(n)
    ]


def _gauss(rng, dim=4):
    m = rng.normal(size=dim)
    a = rng.normal(size=(dim, dim))
    return GaussianPosterior(m, a @ a.T + dim * np.eye(dim))


def _gauss_artifacts(rng, n=3, dim=4):
    return [
        PosteriorArtifact("gaussian_full", _gauss(rng, dim), _prov(i))
        for i in range(n)
    ]


def _mixture_artifacts_from(gauss_arts):
    return [
        PosteriorArtifact(
            "mixture",
            MixturePosterior([1.0], (a.payload,)),
            a.provenance,
        )
        for a in gauss_arts
    ]


class TestFitValidation:
    def test_unfitted_merge_raises(self):
        with pytest.raises(ContractViolationError, match="fitted"):
            SimpleAverageMerge().merge([0.5, 0.5])

    def test_unfitted_predict_raises(self):
        with pytest.raises(ContractViolationError, match="fitted"):
            HessianWeightedMerge().predict([[0.5, 0.5]])

    def test_empty_artifacts(self):
        with pytest.raises(ContractViolationError, match="no artifacts"):
            SimpleAverageMerge().fit([])

    def test_wrong_kind_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractViolationError, match="kind"):
            SimpleAverageMerge().fit(_gauss_artifacts(rng))
        with pytest.raises(ContractViolationError, match="kind"):
            HessianWeightedMerge().fit(_point_artifacts(rng))
        with pytest.raises(ContractViolationError, match="kind"):
            MixtureEmMerge().fit(_gauss_artifacts(rng))

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(1)
        arts = _point_artifacts(rng, dim=4)[:2] + _point_artifacts(rng, dim=5)[:1]
        with pytest.raises(ContractViolationError, match="dimension"):
            SimpleAverageMerge().fit(arts)

    def test_mixed_gaussian_layouts_rejected(self):
        rng = np.random.default_rng(2)
        full = _gauss_artifacts(rng, n=1)[0]
        diag = PosteriorArtifact(
            "gaussian_diag",
            GaussianPosterior(np.zeros(4), np.ones(4)),
            _prov(1),
        )
        with pytest.raises(ContractViolationError, match="layout"):
            HessianWeightedMerge().fit([full, diag])

    def test_fit_records_task_ids(self):
        rng = np.random.default_rng(3)
        s = SimpleAverageMerge().fit(_point_artifacts(rng))
        assert s.task_ids_ == ("task-0", "task-1", "task-2")
        assert s.num_tasks_ == 3
        assert s.dim_ == 4

    def test_weight_count_checked_at_merge(self):
        rng = np.random.default_rng(4)
        s = SimpleAverageMerge().fit(_point_artifacts(rng, n=3))
        with pytest.raises(ContractViolationError, match="3 task weights"):
            s.merge([0.5, 0.5])


class TestMergeBehaviour:
    def test_simple_average_value(self):
        arts = [
            PosteriorArtifact("point", np.array([1.0, 0.0]), _prov(0)),
            PosteriorArtifact("point", np.array([0.0, 2.0]), _prov(1)),
        ]
        s = SimpleAverageMerge().fit(arts)
        res = s.merge([0.5, 0.25])
        np.testing.assert_allclose(res.theta, [0.5, 0.5])

    def test_ta_with_origin_anchor_matches_simple(self):
        rng = np.random.default_rng(5)
        arts = _point_artifacts(rng)
        w = SimplexWeights(np.array([0.2, 0.3, 0.5]))
        ta = TaskArithmeticMerge().fit(arts)
        simple = SimpleAverageMerge().fit(arts)
        np.testing.assert_allclose(
            ta.merge(w).theta, simple.merge(w).theta, atol=1e-12
        )

    def test_ta_anchor_shifts_result(self):
        rng = np.random.default_rng(6)
        arts = _point_artifacts(rng)
        anchor = np.full(4, 10.0)
        ta = TaskArithmeticMerge().fit(arts, anchor=anchor)
        # gamma = 0.5 leaves half the anchor's weight in place
        res = ta.merge([0.25, 0.25, 0.0])
        base = TaskArithmeticMerge().fit(arts).merge([0.25, 0.25, 0.0])
        np.testing.assert_allclose(res.theta, base.theta + 0.5 * anchor)

    def test_hessian_ta_requires_anchor_posterior(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ContractViolationError, match="anchor_posterior"):
            HessianWeightedTaMerge().fit(_gauss_artifacts(rng))

    def test_mixture_k1_equals_hessian(self):
        rng = np.random.default_rng(8)
        gauss = _gauss_artifacts(rng)
        hes = HessianWeightedMerge().fit(gauss)
        mix = MixtureEmMerge().fit(_mixture_artifacts_from(gauss))
        for alpha in ([1.0, 0.0, 0.0], [0.2, 0.3, 0.5], [0.0, 0.5, 0.5]):
            np.testing.assert_allclose(
                mix.merge(alpha).theta, hes.merge(alpha).theta, atol=1e-10
            )

    def test_mixture_subunit_weights_renormalized_with_note(self):
        rng = np.random.default_rng(9)
        mix = MixtureEmMerge().fit(
            _mixture_artifacts_from(_gauss_artifacts(rng))
        )
        res = mix.merge([0.2, 0.2, 0.1])
        assert any("renormalized" in n for n in res.notes)
        np.testing.assert_allclose(
            res.theta, mix.merge([0.4, 0.4, 0.2]).theta, atol=1e-10
        )

    def test_predict_stacks_rows(self):
        rng = np.random.default_rng(10)
        s = SimpleAverageMerge().fit(_point_artifacts(rng))
        alphas = np.array([[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]])
        out = s.predict(alphas)
        assert out.shape == (2, 4)
        np.testing.assert_allclose(out[0], s.merge(alphas[0]).theta)

    def test_predict_single_row(self):
        rng = np.random.default_rng(11)
        s = SimpleAverageMerge().fit(_point_artifacts(rng))
        assert s.predict([0.5, 0.5, 0.0]).shape == (1, 4)


class TestSklearnPlumbing:
    def test_get_params(self):
        m = MixtureEmMerge(max_iters=7, tol=1e-6)
        params = m.get_params()
        assert params["max_iters"] == 7
        assert params["tol"] == 1e-6
        assert params["init_strategy"] == "hessian_uniform"

    def test_set_params(self):
        m = MixtureEmMerge()
        m.set_params(max_iters=3)
        assert m.max_iters == 3

    def test_clone_drops_fitted_state(self):
        rng = np.random.default_rng(12)
        s = HessianWeightedMerge().fit(_gauss_artifacts(rng))
        c = clone(s)
        assert not hasattr(c, "artifacts_")
        with pytest.raises(ContractViolationError, match="fitted"):
            c.merge([1.0, 0.0, 0.0])

    def test_clone_preserves_params(self):
        m = clone(MixtureEmMerge(max_iters=9, tol=1e-4))
        assert m.max_iters == 9 and m.tol == 1e-4


class TestMakeStrategy:
    def test_known_names(self):
        assert make_strategy("simple").label == "simple"
        assert make_strategy("ta").label == "ta"
        assert make_strategy("hessian").label == "hessian"
        assert make_strategy("mixture", max_iters=5).max_iters == 5

    def test_unknown_name(self):
        with pytest.raises(ContractViolationError, match="unknown strategy"):
            make_strategy("grand_unified")
