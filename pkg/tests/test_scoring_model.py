"""截断 softmax 评分器与低秩源域训练。"""

import math

import numpy as np
import pytest
from scipy import special
from sklearn.linear_model import LogisticRegression

from scripts.errors import ScoreRangeError, StructuralError
from scripts.param_algebra import MergeSpec, ParamSet, merge
from scripts.score_prior import ScoreRange
from scripts.scoring_model import (
    BIAS_LAYER,
    WEIGHT_LAYER,
    LabeledSet,
    LowRankFactors,
    ProbScorer,
    TrainConfig,
    batch_predict,
    factor_loss_and_grads,
    init_base_params,
    load_labeled_set,
    load_target_labels,
    predict,
    save_labeled_set,
    save_target_labels,
    train_joint,
    train_source,
)


def _scorer(weight, bias, active):
    weight = np.asarray(weight, dtype=np.float64)
    return ProbScorer(ParamSet(((WEIGHT_LAYER, weight), (BIAS_LAYER, np.asarray(bias, dtype=np.float64)[:, None]))), active)


def _separable_set(rng, n=300, dim=5):
    direction = rng.standard_normal(dim)
    features = rng.standard_normal((n * 2, dim))
    margin = features @ direction
    features = features[np.abs(margin) > 0.3][:n]
    scores = (features @ direction > 0).astype(int)
    return LabeledSet(features, scores, ScoreRange(0, 1), "separable")


def _mean_nll(params, data):
    dists = batch_predict(ProbScorer(params, data.range.n_classes), data.features)
    return -float(np.mean(np.log(dists[np.arange(len(data)), data.class_indices])))


class TestPredict:
    def test_zero_parameters_give_uniform(self):
        scorer = _scorer(np.zeros((4, 3)), np.zeros(4), 4)
        np.testing.assert_allclose(predict(scorer, np.ones(3)), [0.25] * 4)

    def test_log_logits(self):
        scorer = _scorer(np.zeros((4, 2)), np.log([1.0, 2.0, 3.0, 4.0]), 4)
        np.testing.assert_allclose(predict(scorer, np.zeros(2)), [0.1, 0.2, 0.3, 0.4], atol=1e-12)

    def test_truncation_renormalizes(self, rng):
        weight = rng.standard_normal((6, 4))
        bias = rng.standard_normal(6)
        x = rng.standard_normal(4)
        full = special.softmax(weight @ x + bias)
        expected = full[:3] / full[:3].sum()
        np.testing.assert_allclose(predict(_scorer(weight, bias, 3), x), expected, rtol=0, atol=1e-12)

    def test_no_truncation_is_plain_softmax(self, rng):
        weight = rng.standard_normal((5, 4))
        bias = rng.standard_normal(5)
        x = rng.standard_normal(4)
        np.testing.assert_allclose(predict(_scorer(weight, bias, 5), x), special.softmax(weight @ x + bias), atol=1e-15)

    @pytest.mark.parametrize("shift", [-50.0, 3.0, 700.0])
    def test_shared_logit_shift_is_ignored(self, rng, shift):
        weight = rng.standard_normal((6, 4))
        bias = rng.standard_normal(6)
        x = rng.standard_normal(4)
        shifted = predict(_scorer(weight, bias + shift, 4), x)
        np.testing.assert_allclose(shifted, predict(_scorer(weight, bias, 4), x), rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(StructuralError):
            predict(_scorer(np.zeros((3, 2)), np.zeros(3), 3), np.zeros(5))

    def test_active_classes_bounds(self):
        with pytest.raises(StructuralError):
            _scorer(np.zeros((3, 2)), np.zeros(3), 4)


class TestBatchPredict:
    def test_empty(self):
        assert batch_predict(_scorer(np.zeros((3, 2)), np.zeros(3), 3), []).shape == (0, 3)

    def test_singleton(self, rng):
        scorer = _scorer(rng.standard_normal((4, 3)), rng.standard_normal(4), 4)
        x = rng.standard_normal(3)
        np.testing.assert_allclose(batch_predict(scorer, [x])[0], predict(scorer, x), atol=1e-15)

    def test_matches_elementwise(self, rng):
        scorer = _scorer(rng.standard_normal((6, 5)), rng.standard_normal(6), 4)
        xs = rng.standard_normal((64, 5))
        expected = np.stack([predict(scorer, x) for x in xs])
        np.testing.assert_allclose(batch_predict(scorer, xs), expected, rtol=0, atol=1e-14)


class TestLabeledSet:
    def test_scores_outside_range(self):
        with pytest.raises(ScoreRangeError):
            LabeledSet(np.zeros((2, 3)), [0, 5], ScoreRange(0, 3), "bad")

    def test_score_count_mismatch(self):
        with pytest.raises(StructuralError):
            LabeledSet(np.zeros((2, 3)), [0], ScoreRange(0, 3), "bad")

    def test_jsonl_file(self, tmp_path, rng):
        data = LabeledSet(rng.standard_normal((5, 3)), [1, 2, 3, 4, 1], ScoreRange(1, 4), "source_0")
        loaded = load_labeled_set(save_labeled_set(data, tmp_path / "s.jsonl"))
        np.testing.assert_array_equal(loaded.features, data.features)
        np.testing.assert_array_equal(loaded.scores, data.scores)
        assert loaded.range == data.range and loaded.domain == "source_0"

    def test_target_labels_stored_separately(self, tmp_path, rng):
        data = LabeledSet(rng.standard_normal((4, 2)), [0, 1, 2, 0], ScoreRange(0, 2), "target")
        features_path = save_labeled_set(data, tmp_path / "features.jsonl", with_scores=False)
        labels_path = save_target_labels(data, tmp_path / "labels.json")
        assert load_labeled_set(features_path).scores is None
        np.testing.assert_array_equal(load_target_labels(labels_path), [0, 1, 2, 0])


class TestTraining:
    def test_gradients_match_finite_differences(self, rng):
        data = LabeledSet(rng.standard_normal((20, 4)), rng.integers(0, 3, 20), ScoreRange(0, 2), "d")
        base = init_base_params(5, 4, seed=1, scale=0.3)
        factors = LowRankFactors(rng.standard_normal((5, 2)), rng.standard_normal((2, 4)), rng.standard_normal(5))
        _, grads = factor_loss_and_grads(base, [data], factors, scaling=0.5)
        h = 1e-6
        for key in ("B", "A", "bias"):
            array = getattr(factors, key)
            for index in np.ndindex(array.shape):
                original = array[index]
                array[index] = original + h
                up, _ = factor_loss_and_grads(base, [data], factors, scaling=0.5)
                array[index] = original - h
                down, _ = factor_loss_and_grads(base, [data], factors, scaling=0.5)
                array[index] = original
                assert grads[key][index] == pytest.approx((up - down) / (2 * h), abs=1e-6)

    def test_inactive_logits_get_no_gradient(self, rng):
        data = LabeledSet(rng.standard_normal((10, 3)), rng.integers(0, 2, 10), ScoreRange(0, 1), "d")
        base = init_base_params(4, 3, seed=0)
        factors = LowRankFactors(rng.standard_normal((4, 1)), rng.standard_normal((1, 3)), np.zeros(4))
        _, grads = factor_loss_and_grads(base, [data], factors)
        np.testing.assert_array_equal(grads["bias"][2:], 0.0)
        np.testing.assert_array_equal(grads["B"][2:], 0.0)

    def test_separable_data(self, rng):
        data = _separable_set(rng)
        base = init_base_params(2, data.dim, seed=0)
        tv = train_source(base, data, TrainConfig(rank=2, max_steps=2000))
        scorer = ProbScorer(merge(base, [tv], MergeSpec((1.0,))), 2)
        accuracy = np.mean(np.argmax(batch_predict(scorer, data.features), axis=1) == data.scores)
        oracle = LogisticRegression().fit(data.features, data.scores).score(data.features, data.scores)
        assert accuracy >= 0.95
        assert accuracy >= oracle - 0.03

    def test_loss_does_not_increase(self, rng):
        data = LabeledSet(rng.standard_normal((60, 4)), rng.integers(0, 4, 60), ScoreRange(0, 3), "noise")
        base = init_base_params(4, 4, seed=2)
        tv = train_source(base, data, TrainConfig(rank=2, max_steps=200))
        trained = merge(base, [tv], MergeSpec((1.0,)))
        assert _mean_nll(trained, data) <= _mean_nll(base, data) + 1e-12

    def test_task_vector_layout(self, rng):
        data = _separable_set(rng, n=50, dim=3)
        base = init_base_params(4, 3, seed=0)
        tv = train_source(base, data, TrainConfig(rank=2, max_steps=20))
        updates = tv.update_map()
        assert updates[WEIGHT_LAYER].rank == 2
        assert updates[BIAS_LAYER].rank == 1
        assert tv.baseline_fingerprint == base.fingerprint

    def test_same_seed_same_task_vector(self, rng):
        data = LabeledSet(rng.standard_normal((50, 3)), rng.integers(0, 3, 50), ScoreRange(0, 2), "repeat")
        base = init_base_params(4, 3, seed=1)
        cfg = TrainConfig(rank=2, max_steps=100, seed=7)
        first, second = train_source(base, data, cfg), train_source(base, data, cfg)
        for name, update in first.update_map().items():
            np.testing.assert_array_equal(update.dense(), second.update_map()[name].dense())

    def test_merged_scorer_is_a_distribution_for_any_coefficients(self, rng):
        base = init_base_params(5, 4, seed=0)
        tvs = []
        for j in range(3):
            data = LabeledSet(rng.standard_normal((40, 4)) * 3, rng.integers(0, 5, 40), ScoreRange(0, 4), f"s{j}")
            tvs.append(train_source(base, data, TrainConfig(rank=2, max_steps=100, seed=j)))
        xs = rng.standard_normal((32, 4)) * 10
        corners = [np.zeros(3), np.ones(3), np.array([1.0, 0.0, 0.0])]
        for coefficients in corners + [rng.uniform(0, 1, 3) for _ in range(30)]:
            for active in (2, 5):
                dists = batch_predict(ProbScorer.merged(base, tvs, MergeSpec(tuple(coefficients)), active), xs)
                assert dists.shape == (32, active)
                assert np.all(np.isfinite(dists)) and np.all(dists >= 0)
                np.testing.assert_allclose(dists.sum(axis=1), 1.0, atol=1e-12)

    def test_lora_scaling(self):
        assert TrainConfig(rank=4).scaling == 1.0
        assert TrainConfig(rank=4, lora_alpha=8).scaling == 2.0

    def test_joint_training_pools_ranges(self, rng):
        narrow = LabeledSet(rng.standard_normal((40, 3)), rng.integers(0, 2, 40), ScoreRange(0, 1), "narrow")
        wide = LabeledSet(rng.standard_normal((40, 3)), rng.integers(1, 5, 40), ScoreRange(1, 4), "wide")
        base = init_base_params(4, 3, seed=0)
        tv = train_joint(base, [narrow, wide], TrainConfig(rank=2, max_steps=100))
        assert math.isfinite(float(np.sum(tv.update_map()[WEIGHT_LAYER].dense())))

    def test_range_larger_than_base(self, rng):
        data = LabeledSet(rng.standard_normal((10, 3)), rng.integers(0, 6, 10), ScoreRange(0, 5), "wide")
        with pytest.raises(StructuralError):
            train_source(init_base_params(4, 3), data, TrainConfig(rank=2, max_steps=5))
