"""参数代数：稠密展开、加权合并与三个合并基线。"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_param_set, random_task_vector
from scripts.errors import StructuralError
from scripts.param_algebra import (
    LowRankUpdate,
    MergeSpec,
    ParamSet,
    TaskVector,
    flatten_delta,
    load_task_vector,
    materialize_dense,
    merge,
    merge_average,
    merge_task_arithmetic,
    merge_ties,
    save_task_vector,
    unflatten_delta,
)


def _dense_merge(base, tvs, coefficients):
    """逐个物化稠密差分后求和。"""
    out = {name: m.copy() for name, m in base.layers}
    for coef, tv in zip(coefficients, tvs):
        for name, delta in materialize_dense(tv).layers:
            out[name] = out[name] + coef * delta
    return out


def _assert_params_close(actual: ParamSet, expected, atol=0.0):
    expected = expected if isinstance(expected, dict) else expected.to_dict()
    assert actual.names == list(expected)
    for name, matrix in actual.layers:
        np.testing.assert_allclose(matrix, expected[name], rtol=0, atol=atol)


class TestMaterializeDense:
    def test_rank_one_outer_product(self):
        fingerprint = (("w", (2, 2)),)
        tv = TaskVector((LowRankUpdate("w", [[1.0], [0.0]], [[3.0, 4.0]]),), fingerprint)
        np.testing.assert_array_equal(materialize_dense(tv)["w"], [[3.0, 4.0], [0.0, 0.0]])

    def test_empty_updates_give_zero_delta(self, base):
        tv = TaskVector((), base.fingerprint)
        for _, matrix in materialize_dense(tv).layers:
            assert not matrix.any()

    def test_matches_naive_multiply(self, rng):
        B = rng.standard_normal((4, 2))
        A = rng.standard_normal((2, 4))
        tv = TaskVector((LowRankUpdate("w", B, A),), (("w", (4, 4)),))
        naive = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                for k in range(2):
                    naive[i, j] += B[i, k] * A[k, j]
        np.testing.assert_allclose(materialize_dense(tv)["w"], naive, rtol=0, atol=1e-12)

    def test_factor_shape_mismatch(self):
        with pytest.raises(StructuralError):
            LowRankUpdate("w", np.ones((2, 2)), np.ones((3, 2)))

    def test_rank_above_layer_size_rejected(self):
        with pytest.raises(StructuralError):
            TaskVector((LowRankUpdate("w", np.ones((2, 3)), np.ones((3, 2))),), (("w", (2, 2)),))

    def test_unknown_layer_rejected(self):
        with pytest.raises(StructuralError):
            TaskVector((LowRankUpdate("v", np.ones((2, 1)), np.ones((1, 2))),), (("w", (2, 2)),))


class TestMerge:
    def test_single_source_identity(self, base, make_task_vector):
        tv = make_task_vector()
        merged = merge(base, [tv], MergeSpec((1.0,)))
        _assert_params_close(merged, _dense_merge(base, [tv], [1.0]))

    def test_zero_coefficients_recover_base(self, base, make_task_vector):
        tvs = [make_task_vector() for _ in range(3)]
        merged = merge(base, tvs, MergeSpec.uniform(3, 0.0))
        for name, matrix in merged.layers:
            np.testing.assert_array_equal(matrix, base[name])

    def test_matches_dense_summation(self, base, make_task_vector):
        tvs = [make_task_vector(rank=r) for r in (1, 2, 3)]
        coefficients = [0.2, 0.5, 0.3]
        merged = merge(base, tvs, MergeSpec(tuple(coefficients)))
        _assert_params_close(merged, _dense_merge(base, tvs, coefficients), atol=1e-9)

    def test_dense_oracle_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            base = random_param_set(rng)
            m = int(rng.integers(1, 6))
            tvs = [random_task_vector(rng, base, rank=int(rng.integers(1, 4))) for _ in range(m)]
            coefficients = rng.uniform(0, 1, m)
            merged = merge(base, tvs, MergeSpec(tuple(coefficients)))
            _assert_params_close(merged, _dense_merge(base, tvs, coefficients), atol=1e-9)

    def test_permuting_sources_and_coefficients_together(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            base = random_param_set(rng)
            m = int(rng.integers(2, 6))
            tvs = [random_task_vector(rng, base, rank=int(rng.integers(1, 4))) for _ in range(m)]
            coefficients = rng.uniform(0, 1, m)
            order = rng.permutation(m)
            merged = merge(base, tvs, MergeSpec(tuple(coefficients)))
            permuted = merge(base, [tvs[i] for i in order], MergeSpec(tuple(coefficients[order])))
            _assert_params_close(permuted, merged, atol=1e-10)

    def test_layers_without_updates_are_copied(self, base, make_task_vector):
        tv = make_task_vector(skip=("proj",))
        merged = merge(base, [tv], MergeSpec((0.7,)))
        np.testing.assert_array_equal(merged["proj"], base["proj"])

    def test_length_mismatch(self, base, make_task_vector):
        with pytest.raises(StructuralError):
            merge(base, [make_task_vector()], MergeSpec((0.5, 0.5)))

    def test_fingerprint_mismatch(self, base, rng):
        other = random_param_set(rng, (("W", (3, 3)),))
        with pytest.raises(StructuralError):
            merge(base, [random_task_vector(rng, other)], MergeSpec((0.5,)))

    def test_coefficient_outside_bounds(self):
        with pytest.raises(StructuralError):
            MergeSpec((1.5,))

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.floats(0.0, 0.5), min_size=3, max_size=3),
        st.lists(st.floats(0.0, 0.5), min_size=3, max_size=3),
    )
    def test_linearity(self, la, lb):
        rng = np.random.default_rng(3)
        base = random_param_set(rng)
        tvs = [random_task_vector(rng, base) for _ in range(3)]
        left = merge(base, tvs, MergeSpec(tuple(la)))
        right = merge(base, tvs, MergeSpec(tuple(lb)))
        both = merge(base, tvs, MergeSpec(tuple(a + b for a, b in zip(la, lb))))
        for name, matrix in both.layers:
            np.testing.assert_allclose(left[name] + right[name] - base[name], matrix, rtol=0, atol=1e-9)


class TestLinearBaselines:
    def test_average_of_duplicates(self, base, make_task_vector):
        tv = make_task_vector()
        averaged = merge_average(base, [tv, tv])
        _assert_params_close(averaged, merge(base, [tv, tv], MergeSpec((1.0, 0.0))).to_dict(), atol=1e-12)

    def test_average_equals_uniform_merge(self, base, make_task_vector):
        tvs = [make_task_vector() for _ in range(4)]
        expected = merge(base, tvs, MergeSpec.uniform(4, 0.25))
        for name, matrix in merge_average(base, tvs).layers:
            np.testing.assert_array_equal(matrix, expected[name])

    def test_average_single_source_is_fine_tuned(self, base, make_task_vector):
        tv = make_task_vector()
        _assert_params_close(merge_average(base, [tv]), _dense_merge(base, [tv], [1.0]), atol=1e-12)

    def test_average_requires_sources(self, base):
        with pytest.raises(StructuralError):
            merge_average(base, [])

    def test_task_arithmetic_scale_zero(self, base, make_task_vector):
        merged = merge_task_arithmetic(base, [make_task_vector()], scale=0.0)
        for name, matrix in merged.layers:
            np.testing.assert_array_equal(matrix, base[name])

    def test_task_arithmetic_scale_one(self, base, make_task_vector):
        tv = make_task_vector()
        _assert_params_close(merge_task_arithmetic(base, [tv], 1.0), _dense_merge(base, [tv], [1.0]))

    def test_task_arithmetic_equals_constant_merge(self, base, make_task_vector):
        tvs = [make_task_vector() for _ in range(3)]
        expected = merge(base, tvs, MergeSpec.uniform(3, 0.4))
        _assert_params_close(merge_task_arithmetic(base, tvs, 0.4), expected.to_dict(), atol=1e-12)


def _ties_reference(deltas, density):
    """逐坐标的标量参照实现。"""
    m, n = deltas.shape
    keep = math.ceil(density * n)
    trimmed = np.zeros_like(deltas)
    for j in range(m):
        threshold = sorted((abs(v) for v in deltas[j]), reverse=True)[keep - 1]
        for i in range(n):
            if abs(deltas[j, i]) >= threshold:
                trimmed[j, i] = deltas[j, i]
    signs = []
    for i in range(n):
        total = sum(trimmed[j, i] for j in range(m))
        signs.append(0.0 if total == 0 else math.copysign(1.0, total))
    majority = np.sign(sum(signs))
    signs = [majority if s == 0 else s for s in signs]
    merged = np.zeros(n)
    for i in range(n):
        agreeing = [trimmed[j, i] for j in range(m) if trimmed[j, i] != 0 and np.sign(trimmed[j, i]) == signs[i]]
        merged[i] = sum(agreeing) / len(agreeing) if agreeing else 0.0
    return merged


class TestTies:
    def test_single_source_full_density(self, base, make_task_vector):
        tv = make_task_vector()
        merged = merge_ties(base, [tv], density=1.0, scale=0.6)
        _assert_params_close(merged, merge(base, [tv], MergeSpec((0.6,))).to_dict(), atol=1e-12)

    def test_sign_election_keeps_agreeing_entry(self):
        fingerprint = (("w", (1, 2)),)
        base = ParamSet((("w", np.zeros((1, 2))),))
        up = TaskVector((LowRankUpdate("w", [[1.0]], [[3.0, 1.0]]),), fingerprint)
        down = TaskVector((LowRankUpdate("w", [[1.0]], [[-1.0, 1.0]]),), fingerprint)
        merged = merge_ties(base, [up, down], density=1.0, scale=0.5)
        np.testing.assert_allclose(merged["w"], [[1.5, 0.5]])

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(11)
        base = random_param_set(rng, (("w", (2, 4)),))
        tvs = [random_task_vector(rng, base, rank=2) for _ in range(3)]
        deltas = np.stack([flatten_delta(materialize_dense(tv)) for tv in tvs])
        expected = base["w"].ravel() + _ties_reference(deltas, 0.5)
        merged = merge_ties(base, tvs, density=0.5, scale=1.0)
        np.testing.assert_allclose(merged["w"].ravel(), expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("density", [0.0, 1.5])
    def test_density_out_of_range(self, base, make_task_vector, density):
        with pytest.raises(StructuralError):
            merge_ties(base, [make_task_vector()], density=density)


class TestArtifacts:
    def test_flatten_inverse(self, base):
        restored = unflatten_delta(flatten_delta(base), base.fingerprint)
        for name, matrix in restored.layers:
            np.testing.assert_array_equal(matrix, base[name])

    def test_task_vector_file(self, tmp_path, base, make_task_vector):
        tv = make_task_vector()
        loaded = load_task_vector(save_task_vector(tv, tmp_path / "tv.json"))
        assert loaded.baseline_fingerprint == tv.baseline_fingerprint
        for name, matrix in materialize_dense(loaded).layers:
            np.testing.assert_array_equal(matrix, materialize_dense(tv)[name])
