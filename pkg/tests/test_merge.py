import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samkit.errors import ConfigError, EmptyInput, InvalidValue, ShapeMismatch
from samkit.merge import (
    MergeRecipe,
    dare_preprocess,
    merge,
    merge_archives,
    merge_linear,
    merge_task_arithmetic,
    ties_merge,
    trim_count,
    trim_mask,
    weights_mode1,
    weights_mode2,
)
from samkit.tensor_store import DeltaSet, load_tensor_archive, save_tensor_archive

from conftest import ties_reference


def D(*vals, name="w"):
    return DeltaSet({name: np.array(vals, dtype=np.float32)})


# --- worked examples -------------------------------------------------------


def test_linear_examples():
    np.testing.assert_array_equal(merge_linear([D(2, -1)], [1.0])["w"], [2, -1])
    np.testing.assert_array_equal(merge_linear([D(2, -1), D(3, 1)], [1, 1])["w"], [2.5, 0])
    np.testing.assert_array_equal(merge_linear([D(2, -1), D(-2, 1)])["w"], [0, 0])


def test_task_arithmetic_examples():
    np.testing.assert_array_equal(merge_task_arithmetic([D(2, -1), D(3, 1)], [1, 1], 1.0)["w"], [5, 0])
    assert not merge_task_arithmetic([D(2, -1), D(3, 1)], [1, 1], 0.0)["w"].any()
    np.testing.assert_allclose(merge_task_arithmetic([D(2, -1)], [3.0], 0.5)["w"], [3, -1.5])


def test_ties_examples():
    out, report = ties_merge([D(2, -1), D(3, 1)], [1, 1], density=1.0, scale=1.0)
    np.testing.assert_array_equal(out["w"], [2.5, 0])
    assert report.tensors["w"].sign_conflicts == 1
    assert report.tensors["w"].zeroed == 1

    single, _ = ties_merge([D(0.5, -3, 7)], density=1.0)
    np.testing.assert_array_equal(single["w"], [0.5, -3, 7])

    trimmed, report = ties_merge([D(10, 0.1, -0.2)], density=1 / 3)
    np.testing.assert_array_equal(trimmed["w"], [10, 0, 0])
    assert report.tensors["w"].trimmed == 2


def test_trim_boundary_ties_keep_lower_index():
    mask = trim_mask(np.array([1.0, -1.0, 1.0, 0.5]), 0.5)
    assert mask.tolist() == [True, True, False, False]
    assert trim_count(0.3, 10) == 3
    assert trim_count(0.25, 5) == 2
    assert trim_count(1e-9, 100) == 1


def test_merge_dispatch_examples():
    out, _ = merge(MergeRecipe("ties", density=1.0, weights=[1, 1]), [D(2, -1), D(3, 1)])
    np.testing.assert_array_equal(out["w"], [2.5, 0])

    rng = np.random.default_rng(0)
    ds = [DeltaSet({"w": rng.standard_normal(20)}) for _ in range(3)]
    dare0, _ = merge(MergeRecipe("dare_linear", drop_rate=0.0), ds)
    assert dare0.equals(merge_linear(ds))

    same, report = merge(MergeRecipe("linear"), [ds[0]] * 3)
    assert same.equals(DeltaSet(ds[0]))
    assert report.tensors["w"].trimmed == 0


def test_dare_ties_composition():
    rng = np.random.default_rng(1)
    ds = [DeltaSet({"w": rng.standard_normal(50)}) for _ in range(3)]
    recipe = MergeRecipe("dare_ties", density=0.5, drop_rate=0.3, seed=9)
    out, _ = merge(recipe, ds)
    pre = [dare_preprocess(d, 0.3, 9 ^ i) for i, d in enumerate(ds)]
    expected, _ = ties_merge(pre, density=0.5)
    assert out.equals(expected)


def test_mode_weights():
    assert weights_mode1(3) == [1.5, 1.0, 0.5]
    assert weights_mode1(1) == [1.0]
    assert weights_mode1(5) == [1.5, 1.25, 1.0, 0.75, 0.5]
    np.testing.assert_allclose(weights_mode2([0.8, 0.6, 0.4]), [4 / 3, 1.0, 2 / 3])
    assert weights_mode2([0.7, 0.7, 0.7]) == [1.0, 1.0, 1.0]
    np.testing.assert_allclose(weights_mode2([0.9, 0.3]), [3.0, 1.0])
    with pytest.raises(EmptyInput):
        weights_mode1(0)
    with pytest.raises(InvalidValue):
        weights_mode2([0.5, 0.0])


# --- validation -------------------------------------------------------------


def test_errors():
    with pytest.raises(EmptyInput):
        merge_linear([])
    with pytest.raises(ShapeMismatch):
        merge_linear([D(1, 2), D(1, 2, 3)])
    with pytest.raises(ShapeMismatch):
        merge_linear([D(1, 2), D(1, 2, name="v")])
    with pytest.raises(InvalidValue):
        merge_linear([D(1), D(2)], [1.0])
    with pytest.raises(InvalidValue):
        merge_linear([D(1), D(2)], [1.0, -1.0])
    with pytest.raises(InvalidValue):
        ties_merge([D(1)], density=0.0)
    with pytest.raises(InvalidValue):
        dare_preprocess(D(1), 1.0, 0)


def test_recipe_json_round_trip():
    r = MergeRecipe("dare_ties", 0.3, 0.4, 2.0, [1.5, 1.0], 77)
    doc = json.loads(r.to_json())
    assert set(doc) == {"method", "density", "drop_rate", "scale", "weights", "seed"}
    assert MergeRecipe.from_json(r.to_json()) == r
    with pytest.raises(ConfigError):
        MergeRecipe.from_dict({**doc, "lambda": 1})
    with pytest.raises(InvalidValue):
        MergeRecipe.from_dict({"method": "fisher"})
    with pytest.raises(InvalidValue):
        MergeRecipe.from_dict({"density": 1.5})


# --- properties -------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 32),
    st.sampled_from([0.25, 0.5, 1.0]),
    st.integers(0, 2**32 - 1),
)
def test_ties_matches_reference(n, d, density, seed):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, d)).astype(np.float32)
    # exercise exact-magnitude ties and exact zeros too
    vecs[rng.random((n, d)) < 0.15] = 0.0
    vecs[rng.random((n, d)) < 0.1] = 1.0
    weights = rng.uniform(0.1, 3.0, n).tolist()
    out, _ = ties_merge([D(*v) for v in vecs], weights, density)
    ref = ties_reference(vecs.tolist(), weights, density)
    np.testing.assert_allclose(out["w"], ref, rtol=0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_linear_of_identical_copies_is_exact(n, seed):
    delta = D(*np.random.default_rng(seed).standard_normal(17))
    assert merge_linear([delta] * n).equals(delta)
    out, _ = ties_merge([delta] * n, density=1.0)
    assert out.equals(delta)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["linear", "task_arithmetic", "ties"]), st.integers(0, 2**32 - 1))
def test_permutation_invariance(method, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    deltas = [DeltaSet({"w": rng.standard_normal((4, 5)), "b": rng.standard_normal(5)}) for _ in range(n)]
    weights = rng.uniform(0.2, 2.0, n).tolist()
    recipe = MergeRecipe(method, density=0.4, scale=0.7, weights=weights)
    ref, ref_report = merge(recipe, deltas)
    for _ in range(5):
        perm = rng.permutation(n)
        r = MergeRecipe(method, density=0.4, scale=0.7, weights=[weights[i] for i in perm])
        out, report = merge(r, [deltas[i] for i in perm])
        assert out.equals(ref)
        assert report.tensors == ref_report.tensors


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ties_with_agreeing_signs_is_linear(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 5)), int(rng.integers(1, 33))
    signs = rng.choice([-1.0, 1.0], size=d)
    vecs = [D(*(signs * rng.uniform(0.01, 5, d))) for _ in range(n)]
    lin = merge_linear(vecs)["w"]
    out, _ = ties_merge(vecs, density=1.0)
    np.testing.assert_allclose(out["w"], lin, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_dare_determinism_and_support(seed, p):
    delta = DeltaSet({"w": np.random.default_rng(seed).standard_normal(200), "v": np.ones(7)})
    a = dare_preprocess(delta, p, seed)
    assert a.equals(dare_preprocess(delta, p, seed))
    kept = a["w"] != 0
    np.testing.assert_allclose(a["w"][kept], delta["w"][kept] / (1 - p), rtol=1e-6)


def test_dare_zero_rate_identity():
    delta = D(*np.arange(1, 10, dtype=float))
    assert dare_preprocess(delta, 0.0, 5).equals(delta)


def test_dare_differs_by_tensor_name():
    delta = DeltaSet({"a": np.ones(64), "b": np.ones(64)})
    out = dare_preprocess(delta, 0.5, 3)
    assert not np.array_equal(out["a"], out["b"])


def test_merge_shapes_preserved_all_methods():
    rng = np.random.default_rng(2)
    deltas = [DeltaSet({"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}) for _ in range(3)]
    for method in ("linear", "task_arithmetic", "ties", "dare_linear", "dare_ties"):
        out, report = merge(MergeRecipe(method), deltas)
        assert out.shapes() == deltas[0].shapes()
        for stats in report.tensors.values():
            assert max(stats.trimmed, stats.sign_conflicts, stats.zeroed) <= stats.total


def test_parallel_merge_matches_serial():
    rng = np.random.default_rng(3)
    deltas = [DeltaSet({f"t{i}": rng.standard_normal(30) for i in range(12)}) for _ in range(3)]
    recipe = MergeRecipe("dare_ties", seed=4)
    serial, _ = merge(recipe, deltas)
    parallel, _ = merge(recipe, deltas, max_workers=4)
    assert serial.equals(parallel)


def test_merge_archives_matches_in_memory(tmp_path):
    rng = np.random.default_rng(4)
    deltas = [DeltaSet({"w": rng.standard_normal((5, 5)), "b": rng.standard_normal(5)}) for _ in range(3)]
    paths = []
    for i, d in enumerate(deltas):
        paths.append(tmp_path / f"d{i}.st")
        save_tensor_archive(d, paths[-1])
    recipe = MergeRecipe("ties", density=0.5, weights=[1.5, 1.0, 0.5])
    report = merge_archives(recipe, paths, tmp_path / "m.st")
    expected, expected_report = merge(recipe, deltas)
    got = load_tensor_archive(tmp_path / "m.st")
    assert all(np.array_equal(got[k], expected[k]) for k in expected)
    assert MergeRecipe.from_json(got.metadata["merge_recipe"]) == recipe
    assert report.to_dict() == expected_report.to_dict()
