from dataclasses import replace

import numpy as np
import pytest

from samkit.errors import DivergenceError, InvalidValue, ShapeMismatch
from samkit.merge import MergeRecipe, merge, merge_linear
from samkit.ner_eval import PredictionSet
from samkit.tensor_store import load_tensor_archive, save_tensor_archive
from samkit.toylab import (
    StudyConfig,
    SyntheticDomainSpec,
    ToyTagger,
    evaluate,
    export_delta,
    fnv1a,
    gen_synthetic_domain,
    make_domain_family,
    run_domain_study,
    tag,
    tagger_from_delta,
    token_features,
    train_toy_tagger,
)


def single_type_spec(instances=500, density=1.5, seed=1):
    sources, _ = make_domain_family(n_sources=1, n_targets=1, seed=seed, instances=instances)
    s = sources[0]
    t = "kind0_0"
    return SyntheticDomainSpec("single", [t], {t: s.lexicons[t]}, s.filler, instances, density, seed)


def test_fnv1a_reference_values():
    assert fnv1a(b"") == 0x811C9DC5
    assert fnv1a(b"a") == 0xE40C292C
    assert fnv1a(b"foobar") == 0xBF9CF968


def test_features_normalized_and_deterministic():
    f = token_features(["steve", "jobs", "met"], 2048)
    assert f.shape == (3, 2048)
    np.testing.assert_allclose(np.sqrt(f.multiply(f).sum(axis=1)).A1, 1.0, rtol=1e-6)
    assert (f != token_features(["steve", "jobs", "met"], 2048)).nnz == 0


def test_generation_examples():
    spec = single_type_spec(instances=50, density=0.0)
    data = gen_synthetic_domain(spec)
    assert all(len(inst.gold) == 0 for inst in data.instances)

    spec = single_type_spec(instances=40)
    a, b = gen_synthetic_domain(spec), gen_synthetic_domain(spec)
    assert [(i.tokens, i.gold) for i in a.instances] == [(i.tokens, i.gold) for i in b.instances]

    spec = single_type_spec(instances=1000, density=2.0)
    data = gen_synthetic_domain(spec)
    mean = np.mean([len(i.gold) for i in data.instances])
    assert 1.8 <= mean <= 2.2


def test_gold_spans_are_token_subsequences():
    sources, _ = make_domain_family(instances=60)
    for spec in sources:
        for inst in gen_synthetic_domain(spec).instances:
            for m in inst.gold.mentions:
                span = m.span.split()
                assert any(inst.tokens[i : i + len(span)] == span for i in range(len(inst.tokens)))


def test_spec_validation():
    with pytest.raises(InvalidValue):
        SyntheticDomainSpec("x", [], {}, ["f"]).validate()
    with pytest.raises(InvalidValue):
        SyntheticDomainSpec("x", ["a"], {"a": []}, ["f"]).validate()
    with pytest.raises(InvalidValue):
        SyntheticDomainSpec("x", ["a"], {"a": ["n"]}, ["f"], instances=0).validate()


def test_tag_run_rule():
    tokens = ["steve", "jobs", "met", "paris"]
    tagger = ToyTagger.init(["PER", "LOC"], 2048, seed=0)
    feats = token_features(tokens, 2048).toarray()
    target = np.full((4, 3), -10.0)
    for row, col in enumerate([0, 0, 2, 1]):
        target[row, col] = 10.0
    W = np.linalg.pinv(feats) @ target
    hand = ToyTagger(W, np.zeros(3), ["PER", "LOC"])
    assert tag(hand, tokens) == PredictionSet("", [("steve jobs", "PER"), ("paris", "LOC")])
    assert tag(hand, tokens) == tag(hand, tokens)

    all_o = ToyTagger(np.zeros((2048, 3)), np.array([0, 0, 5.0]), ["PER", "LOC"])
    assert len(tag(all_o, tokens)) == 0
    assert len(tag(tagger, [])) == 0


def test_training_regression_bound():
    spec = single_type_spec()
    data = gen_synthetic_domain(spec, "train")
    test = gen_synthetic_domain(replace(spec, instances=200), "test")
    base = ToyTagger.init(data.types(), 2048, seed=0)
    history = []
    tagger = train_toy_tagger(data, base, epochs=5, lr=0.1, seed=0, history=history)
    assert evaluate(tagger, test) >= 0.9
    assert history[-1] < history[0]
    again = train_toy_tagger(data, base, epochs=5, lr=0.1, seed=0)
    assert again.equals(tagger)


def test_training_edge_cases():
    data = gen_synthetic_domain(single_type_spec(instances=20))
    base = ToyTagger.init(data.types(), 256, seed=0)
    assert train_toy_tagger(data, base, epochs=0).equals(base)
    with pytest.raises(InvalidValue):
        train_toy_tagger(data, base, lr=0)
    with pytest.raises(DivergenceError):
        train_toy_tagger(data, base, epochs=3, lr=1e300)


def test_delta_export_round_trip(tmp_path):
    data = gen_synthetic_domain(single_type_spec(instances=60))
    base = ToyTagger.init(data.types(), 512, seed=3)
    assert not any(export_delta(base, base)[k].any() for k in ("w", "b"))

    expert = train_toy_tagger(data, base, epochs=2, seed=1)
    delta = export_delta(expert, base)
    rebuilt = tagger_from_delta(base, delta)
    np.testing.assert_allclose(rebuilt.W, expert.W, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(rebuilt.b, expert.b, rtol=1e-6, atol=1e-7)
    save_tensor_archive(delta, tmp_path / "d.st")
    assert load_tensor_archive(tmp_path / "d.st").equals(delta)

    merged = merge_linear([delta, delta])
    assert tagger_from_delta(base, merged).equals(tagger_from_delta(base, delta))

    other = ToyTagger.init(["x"], 512)
    with pytest.raises(ShapeMismatch):
        export_delta(other, base)


def test_merged_tagger_always_runnable():
    sources, _ = make_domain_family(instances=40)
    label_list = sorted({t for s in sources for t in s.entity_types})
    base = ToyTagger.init(label_list, 256, seed=0)
    deltas = [export_delta(train_toy_tagger(gen_synthetic_domain(s), base, epochs=1), base) for s in sources]
    for method in ("linear", "task_arithmetic", "ties", "dare_linear", "dare_ties"):
        merged, _ = merge(MergeRecipe(method), deltas)
        t = tagger_from_delta(base, merged)
        assert isinstance(tag(t, ["a", "b"]), PredictionSet)


def _small_config(**kw):
    base = dict(seeds=[0], epochs=3, feature_dim=512, test_instances=80)
    base.update(kw)
    return StudyConfig(**base)


def test_study_shapes_and_heldout_copy_of_source():
    sources, targets = make_domain_family(instances=120)
    # second held-out domain is an exact copy of source 1
    held = [targets[0], replace(sources[1], domain_id="copy1")]
    report = run_domain_study(sources, held, _small_config())
    ood = report["runs"][0]["out_of_domain"]
    assert set(ood) >= {"data_merging", "model_merging", "sam", "sam_ds", "sam_se"}
    experts = [r for r in ood if r.startswith("expert:")]
    assert len(experts) == 4
    assert max(experts, key=lambda r: ood[r]["copy1"]) == "expert:src1"
    assert report["summary"]["per_seed"][0]["n_domains"] == 4


def test_study_identical_domains_agree():
    sources, _ = make_domain_family(n_sources=1, instances=300)
    same = [replace(sources[0], domain_id=f"d{i}") for i in range(3)]
    held = [replace(sources[0], domain_id=f"h{i}") for i in range(2)]
    report = run_domain_study(same, held, _small_config(epochs=5, feature_dim=2048, test_instances=100))
    ood = report["runs"][0]["out_of_domain"]
    scores = [np.mean(list(row.values())) for row in ood.values()]
    assert max(scores) - min(scores) <= 0.05


def test_study_needs_enough_domains():
    sources, targets = make_domain_family()
    with pytest.raises(InvalidValue):
        run_domain_study(sources[:2], targets)
    with pytest.raises(InvalidValue):
        run_domain_study(sources, targets[:1])
