import json

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from coldrank.evalkit import pr_auc
from coldrank.synthdata import (
    COLD_HIST_NOISE,
    Dataset,
    DatasetFormatError,
    GenerationError,
    GenSpec,
    SchemaError,
    fit_probe,
    generate,
    read_dataset,
    write_dataset,
)

SMALL_SPEC = GenSpec(num_queries=40, eval_queries=20, items_per_query=10, seed=3)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL_SPEC)


def test_generation_is_deterministic(tmp_path, small):
    again = generate(SMALL_SPEC)
    write_dataset(tmp_path / "a.jsonl", small.train)
    write_dataset(tmp_path / "b.jsonl", again.train)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    np.testing.assert_array_equal(small.truth["eval"], again.truth["eval"])


def test_different_seed_changes_data(small):
    other = generate(SMALL_SPEC.__class__(**{**SMALL_SPEC.to_dict(), "seed": 4}))
    assert not np.array_equal(small.train.x_nonhist, other.train.x_nonhist)


def test_partition_and_age_invariants(small):
    for split in (small.train, small.eval):
        assert split.is_cold.any() and (~split.is_cold).any()
        np.testing.assert_array_equal(split.is_cold, split.item_age_days < SMALL_SPEC.cold_age_threshold)
        assert np.all(split.item_age_days >= 0)
        assert np.all(np.abs(split.x_hist[split.is_cold]) < COLD_HIST_NOISE)
        assert split.labels.shape[1] == SMALL_SPEC.m
        assert set(np.unique(split.labels)) <= {0, 1}
        assert split.is_cold.sum() == round(SMALL_SPEC.cold_fraction * len(split))


def test_query_groups_are_contiguous(small):
    groups = small.train.query_groups()
    assert len(groups) == SMALL_SPEC.num_queries
    for g in groups:
        assert len(g.instances) == SMALL_SPEC.items_per_query
        assert {i.query_id for i in g.instances} == {g.query_id}


def test_cold_fraction_without_cold_items_raises():
    with pytest.raises(GenerationError, match="no cold"):
        generate(GenSpec(num_queries=1, eval_queries=1, items_per_query=3, cold_fraction=0.1))


def test_spec_validation():
    with pytest.raises(ValueError):
        GenSpec(cold_fraction=1.0)
    with pytest.raises(ValueError):
        GenSpec(engagement_bias=1.0)
    with pytest.raises(ValueError):
        GenSpec(label_base_rates=(0.2, 0.2))
    with pytest.raises(ValueError, match="unknown"):
        GenSpec.from_dict({"colour": 1})
    assert GenSpec.from_dict(GenSpec().to_dict()) == GenSpec()


def test_no_bias_train_and_eval_cold_labels_match():
    spec = GenSpec(num_queries=500, eval_queries=500, engagement_bias=0.0, cold_fraction=0.5, seed=1)
    data = generate(spec)
    for t in range(spec.m):
        counts = [
            [int(s.labels[s.is_cold, t].sum()), int((1 - s.labels[s.is_cold, t]).sum())]
            for s in (data.train, data.eval)
        ]
        assert chi2_contingency(counts).pvalue > 0.01


def test_bias_halves_cold_positive_rate():
    spec = GenSpec(num_queries=2000, eval_queries=1, engagement_bias=0.5, cold_fraction=0.5, seed=2)
    train = generate(spec).train
    cold = train.is_cold
    # oracle: the generator's own Bernoulli parameters for the unbiased eval labels
    observed = train.labels[cold].mean()
    expected = 0.5 * train.p_star[cold].mean()
    assert abs(observed / expected - 1.0) < 0.05


def test_warm_labels_follow_true_relevance():
    train = generate(GenSpec(num_queries=1000, eval_queries=1, seed=5)).train
    warm = ~train.is_cold
    assert abs(train.labels[warm].mean() / train.p_star[warm].mean() - 1.0) < 0.05


def _probe_auc(x_fit, y_fit, x_eval, y_eval):
    layer = fit_probe(x_fit, y_fit)
    return pr_auc(layer.forward(x_eval)[0][:, 0], y_eval)


def test_historical_probe_beats_content_probe_on_warm_train():
    train = generate(GenSpec(seed=0)).train
    warm = ~train.is_cold
    y = train.labels[warm, 0]
    hist = _probe_auc(train.x_hist[warm], y, train.x_hist[warm], y)
    nonhist = _probe_auc(train.x_nonhist[warm], y, train.x_nonhist[warm], y)
    assert hist > nonhist


def test_content_probe_learnable_on_eval():
    data = generate(GenSpec(seed=0))
    ev = data.eval
    for t in range(ev.m):
        # fit on the unbiased warm rows of train, score the held-out split
        warm = ~data.train.is_cold
        auc = _probe_auc(data.train.x_nonhist[warm], data.train.labels[warm, t], ev.x_nonhist, ev.labels[:, t])
        assert auc > 0.6


# --- file format ------------------------------------------------------------


def test_roundtrip_exact(tmp_path, small):
    path = tmp_path / "d.jsonl"
    write_dataset(path, small.eval)
    back = read_dataset(path)
    for name in ("x_hist", "x_nonhist", "labels", "is_cold", "item_age_days", "p_star"):
        np.testing.assert_array_equal(getattr(back, name), getattr(small.eval, name))
    assert list(back.query_id) == list(small.eval.query_id)
    assert back.meta == small.eval.meta
    write_dataset(tmp_path / "again.jsonl", back)
    assert path.read_bytes() == (tmp_path / "again.jsonl").read_bytes()


def test_roundtrip_groups_form(tmp_path, small):
    groups = small.train.query_groups()
    write_dataset(tmp_path / "g.jsonl", (small.train.meta, groups))
    assert read_dataset(tmp_path / "g.jsonl").query_groups() == groups


def test_empty_dataset_is_header_only(tmp_path, small):
    meta = small.train.meta
    write_dataset(tmp_path / "e.jsonl", (meta, []))
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0]) == meta
    assert len(read_dataset(tmp_path / "e.jsonl")) == 0


def test_single_instance_roundtrip_bytes(tmp_path, small):
    one = small.train.subset([0])
    write_dataset(tmp_path / "1.jsonl", one)
    write_dataset(tmp_path / "2.jsonl", read_dataset(tmp_path / "1.jsonl"))
    assert (tmp_path / "1.jsonl").read_bytes() == (tmp_path / "2.jsonl").read_bytes()


def _rewrite(tmp_path, small, mutate):
    path = tmp_path / "bad.jsonl"
    write_dataset(path, small.train.subset([0, 1]))
    lines = path.read_text().splitlines()
    lines = mutate(lines)
    path.write_text("\n".join(lines) + "\n")
    return path


def test_wrong_label_arity_names_labels(tmp_path, small):
    def mutate(lines):
        rec = json.loads(lines[2])
        rec["labels"] = rec["labels"][:-1]
        lines[2] = json.dumps(rec)
        return lines

    with pytest.raises(SchemaError, match="labels") as info:
        read_dataset(_rewrite(tmp_path, small, mutate))
    assert info.value.field == "labels" and info.value.line == 3


def test_missing_field_names_field(tmp_path, small):
    def mutate(lines):
        rec = json.loads(lines[1])
        del rec["item_age_days"]
        lines[1] = json.dumps(rec)
        return lines

    with pytest.raises(SchemaError, match="item_age_days"):
        read_dataset(_rewrite(tmp_path, small, mutate))


def test_malformed_line_reports_line_number(tmp_path, small):
    def mutate(lines):
        lines[2] = lines[2][:-5]
        return lines

    with pytest.raises(DatasetFormatError) as info:
        read_dataset(_rewrite(tmp_path, small, mutate))
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_dataset_subset_keeps_columns(small):
    sub = small.train.subset(np.arange(5))
    assert isinstance(sub, Dataset) and len(sub) == 5
    np.testing.assert_array_equal(sub.x_hist, small.train.x_hist[:5])
