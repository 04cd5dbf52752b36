import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from palkit.tasks import (
    CLS,
    PAD,
    SEP,
    UNK,
    Example,
    TaskSpec,
    Vocab,
    affinity_label,
    decode_ids,
    encode_dataset,
    encode_example,
    export_tsv,
    load_tsv,
    majority_label,
    metric_accuracy,
    metric_matthews,
    metric_pearson,
    overlap_label,
    parity_label,
    synth_generate,
    synth_splits,
)

SINGLE = TaskSpec("cola", "single", "classes", 2, "matthews")
PAIR = TaskSpec("mrpc", "pair", "classes", 2, "accuracy")
REG = TaskSpec("sts", "pair", "regression", 2, "pearson")


# ---------------------------------------------------------------------------
# TaskSpec / Vocab
# ---------------------------------------------------------------------------


def test_pearson_requires_regression():
    with pytest.raises(ValueError):
        TaskSpec("x", "single", "classes", 2, "pearson")
    with pytest.raises(ValueError):
        TaskSpec("x", "pair", "regression", 2, "accuracy")


def test_train_size_positive():
    with pytest.raises(ValueError):
        TaskSpec("x", train_size=0)


def test_vocab_specials_and_unknown():
    v = Vocab(["b", "a", "b"])
    assert v.tokens[:4] == [PAD, CLS, SEP, UNK]
    assert v[PAD] == 0
    assert len(v) == 6
    assert v["zzz"] == v[UNK]
    assert sorted(v.index.values()) == list(range(len(v)))


# ---------------------------------------------------------------------------
# TSV
# ---------------------------------------------------------------------------


def test_load_two_line_single_file(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("the cat\t1\na dog sat\t0\n", encoding="utf-8")
    ds = load_tsv(p, SINGLE)
    assert len(ds) == 2
    assert ds.examples[0] == Example(("the", "cat"), None, 1)


def test_header_is_skipped(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("text_a\tlabel\nx y\t0\n", encoding="utf-8")
    assert len(load_tsv(p, SINGLE)) == 1


def test_pair_file_missing_text_b_is_an_error(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("a b\tc d\t1\nonly one\t0\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r"a\.tsv:2"):
        load_tsv(p, PAIR)


def test_label_out_of_range(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("x\t0\ny\t2\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r":2: label 2 out of range"):
        load_tsv(p, SINGLE)


def test_non_numeric_label(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("x\tyes\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        load_tsv(p, SINGLE)


def test_regression_labels_parse_exactly(tmp_path):
    p = tmp_path / "s.tsv"
    values = [f"{i * 0.5:.1f}" for i in range(11)]
    p.write_text("".join(f"a\tb\t{v}\n" for v in values), encoding="utf-8")
    ds = load_tsv(p, REG)
    assert [ex.label for ex in ds] == [float(v) for v in values]
    out = tmp_path / "round.tsv"
    export_tsv(ds, out)
    assert [ex.label for ex in load_tsv(out, REG)] == [ex.label for ex in ds]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=8))
def test_regression_export_round_trip_is_exact(tmp_path_factory, labels):
    from palkit.tasks import TaskDataset

    ds = TaskDataset(REG, [Example(("a",), ("b",), v) for v in labels])
    path = tmp_path_factory.mktemp("rt") / "r.tsv"
    export_tsv(ds, path)
    assert [ex.label for ex in load_tsv(path, REG)] == labels


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


@pytest.fixture
def vocab():
    return Vocab([f"t{i}" for i in range(200)])


def test_empty_single_example(vocab):
    ids, seg, mask = encode_example(Example(()), vocab, 8)
    assert_array_equal(ids[:2], [vocab[CLS], vocab[SEP]])
    assert_array_equal(ids[2:], 0)
    assert mask.sum() == 2
    assert_array_equal(seg, 0)


def test_pair_layout(vocab):
    ex = Example(("t1", "t2", "t3"), ("t4", "t5"), 0)
    ids, seg, mask = encode_example(ex, vocab, 16)
    assert ids.shape == (16,)
    # [CLS] a a a [SEP] | b b [SEP] | pad
    assert_array_equal(seg, [0] * 5 + [1] * 3 + [0] * 8)
    assert_array_equal(mask, [True] * 8 + [False] * 8)
    assert ids[4] == ids[7] == vocab[SEP]


def test_single_truncation(vocab):
    ex = Example(tuple(f"t{i}" for i in range(100)))
    ids, _, mask = encode_example(ex, vocab, 8)
    assert mask.sum() == 8
    a, b = decode_ids(ids, vocab)
    assert a == [f"t{i}" for i in range(6)] and b is None


def test_pair_truncation_longest_first(vocab):
    ex = Example(tuple(f"t{i}" for i in range(10)), ("t50", "t51"), 0)
    ids, _, _ = encode_example(ex, vocab, 9)
    a, b = decode_ids(ids, vocab)
    assert (len(a), len(b)) == (4, 2)


def test_max_len_floor(vocab):
    with pytest.raises(ValueError):
        encode_example(Example(("t1",)), vocab, 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 12), st.one_of(st.none(), st.integers(0, 12)), st.integers(3, 20))
def test_decode_recovers_truncated_tokens(na, nb, max_len):
    vocab = Vocab([f"t{i}" for i in range(40)])
    a = [f"t{i}" for i in range(na)]
    b = None if nb is None else [f"t{20 + i}" for i in range(nb)]
    ids, seg, mask = encode_example(Example(tuple(a), None if b is None else tuple(b)), vocab, max_len)
    da, db = decode_ids(ids, vocab)
    if b is None:
        assert da == a[: max_len - 2]
    else:
        assert da == a[: len(da)] and db == b[: len(db)]
        assert len(da) + len(db) == min(na + nb, max_len - 3)
    assert mask.sum() == (ids != 0).sum()


def test_batch_trims_to_longest(vocab):
    from palkit.tasks import TaskDataset

    ds = TaskDataset(SINGLE, [Example(("t1",), None, 0), Example(("t1", "t2", "t3"), None, 1)])
    enc = encode_dataset(ds, vocab, 12)
    ids, seg, mask, labels = enc.batch(np.array([0]))
    assert ids.shape == (1, 3)
    ids, seg, mask, labels = enc.batch(np.array([0, 1]))
    assert ids.shape == (2, 5) and labels.tolist() == [0, 1]


# ---------------------------------------------------------------------------
# synthetic families
# ---------------------------------------------------------------------------


def test_rule_examples():
    assert parity_label(["A", "A", "B"], "A") == 0
    assert overlap_label(["X", "Y"], ["Z"]) == 0
    assert overlap_label(["X", "Y"], ["Y"]) == 1
    assert math.isclose(affinity_label({"X", "Y"}, {"Y", "Z"}), 5 / 3)
    assert majority_label(["w1", "w2", "w2"], "w1", "w2") == 1


@pytest.mark.parametrize("family", ["parity", "majority", "overlap", "affinity"])
def test_labels_follow_generative_rule(family):
    ds = synth_generate(family, 300, seed=3)
    for ex in ds:
        if family == "parity":
            assert ex.label == parity_label(ex.text_a)
        elif family == "majority":
            assert ex.label == majority_label(ex.text_a)
        elif family == "overlap":
            assert ex.label == overlap_label(ex.text_a, ex.text_b)
        else:
            assert ex.label == affinity_label(ex.text_a, ex.text_b)
            assert 0.0 <= ex.label <= 5.0
        assert (ex.text_b is not None) == (ds.spec.input_kind == "pair")


@pytest.mark.parametrize("family", ["parity", "majority", "overlap"])
def test_classification_families_are_roughly_balanced(family):
    labels = np.array([ex.label for ex in synth_generate(family, 2000, seed=1)])
    assert 0.35 < labels.mean() < 0.65


def test_synth_is_deterministic_and_seed_sensitive():
    a = synth_generate("overlap", 50, seed=9)
    b = synth_generate("overlap", 50, seed=9)
    c = synth_generate("overlap", 50, seed=10)
    assert a.examples == b.examples
    assert a.examples != c.examples


def test_train_dev_disjoint():
    train, dev = synth_splits("parity", 800, 300, seed=2)
    assert not set(train.examples) & set(dev.examples)
    assert len(train) == 800 and len(dev) == 300


def test_unknown_family():
    with pytest.raises(ValueError, match="unknown synthetic family"):
        synth_generate("sorting", 10)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_accuracy_examples():
    assert metric_accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert metric_accuracy([0, 1], [1, 0]) == 0.0
    assert metric_accuracy([1, 1, 0, 0], [1, 1, 0, 1]) == 0.75


def test_matthews_examples():
    assert metric_matthews([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    # TP=TN=FP=FN=1
    assert metric_matthews([1, 0, 1, 0], [1, 0, 0, 1]) == 0.0
    # TP=2, TN=1, FP=0, FN=1: (2*1 - 0) / sqrt(2*3*1*2)
    assert abs(metric_matthews([1, 1, 0, 0], [1, 1, 0, 1]) - 2 / math.sqrt(12)) < 1e-15
    # TP=2, TN=1, FP=0, FN=2 is the split whose value is 2/sqrt(24)
    value = metric_matthews([1, 1, 0, 0, 0], [1, 1, 0, 1, 1])
    assert abs(value - 2 / math.sqrt(24)) < 1e-15
    assert round(value, 4) == 0.4082
    assert metric_matthews([1, 1, 1], [1, 0, 1]) == 0.0  # a zero factor


def test_pearson_examples():
    x = np.array([1.0, 2.0, 5.0, 3.0])
    assert abs(metric_pearson(x, x) - 1.0) < 1e-15
    assert abs(metric_pearson(-x, x) + 1.0) < 1e-15
    assert round(metric_pearson([1, 2, 3], [1, 2, 4]), 4) == 0.9820
    assert metric_pearson([1, 1, 1], [1, 2, 3]) == 0.0


def test_pearson_needs_two_points():
    with pytest.raises(ValueError):
        metric_pearson([1.0], [2.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=40), st.randoms(use_true_random=False))
def test_matthews_symmetric_under_class_flip(labels, rnd):
    labels = np.array(labels)
    preds = np.array([rnd.randint(0, 1) for _ in labels])
    assert abs(metric_matthews(preds, labels) - metric_matthews(1 - preds, 1 - labels)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=30), st.floats(0.1, 100), st.floats(-50, 50))
def test_pearson_affine_invariance(xs, a, b):
    x = np.array(xs)
    y = np.cos(np.arange(x.size)) + 0.3 * x
    if np.ptp(x) < 1e-6:
        return
    assert abs(metric_pearson(a * x + b, y) - metric_pearson(x, y)) < 1e-9
