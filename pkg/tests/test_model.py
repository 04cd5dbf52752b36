import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from palkit.adapters import FAMILIES, AdapterSpec
from palkit.encoder import ModelConfig
from palkit.model import HeadSpec, MultiTaskModel, model_param_shapes
from palkit.numerics import Rng, no_grad
from palkit.scheduler import SamplerConfig, TaskData, TrainRunConfig, summarize, train
from palkit.tasks import TaskSpec, Vocab, encode_dataset, synth_splits, synth_tokens

CFG = ModelConfig(d_m=16, n_layers=2, n_heads=2, d_ff=32, vocab_size=12, max_seq_len=8, n_tasks=2)


def batch():
    ids = np.array([[1, 5, 6, 7, 2], [1, 8, 2, 0, 0]])
    return ids, np.zeros_like(ids), ids != 0


def test_head_count_must_match_config():
    with pytest.raises(ValueError, match="n_tasks"):
        MultiTaskModel(CFG, AdapterSpec(), [HeadSpec(2)])


def test_parameter_groups():
    m = MultiTaskModel(CFG, AdapterSpec("PAL", d_s=8, n_heads_s=2), [HeadSpec(2), HeadSpec(1, True)])
    assert m.group_of("layer0.attn.wq") == "base"
    assert m.group_of("task1.adapter.enc") == "adapter"
    assert m.group_of("task1.out.w") == "head"
    assert m.task_of("task1.adapter.layer0.wq") == 1 and m.task_of("pool.w") is None
    assert set(m.params) == set(model_param_shapes(CFG, m.spec, m.heads))


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_builds_and_predicts(family):
    kwargs = {} if family in ("None", "LHUC", "TopBertLayer") else {"d_s": 8, "n_heads_s": 2}
    m = MultiTaskModel(CFG, AdapterSpec(family, n_top_layers=1, **kwargs), [HeadSpec(3), HeadSpec(1, True)])
    ids, seg, mask = batch()
    assert m.forward(0, ids, seg, mask).shape == (2, 3)
    assert m.predict(0, ids, seg, mask).shape == (2,)
    reg = m.predict(1, ids, seg, mask)
    assert reg.dtype == np.float64 and reg.shape == (2,)
    loss = m.loss(1, ids, seg, mask, np.array([0.5, 2.0]))
    assert loss.shape == () and np.isfinite(loss.data)


def test_task_index_out_of_range():
    m = MultiTaskModel(CFG, AdapterSpec(), [HeadSpec(2)] * 2)
    with pytest.raises(IndexError):
        m.forward(2, *batch())


def test_state_round_trip_and_shape_check():
    m = MultiTaskModel(CFG, AdapterSpec("LowRank", d_s=4), [HeadSpec(2)] * 2, seed=3)
    state = m.state_dict()
    m2 = MultiTaskModel(CFG, AdapterSpec("LowRank", d_s=4), [HeadSpec(2)] * 2, seed=0, state=state)
    ids, seg, mask = batch()
    with no_grad():
        assert_array_equal(m.forward(1, ids, seg, mask).data, m2.forward(1, ids, seg, mask).data)
    state["task0.out.w"] = np.zeros((5, 16))
    with pytest.raises(ValueError, match="task0.out.w"):
        MultiTaskModel(CFG, AdapterSpec("LowRank", d_s=4), [HeadSpec(2)] * 2, state=state)
    with pytest.raises(KeyError, match="missing"):
        m.load_state_dict({})


def test_seeded_initialisation():
    a = MultiTaskModel(CFG, AdapterSpec("PAL", d_s=8, n_heads_s=2), [HeadSpec(2)] * 2, seed=7)
    b = MultiTaskModel(CFG, AdapterSpec("PAL", d_s=8, n_heads_s=2), [HeadSpec(2)] * 2, seed=7)
    c = MultiTaskModel(CFG, AdapterSpec("PAL", d_s=8, n_heads_s=2), [HeadSpec(2)] * 2, seed=8)
    for k in a.params:
        assert_array_equal(a.params[k].data, b.params[k].data)
    assert not np.array_equal(a.params["layer0.attn.wq"].data, c.params["layer0.attn.wq"].data)
    assert_array_equal(a.params["task0.adapter.dec"].data, 0.0)


def test_masked_padding_does_not_change_prediction():
    m = MultiTaskModel(CFG, AdapterSpec("PAL", d_s=8, n_heads_s=2), [HeadSpec(2)] * 2, seed=1)
    for p in m.params.values():
        p.data = p.data + Rng(1).normal(p.shape, 0.2)
    short = np.array([[1, 5, 2]])
    padded = np.array([[1, 5, 2, 0, 0]])
    with no_grad():
        a = m.forward(0, short, np.zeros_like(short), short != 0).data
        b = m.forward(0, padded, np.zeros_like(padded), padded != 0).data
        c = m.forward(0, np.array([[1, 5, 2, 9, 9]]), np.zeros_like(padded), padded != 0).data
    assert_allclose(a, b, atol=1e-12)
    assert_allclose(a, c, atol=1e-12)


def test_two_identical_tasks_train_to_matching_scores():
    """Two copies of one task, everything shared but the heads: dev scores agree within 2 points."""
    train_ds, dev_ds = synth_splits("parity", 400, 200, vocab_size=10, seed=5)
    vocab = Vocab(synth_tokens(10))
    enc_tr, enc_dv = encode_dataset(train_ds, vocab, 10), encode_dataset(dev_ds, vocab, 10)
    tasks = [TaskData(TaskSpec(n, metric="matthews", train_size=400), enc_tr, enc_dv) for n in ("a", "b")]
    cfg = ModelConfig(d_m=16, n_layers=1, n_heads=2, d_ff=32, vocab_size=len(vocab), max_seq_len=10, n_tasks=2)
    run = TrainRunConfig(total_steps=400, base_lr=3e-3, eval_every=100, max_seq_len=10)
    gaps, means = [], []
    for seed in (0, 1, 2):
        m = MultiTaskModel(cfg, AdapterSpec(), [HeadSpec(2)] * 2, seed=seed, init_std=0.1)
        res = train(m, tasks, SamplerConfig("round_robin"), run, seed=seed)
        s = res.final_scores
        gaps.append(s["a"] - s["b"])
        means.append((s["a"] + s["b"]) / 2)
    gap, _ = summarize(gaps)
    assert abs(gap) <= 0.02
    assert np.mean(means) > 0.5  # the pair actually learned something
