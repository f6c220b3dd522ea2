import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdvit import tensor as T
from mdvit.config import PruningPolicy, VitConfig, tiny_config
from mdvit.data import DatasetSpec, synth_dataset
from mdvit.flops import cost, resolve_budget
from mdvit.hsic import gram
from mdvit.pruning import arg_top_k
from mdvit.vit import (TrainConfig, evaluate, finetune, forward, init_weights, layer_names, predict,
                       select_by_plan, select_subweights, supernet_train)

CFG = tiny_config()


@pytest.fixture(scope="module")
def weights():
    return init_weights(CFG, 0)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(2).normal(size=(8, CFG.channels, CFG.image_size, CFG.image_size))


def random_scores(rng, cfg=CFG):
    return ([rng.normal(size=cfg.ffn_dim) for _ in range(cfg.layers)],
            [rng.normal(size=cfg.heads) for _ in range(cfg.layers)])


def test_config_invariants():
    assert CFG.seq_len == 17 and CFG.num_patches == 16
    with pytest.raises(ValueError):
        VitConfig(heads=3, head_dim=16, embed_dim=64)
    with pytest.raises(ValueError):
        VitConfig(image_size=15)


def test_zero_policy_trace_shapes(weights, images):
    logits, tr = forward(CFG, weights, PruningPolicy.zeros(CFG.layers), images, capture=True)
    assert logits.shape == (8, CFG.num_classes)
    for l in range(CFG.layers):
        assert tr.ffn[l].shape == (8, 17, CFG.ffn_dim)
        assert tr.heads[l].shape == (8, 17, CFG.heads, CFG.head_dim)
        assert tr.tsl_inputs[l].shape == (8, 17, CFG.embed_dim)
        assert tr.attention[l].shape == (CFG.heads, 17, 17)
    np.testing.assert_array_equal(tr.logits, logits.data)


def test_token_ratio_ceil_propagates(weights, images):
    p = PruningPolicy(np.zeros(4), np.zeros(4), [0.5, 0, 0, 0])
    _, tr = forward(CFG, weights, p, images, capture=True)
    assert tr.tsl_inputs[0].shape[1] == 17
    assert [t.shape[1] for t in tr.tsl_inputs[1:]] == [9, 9, 9]
    assert tr.ffn[0].shape[1] == 9


def test_capture_does_not_change_logits(weights, images):
    rng = np.random.default_rng(0)
    p = PruningPolicy.from_vector(rng.uniform(0, 0.8, 12))
    sub = select_subweights(CFG, weights, p, *random_scores(rng))
    a = forward(CFG, sub, p, images)
    b, _ = forward(CFG, sub, p, images, capture=True)
    np.testing.assert_array_equal(a.data, b.data)


@given(st.lists(st.floats(0, 0.9), min_size=12, max_size=12), st.integers(0, 1000))
@settings(max_examples=15)
def test_any_valid_policy_gives_finite_logits(v, seed):
    w = init_weights(CFG, 0)
    x = np.random.default_rng(seed).normal(size=(3, 3, 16, 16))
    p = PruningPolicy.from_vector(v)
    sub = select_subweights(CFG, w, p, *random_scores(np.random.default_rng(seed)))
    assert np.all(np.isfinite(forward(CFG, sub, p, x).data))


def test_select_zero_policy_identity(weights):
    sub = select_subweights(CFG, weights, PruningPolicy.zeros(4), *random_scores(np.random.default_rng(0)))
    assert all(sub[k] is weights[k] for k in weights)


def test_select_keeps_top_scored_columns(weights):
    rng = np.random.default_rng(1)
    ns, hs = random_scores(rng)
    p = PruningPolicy.uniform(4, neuron=0.5, head=0.5)
    sub = select_subweights(CFG, weights, p, ns, hs)
    n = layer_names(2)
    keep = arg_top_k(ns[2], 64)
    np.testing.assert_array_equal(sub[n["ffn.w1"]], weights[n["ffn.w1"]][:, keep])
    np.testing.assert_array_equal(sub[n["ffn.w2"]], weights[n["ffn.w2"]][keep])
    np.testing.assert_array_equal(sub[n["ffn.b1"]], weights[n["ffn.b1"]][keep])
    hk = arg_top_k(hs[2], 2)
    np.testing.assert_array_equal(sub[n["attn.wo"]], weights[n["attn.wo"]][hk])
    assert sub["pos"] is weights["pos"]


def test_select_is_idempotent(weights):
    rng = np.random.default_rng(3)
    ns, hs = random_scores(rng)
    p = PruningPolicy.uniform(4, neuron=0.3, head=0.25)
    once = select_subweights(CFG, weights, p, ns, hs)
    twice = select_subweights(CFG, once, p, ns, hs)
    assert all(np.array_equal(once[k], twice[k]) for k in once)


def _materialize(cfg, weights, neurons, heads):
    """Independently built pruned weights: explicit copies with fancy indexing."""
    out = {k: np.array(v) for k, v in weights.items()}
    for l in range(cfg.layers):
        n = layer_names(l)
        for key in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            out[n[key]] = np.array([weights[n[key]][h] for h in heads[l]])
        out[n["ffn.w1"]] = np.stack([weights[n["ffn.w1"]][:, j] for j in neurons[l]], axis=1)
        out[n["ffn.b1"]] = np.array([weights[n["ffn.b1"]][j] for j in neurons[l]])
        out[n["ffn.w2"]] = np.stack([weights[n["ffn.w2"]][j] for j in neurons[l]])
    return out


def test_select_then_forward_equals_materialized_model(weights, images):
    rng = np.random.default_rng(4)
    ns, hs = random_scores(rng)
    p = PruningPolicy.from_vector(rng.uniform(0, 0.7, 12))
    sub = select_subweights(CFG, weights, p, ns, hs)
    neurons = [arg_top_k(s, k) for s, k in zip(ns, p.neurons_kept(CFG))]
    heads = [arg_top_k(s, k) for s, k in zip(hs, p.heads_kept(CFG))]
    mat = _materialize(CFG, weights, neurons, heads)
    tokens = [np.arange(k) for _, k in p.token_counts(CFG)]
    np.testing.assert_array_equal(forward(CFG, sub, p, images, tokens=tokens).data,
                                  forward(CFG, mat, p, images, tokens=tokens).data)


def test_width_mismatch_and_bad_inputs(weights, images):
    p = PruningPolicy.uniform(4, neuron=0.5)
    with pytest.raises(ValueError):
        forward(CFG, weights, p, images)
    with pytest.raises(ValueError):
        forward(CFG, weights, PruningPolicy.zeros(3), images)
    with pytest.raises(ValueError):
        forward(CFG, weights, PruningPolicy.zeros(4), images[:, :2])
    with pytest.raises(ValueError):
        select_subweights(CFG, weights, PruningPolicy.uniform(4, neuron=1.0), *random_scores(np.random.default_rng(0)))
    with pytest.raises(ValueError):
        select_by_plan(weights, [np.array([], dtype=int)] * 4, [np.arange(4)] * 4)


def test_unselected_tokens_get_zero_gradient(weights, images):
    p = PruningPolicy(np.zeros(4), np.zeros(4), [0.5, 0, 0, 0])
    _, tr = forward(CFG, weights, p, images, capture=True)
    keep = tr.tokens[0]
    x = T.Tensor(tr.tsl_inputs[0], requires_grad=True)
    n = layer_names(0)
    with T.Tape() as tape:
        h = T.layernorm(T.gather_rows(x, keep), weights[n["ln2.g"]], weights[n["ln2.b"]])
        y = T.sum(T.gelu(T.matmul(h, weights[n["ffn.w1"]])))
    tape.backward(y)
    dropped = np.setdiff1d(np.arange(17), keep)
    assert len(dropped) == 8
    np.testing.assert_array_equal(x.grad[:, dropped], 0.0)
    assert np.all(np.any(x.grad[:, keep] != 0, axis=-1))


def test_supernet_gradient_only_on_touched_slices():
    from mdvit.vit import _loss_and_grads
    w = init_weights(CFG, 0)
    x = np.random.default_rng(0).normal(size=(4, 3, 16, 16))
    p = PruningPolicy.uniform(4, neuron=0.5, head=0.5)
    neurons = [np.arange(0, 128, 2)] * 4
    heads = [np.array([1, 3])] * 4
    _, grads = _loss_and_grads(CFG, w, p, x, np.arange(4), neurons, heads)
    g1 = grads["blocks.0.ffn.w1"]
    np.testing.assert_array_equal(g1[:, 1::2], 0.0)
    assert np.any(g1[:, 0::2] != 0)
    gq = grads["blocks.0.attn.wq"]
    np.testing.assert_array_equal(gq[[0, 2]], 0.0)
    assert np.any(gq[[1, 3]] != 0)


def test_ordinary_training_reaches_low_loss():
    ds = synth_dataset(DatasetSpec(noise=0.3, train_per_class=64), seed=0)
    log = []
    supernet_train(CFG, ds.train.images, ds.train.labels, budget=cost(CFG).total, steps=120,
                   rho_max=0.0, seed=0, log=log)
    assert np.mean(log[-5:]) < 0.1 < log[0]


def test_supernet_rejects_unsatisfiable_budget():
    ds = synth_dataset(DatasetSpec(train_per_class=4), seed=0)
    with pytest.raises(ValueError):
        supernet_train(CFG, ds.train.images, ds.train.labels, budget=1000, steps=1)


@pytest.fixture(scope="module")
def trained():
    ds = synth_dataset(DatasetSpec(train_per_class=32), seed=1)
    budget = resolve_budget(CFG, 0.5)
    runs = [supernet_train(CFG, ds.train.images, ds.train.labels, budget, steps=15, seed=2) for _ in range(2)]
    return ds, runs


def test_supernet_training_is_deterministic(trained):
    ds, (a, b) = trained
    assert all(np.array_equal(a[k], b[k]) for k in a)
    rng = np.random.default_rng(0)
    for _ in range(2):
        p = PruningPolicy.from_vector(rng.uniform(0, 0.6, 12))
        ns = [rng.normal(size=128) for _ in range(4)]
        hs = [rng.normal(size=4) for _ in range(4)]
        accs = [evaluate(CFG, select_subweights(CFG, w, p, ns, hs), p, ds.val.images, ds.val.labels)
                for w in (a, b)]
        assert accs[0] == accs[1]


def test_finetune_deterministic_and_changes_weights(trained):
    ds, (w, _) = trained
    p = PruningPolicy.uniform(4, 0.5, 0.25, 0.2)
    rng = np.random.default_rng(0)
    sub = select_subweights(CFG, w, p, *random_scores(rng))
    tokens = [np.arange(k) for _, k in p.token_counts(CFG)]
    log = []
    a = finetune(CFG, sub, p, ds.train.images, ds.train.labels, 5, TrainConfig(lr=0.01), tokens=tokens, log=log)
    b = finetune(CFG, sub, p, ds.train.images, ds.train.labels, 5, TrainConfig(lr=0.01), tokens=tokens)
    assert len(log) == 5
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["blocks.0.ffn.w1"], sub["blocks.0.ffn.w1"])


def test_random_model_is_near_chance():
    ds = synth_dataset(DatasetSpec(val_per_class=128), seed=3)
    accs = [evaluate(CFG, init_weights(CFG, s), PruningPolicy.zeros(4), ds.val.images, ds.val.labels)
            for s in range(5)]
    assert abs(np.mean(accs) - 1 / 8) < 0.05


def test_accuracy_independent_of_batch_size(trained):
    ds, (w, _) = trained
    p = PruningPolicy.uniform(4, 0.0, 0.0, 0.3)
    tokens = [np.arange(k) for _, k in p.token_counts(CFG)]
    a = evaluate(CFG, w, p, ds.val.images, ds.val.labels, tokens=tokens, batch_size=256)
    b = evaluate(CFG, w, p, ds.val.images, ds.val.labels, tokens=tokens, batch_size=7)
    assert a == b
    logits = predict(CFG, w, PruningPolicy.zeros(4), ds.val.images[:10])
    assert logits.shape == (10, 8)


def test_labels_from_own_predictions_score_one():
    ds = synth_dataset(DatasetSpec(train_per_class=8), seed=0)
    w = init_weights(CFG, 0)
    pred = predict(CFG, w, PruningPolicy.zeros(4), ds.train.images).argmax(1)
    assert evaluate(CFG, w, PruningPolicy.zeros(4), ds.train.images, pred) == 1.0
    with pytest.raises(ValueError):
        evaluate(CFG, w, PruningPolicy.zeros(4), ds.train.images[:0], pred[:0])


def test_dynamic_token_selection_uses_own_logits(weights, images):
    p = PruningPolicy.uniform(4, 0, 0, 0.5)
    ref = forward(CFG, weights, PruningPolicy.zeros(4), images)
    a, ta = forward(CFG, weights, p, images, capture=True)
    b, tb = forward(CFG, weights, p, images, capture=True, output_gram=gram(ref.data))
    np.testing.assert_array_equal(a.data, b.data)
    with T.count_macs() as c:
        forward(CFG, weights, p, images)
    assert c[0] == len(images) * cost(CFG, p).total
