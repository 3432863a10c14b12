import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semharq.errors import ConfigError, ShapeError
from semharq.nncore import SeededRng, numeric_grad, relative_error
from semharq.semcodec import (
    CodecDims,
    Dataset,
    LossWeights,
    SemanticCodec,
    generate_dataset,
    loss_channel_mse,
    loss_cross_entropy,
    loss_multitask,
    loss_triplet_hard,
    softmax_cross_entropy,
)

SMALL = CodecDims(d_obs=10, n_features=8, n_symbols=8, counts=(5, 3, 2))


def test_zero_jitter_items_of_one_identity_match():
    data = generate_dataset(0, (4, 3, 2), 5, noise_scale=0.0, d_obs=8)
    rows = np.flatnonzero(data.labels[:, 0] == 2)
    assert np.all(data.x[rows] == data.x[rows[0]])


def test_dataset_deterministic_and_serialisable(tmp_path):
    a = generate_dataset(3, (6, 3, 2), 4, d_obs=8)
    b = generate_dataset(3, (6, 3, 2), 4, d_obs=8)
    assert a.to_bytes() == b.to_bytes()
    assert generate_dataset(4, (6, 3, 2), 4, d_obs=8).to_bytes() != a.to_bytes()
    for name in ("d.bin", "d.csv"):
        a.save(tmp_path / name)
        back = Dataset.load(tmp_path / name)
        assert np.array_equal(back.x, a.x) and np.array_equal(back.labels, a.labels)
        assert back.counts == a.counts


def test_dataset_needs_two_classes():
    with pytest.raises(ConfigError):
        generate_dataset(0, (1, 3, 2))


def test_split_holds_out_per_identity():
    data = generate_dataset(0, (5, 3, 2), 6, d_obs=4)
    train, test = data.split(2)
    assert len(test) == 10 and len(train) == 20
    assert np.all(np.bincount(test.labels[:, 0]) == 2)


def test_linear_classifier_separates_colors():
    """Least-squares one-hot regression on raw x as a simple classifier oracle."""
    data = generate_dataset(0, (32, 6, 4), 24, noise_scale=0.1, d_obs=64)
    train, test = data.split(6)
    xa = np.hstack([train.x, np.ones((len(train), 1))])
    w, *_ = np.linalg.lstsq(xa, np.eye(6)[train.labels[:, 1]], rcond=None)
    pred = np.argmax(np.hstack([test.x, np.ones((len(test), 1))]) @ w, axis=1)
    assert np.mean(pred == test.labels[:, 1]) > 0.9


def test_codec_shapes_and_degenerate_cases():
    codec = SemanticCodec(SMALL, 0)
    x = SeededRng(0).normal((3, 10))
    s = codec.encode_semantic(x)
    assert s.shape == (3, 8) and np.all(s >= 0)
    assert codec.jsc_encode(s).shape == (3, 16)
    for layer in codec.encoder.layers:
        layer.weight[...] = 0.0
        layer.bias[...] = np.linspace(-1, 1, layer.n_out)
    assert np.allclose(codec.encode_semantic(x), np.maximum(np.linspace(-1, 1, 8), 0.0))
    with pytest.raises(ShapeError):
        codec.encode_semantic(np.ones(9))


def test_zero_buffer_decodes_to_bias_path():
    codec = SemanticCodec(SMALL, 1)
    l1, l2 = codec.jsc_decoder.layers
    hidden = np.where(l1.bias > 0, l1.bias, 0.01 * l1.bias)
    expected = np.maximum(l2.weight @ hidden + l2.bias, 0.0)
    assert np.allclose(codec.jsc_decode(np.zeros(16)), expected)


def test_decode_task_uniform_and_unknown_index():
    codec = SemanticCodec(SMALL, 2)
    codec.performers[1].layers[0].weight[...] = 0.0
    pred = codec.decode_task(np.ones(8), 1)
    assert np.allclose(pred.probs, 1 / 3)
    assert pred.logits.shape == (3,)
    with pytest.raises(ConfigError):
        codec.decode_task(np.ones(8), 3)


def test_head_widths_follow_counts():
    codec = SemanticCodec(CodecDims(counts=(575, 10, 9)), 0)
    assert [p.n_out for p in codec.performers] == [575, 10, 9]
    codec = SemanticCodec(CodecDims(), 0)
    assert [p.n_out for p in codec.performers] == [32, 6, 4]


def test_encoder_input_gradient():
    codec = SemanticCodec(SMALL, 3)
    x = SeededRng(1).normal(10)
    up = SeededRng(2).normal(8)
    codec.encoder.forward(x)
    codec.encoder.zero_grad()
    gx = codec.encoder.backward(up)
    assert relative_error(gx, numeric_grad(lambda: float(codec.encoder(x) @ up), x)) <= 1e-4


def test_cross_entropy_cases():
    y = np.array([0.0, 1.0, 0.0])
    assert loss_cross_entropy(y, y)[0] <= 1e-9
    assert loss_cross_entropy(y, np.full(3, 1 / 3))[0] == pytest.approx(np.log(3))
    p = np.array([0.2, 0.5, 0.3])
    loss, g = loss_cross_entropy(y, p)
    assert relative_error(g, numeric_grad(lambda: loss_cross_entropy(y, p)[0], p)) <= 1e-6


def test_softmax_cross_entropy_gradient():
    logits = SeededRng(0).normal((4, 5))
    labels = np.array([0, 3, 3, 1])
    _, g = softmax_cross_entropy(logits, labels)
    assert relative_error(g, numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)) <= 1e-6


def test_mse_cases():
    assert loss_channel_mse(np.ones(3), np.ones(3))[0] == 0.0
    assert loss_channel_mse([1.0, 1.0], [0.0, 0.0])[0] == 1.0
    s, sh = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, 0.5])
    assert np.allclose(loss_channel_mse(s, sh)[1], 2 * (sh - s) / 3)
    with pytest.raises(ShapeError):
        loss_channel_mse(np.ones(2), np.ones(3))


def test_triplet_identical_embeddings_give_margin():
    res = loss_triplet_hard(np.zeros((4, 3)), [0, 0, 1, 1], 0.3)
    assert res.loss == pytest.approx(0.3)


def test_triplet_inactive_hinge():
    emb = np.array([[0.0], [0.0], [1.0], [1.0]])
    assert loss_triplet_hard(emb, [0, 0, 1, 1], 0.3).loss == 0.0


def test_triplet_hand_computed_batch():
    # anchors: 0 -> 2 - 1.5 + .3, 1 -> 2 - .5 + .3, 2 -> 2.5 - .5 + .3, 3 -> 2.5 - 2 + .3
    emb = np.array([[0.0], [2.0], [1.5], [4.0]])
    res = loss_triplet_hard(emb, [0, 0, 1, 1], 0.3)
    assert res.loss == pytest.approx((0.8 + 1.8 + 2.3 + 0.8) / 4)
    assert res.valid_anchors == 4


def test_triplet_degenerate_batch_flags():
    res = loss_triplet_hard(np.ones((3, 2)), [0, 0, 0], 0.3)
    assert res.loss == 0.0 and res.degenerate


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_triplet_translation_invariance(seed, shift):
    emb = SeededRng(seed).normal((6, 3))
    labels = [0, 0, 1, 1, 2, 2]
    a = loss_triplet_hard(emb, labels).loss
    b = loss_triplet_hard(emb + shift, labels).loss
    assert b == pytest.approx(a, abs=1e-9)


def _heads(seed, n=6):
    rng = SeededRng(seed)
    logits = [rng.normal((n, m)) for m in (3, 4, 2)]
    emb = rng.normal((n, 5))
    labels = np.stack([np.array([0, 0, 1, 1, 2, 2]), rng.integers(0, 4, n), rng.integers(0, 2, n)], axis=1)
    return logits, emb, labels


def test_multitask_reduces_and_is_weighted_sum():
    logits, emb, labels = _heads(0)
    only = loss_multitask(logits, emb, labels, LossWeights(1.0, 0.0, 0.0))
    assert only.total == pytest.approx(only.parts["triplet"] + only.parts["reid_ce"])
    full = loss_multitask(logits, emb, labels, LossWeights(1.0, 0.125, 0.125))
    p = full.parts
    expected = p["triplet"] + p["reid_ce"] + 0.125 * (p["color_ce"] + p["type_ce"])
    assert full.total == pytest.approx(expected)
    assert LossWeights().as_tuple() == (1.0, 0.125, 0.125)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 5.0))
def test_multitask_linear_in_each_weight(seed, lam):
    logits, emb, labels = _heads(seed)
    base = loss_multitask(logits, emb, labels, LossWeights(1.0, 0.0, 0.125))
    scaled = loss_multitask(logits, emb, labels, LossWeights(1.0, lam, 0.125))
    assert scaled.total - base.total == pytest.approx(lam * base.parts["color_ce"], abs=1e-9)
