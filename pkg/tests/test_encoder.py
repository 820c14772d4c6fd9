import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olid_ensemble import tensor as T
from olid_ensemble.encoder import (EncoderConfig, EncoderModel, HeadError, classify, collate,
                                   encode_sequence, gradient_check_model, init_model,
                                   load_checkpoint, mlm_logits, parameter_count,
                                   predict_class, regress, save_checkpoint,
                                   sentence_representation, swap_head)
from olid_ensemble.rng import RngStream
from olid_ensemble.tokenizer import encode

TINY = dict(hidden=8, layers=2, heads=2, ffn=16, vocab_size=20, max_positions=8)


def tiny(variant="A", head="mlm", seed=1, dropout=0.0, spread=True):
    cfg = EncoderConfig.for_variant(variant, dropout=dropout, **TINY)
    model = init_model(cfg, RngStream(seed), head=head)
    if spread:
        # widen the 0.02 init so gradients are far from zero for finite differences
        r = np.random.default_rng(seed)
        for name, p in model.params.items():
            p.data[...] = p.data * 20 + (0.2 * r.normal(size=p.shape) if p.data.ndim == 1 else 0)
    return model


IDS = np.array([[2, 5, 7, 9, 3, 0], [2, 11, 3, 0, 0, 0]])
MASK = (IDS != 0).astype(np.int8)


def mlm_loss(model):
    targets = np.full(IDS.size, T.IGNORE_INDEX)
    targets[[1, 2, 7]] = [6, 8, 12]
    hidden = T.reshape(model.forward(IDS, MASK), (-1, model.config.hidden))
    return T.cross_entropy(mlm_logits(model, hidden), targets)


def cls_loss(model):
    rep = sentence_representation(model.forward(IDS, MASK))
    return T.cross_entropy(classify(model, rep), [1, 0])


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(hidden=10, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(dropout=1.0)
    with pytest.raises(ValueError):
        EncoderConfig(variant="C")
    a, b = EncoderConfig.for_variant("A"), EncoderConfig.for_variant("B")
    assert a.use_segment_embeddings and a.masking_policy == "static"
    assert not b.use_segment_embeddings and b.masking_policy == "dynamic"


def test_parameter_count_closed_form():
    h, layers, f, v, p = 32, 2, 64, 1000, 128
    cfg = EncoderConfig.for_variant("A", hidden=h, layers=layers, heads=4, ffn=f, vocab_size=v)
    embeddings = v * h + p * h + 2 * h + 2 * h
    per_layer = (3 * h * h + 3 * h) + (h * h + h) + 2 * h + (f * h + f) + (h * f + h) + 2 * h
    assert parameter_count(cfg) == embeddings + layers * per_layer == 53312
    assert sum(t.data.size for t in init_model(cfg, RngStream(0)).parameters()) == 53312


def test_init_determinism_and_distribution():
    cfg = EncoderConfig.for_variant("A", **TINY)
    a, b = init_model(cfg, RngStream(7)), init_model(cfg, RngStream(7))
    assert a.checksum() == b.checksum()
    w = a["layers.0.ffn.in.weight"].data
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(a["layers.0.ln1.gain"].data == 1) and np.all(a["layers.0.ln1.bias"].data == 0)


def test_variants_differ_structurally():
    a = init_model(EncoderConfig.for_variant("A", **TINY), RngStream(3))
    b = init_model(EncoderConfig.for_variant("B", **TINY), RngStream(3))
    assert a["embeddings.segment"].shape == (2, 8)
    assert "embeddings.segment" not in b.params
    assert set(a.params) != set(b.params)


def test_attention_rows_and_pad_columns():
    model = tiny(spread=False)
    _, attention = model.forward(IDS, MASK, return_attention=True)
    for probs in attention:  # [B, heads, S, S]
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(probs >= 0)
        pad_cols = ~MASK.astype(bool)
        assert np.all(probs[0][:, :, pad_cols[0]] == 0.0)
        assert np.all(probs[1][:, :, pad_cols[1]] == 0.0)


def test_permutation_equivariance_without_positions():
    model = tiny("B", spread=False)
    model["embeddings.position"].data[...] = 0.0
    ids = np.array([[5, 7, 9, 11]])
    mask = np.ones_like(ids)
    perm = np.array([2, 0, 3, 1])
    base = model.forward(ids, mask).data[0]
    permuted = model.forward(ids[:, perm], mask).data[0]
    np.testing.assert_allclose(permuted, base[perm], atol=1e-5)


def test_eval_forward_is_bitwise_repeatable():
    model = tiny(dropout=0.3)
    a = model.forward(IDS, MASK, mode="eval").data
    b = model.forward(IDS, MASK, mode="eval").data
    assert a.tobytes() == b.tobytes()
    c = model.forward(IDS, MASK, mode="train", rng=RngStream(1)).data
    assert c.tobytes() != a.tobytes()


def test_out_of_range_id():
    with pytest.raises(IndexError):
        tiny().forward(np.array([[2, 25, 3]]), np.ones((1, 3)))


def test_sentence_representation_is_cls_row(small_vocab):
    cfg = EncoderConfig.for_variant("A", hidden=16, heads=2, ffn=32, vocab_size=len(small_vocab),
                                    max_positions=16)
    model = init_model(cfg, RngStream(0))
    seq = encode("you are an idiot", small_vocab, 16)
    hidden = encode_sequence(model, seq)
    assert hidden.shape == (16, 16)
    rep = sentence_representation(hidden)
    assert rep.shape == (16,)
    assert rep.data.tobytes() == hidden.data[0].tobytes()
    other = encode("you are an clown", small_vocab, 16)
    assert not np.array_equal(sentence_representation(encode_sequence(model, other)).data, rep.data)


def test_padding_does_not_change_real_rows():
    model = tiny(spread=False)
    trimmed = model.forward(IDS[1:, :3], MASK[1:, :3]).data[0]
    padded = model.forward(IDS[1:], MASK[1:]).data[0, :3]
    np.testing.assert_allclose(trimmed, padded, atol=1e-6)


def test_heads():
    model = tiny(head="mlm")
    logits = mlm_logits(model, model.forward(IDS, MASK))
    assert logits.shape == (2, 6, 20)
    with pytest.raises(HeadError):
        classify(model, T.Tensor(np.zeros(8)))

    reg = swap_head(tiny(head="none"), "regression", RngStream(0))
    reg["head.weight"].data[...] = 0
    assert float(regress(reg, T.Tensor(np.ones(8))).data) == 0.5
    out = regress(swap_head(tiny(), "regression", RngStream(0)), T.Tensor(np.full((4, 8), 30.0)))
    assert np.all((out.data > 0) & (out.data < 1))

    clf = swap_head(tiny(), "classification", RngStream(0))
    clf["head.weight"].data[...] = 0
    logits = classify(clf, T.Tensor(np.ones(8))).data
    assert logits.tolist() == [0.0, 0.0] and predict_class(logits) == 0
    probs = T.softmax(classify(clf, T.Tensor(np.arange(8.0)))).data
    assert abs(probs.sum() - 1) < 1e-6


def test_swap_head_preserves_encoder_bits():
    model = tiny(head="mlm")
    before = model.forward(IDS, MASK).data
    reg = swap_head(model, "regression", RngStream(1))
    clf = swap_head(reg, "classification", RngStream(2))
    assert clf["head.weight"].shape == (2, 8)
    for name, p in model.encoder_parameters().items():
        assert clf[name].data.tobytes() == p.data.tobytes()
    assert clf.forward(IDS, MASK).data.tobytes() == before.tobytes()
    again = swap_head(clf, "classification", RngStream(3))
    assert again.checksum() == clf.checksum()


@pytest.mark.parametrize("variant", ["A", "B"])
@pytest.mark.parametrize("loss", [mlm_loss, cls_loss], ids=["mlm", "classification"])
def test_full_model_gradient_check(variant, loss):
    with T.check_mode():
        head = "mlm" if loss is mlm_loss else "classification"
        model = tiny(variant, head=head)
        worst = gradient_check_model(model, loss, per_tensor=6)
    assert max(worst.values()) < 1e-3, worst


def test_checkpoint_roundtrip_bytes(tmp_path):
    model = tiny(head="classification")
    digest = save_checkpoint(model, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    assert loaded.checksum() == digest
    save_checkpoint(loaded, tmp_path / "b")
    for name in ("config.tsv", "manifest.tsv", "weights.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = (tmp_path / "a" / "manifest.tsv").read_text().splitlines()
    assert manifest[0].split("\t") == ["embeddings.token", "20x8", "0"]


def test_collate_trims_shared_padding(small_vocab):
    seqs = [encode("you are", small_vocab, 12), encode("a lovely day", small_vocab, 12)]
    ids, mask, _ = collate(seqs)
    assert ids.shape == (2, 5)
    assert collate(seqs, trim=False)[0].shape == (2, 12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(5, 19), min_size=1, max_size=6), st.integers(0, 1000))
def test_representation_dim_and_attention_property(tokens, seed):
    model = init_model(EncoderConfig.for_variant("A", **TINY), RngStream(seed))
    ids = np.array([[2, *tokens, 3] + [0] * (6 - len(tokens))])
    mask = (ids != 0).astype(np.int8)
    hidden, attention = model.forward(ids, mask, return_attention=True)
    assert sentence_representation(hidden).shape == (1, 8)
    for probs in attention:
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
        assert np.all(probs[..., ~mask[0].astype(bool)] == 0.0)
