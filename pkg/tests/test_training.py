import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from olid_ensemble import tensor as T
from olid_ensemble.data import LabeledExample
from olid_ensemble.encoder import EncoderConfig, init_model, predict_class, swap_head
from olid_ensemble.rng import RngStream
from olid_ensemble.synthetic import generate
from olid_ensemble.tokenizer import MASK, NUM_SPECIAL, PAD, build_vocab, encode
from olid_ensemble.training import (Adam, AdamState, CheckpointStore, StageError, StageSpec,
                                    adam_step, best_epoch, dev_accuracy, mask_tokens,
                                    run_epoch, run_stage, sentence_outputs)


@pytest.fixture(scope="module")
def corpus():
    c = generate(400, seed=3)
    vocab = build_vocab([t.text for t in c.olid_train + c.solid], 500)
    return c, vocab


def examples(tweets, vocab, target=lambda t: int(t.gold_label == "OFF"), max_length=32):
    return [LabeledExample(t.id, encode(t.text, vocab, max_length), target(t)) for t in tweets]


def small_config(vocab, variant="A", **kw):
    base = dict(hidden=16, layers=1, heads=2, ffn=32, vocab_size=len(vocab), max_positions=32,
                dropout=0.0)
    base.update(kw)
    return EncoderConfig.for_variant(variant, **base)


# ---------------------------------------------------------------- Adam


def test_adam_first_step_closed_form():
    w = np.array([1.0])
    adam_step([w], [np.array([1.0])], AdamState(lr=0.1))
    assert abs(w[0] - (1.0 - 0.1 * 1.0 / (1.0 + 1e-8))) < 1e-15
    assert abs(w[0] - 0.9) < 1e-8


def test_adam_zero_gradient_leaves_weights():
    w = np.array([0.3, -2.0])
    adam_step([w], [np.zeros(2)], AdamState(lr=0.1))
    assert w.tolist() == [0.3, -2.0]


def test_adam_two_steps_match_recurrence():
    lr, g, b1, b2, eps = 0.01, 0.7, 0.9, 0.999, 1e-8
    w_ref, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    w, state = np.array([2.0]), AdamState(lr=lr)
    for _ in range(2):
        adam_step([w], [np.array([g])], state)
    assert state.t == 2
    assert abs(w[0] - w_ref) < 1e-9


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [np.zeros(2)], AdamState(lr=0.1))


# ---------------------------------------------------------------- masking


def _seq(vocab_size=50, length=40, real=30, seed=0):
    r = np.random.default_rng(seed)
    body = r.integers(NUM_SPECIAL, vocab_size, size=real - 2).tolist()
    ids = [2, *body, 3] + [PAD] * (length - real)
    from olid_ensemble.tokenizer import EncodedSequence
    return EncodedSequence(tuple(ids), (1,) * real + (0,) * (length - real))


def test_mask_rate_zero():
    seq = _seq()
    out, tgt = mask_tokens(seq, 0.0, "static", RngStream(1), key="a")
    assert out == seq and np.all(tgt == T.IGNORE_INDEX)


def test_static_vs_dynamic_policy():
    seq, rng = _seq(), RngStream(1)
    s1 = mask_tokens(seq, 0.3, "static", rng, key="a", epoch=1)[1]
    s2 = mask_tokens(seq, 0.3, "static", rng, key="a", epoch=2)[1]
    assert np.array_equal(s1, s2)
    d1 = mask_tokens(seq, 0.3, "dynamic", rng, key="a", epoch=1)[1]
    d2 = mask_tokens(seq, 0.3, "dynamic", rng, key="a", epoch=2)[1]
    assert not np.array_equal(d1, d2)


def test_mask_rejects_bad_rate():
    with pytest.raises(ValueError):
        mask_tokens(_seq(), 1.0, "static", RngStream(1))


def test_mask_statistics():
    # statistical oracle: Binomial selection at 0.15, 80% of selected become MASK
    rng = RngStream(5)
    selected = masked = eligible = 0
    for i in range(4000):
        seq = _seq(real=27, seed=i)
        out, tgt = mask_tokens(seq, 0.15, "static", rng, key=i, vocab_size=50)
        sel = tgt != T.IGNORE_INDEX
        eligible += 25
        selected += sel.sum()
        masked += (np.asarray(out.ids)[sel] == MASK).sum()
        assert not sel[0] and not sel[26] and not sel[27:].any()
    assert eligible == 100_000
    assert abs(selected / eligible - 0.15) < 0.01
    assert abs(masked / selected - 0.80) < 0.02


# ---------------------------------------------------------------- epochs and stages


def test_lr_zero_is_null_update(corpus):
    c, vocab = corpus
    model = init_model(small_config(vocab), RngStream(0), head="classification")
    before = model.checksum()
    run_epoch(model, examples(c.olid_train[:40], vocab), "classification",
              Adam(model.parameters(), 0.0), "train", RngStream(0), epoch=1)
    assert model.checksum() == before


def test_loss_trace_is_reproducible(corpus):
    c, vocab = corpus
    data = examples(c.olid_train[:48], vocab)

    def trace():
        model = init_model(small_config(vocab, dropout=0.1), RngStream(0), head="classification")
        opt = Adam(model.parameters(), 2e-3)
        return [run_epoch(model, data, "classification", opt, "train", RngStream(9), epoch=e)
                for e in (1, 2, 3)]

    assert trace() == trace()


def test_objective_must_match_head(corpus):
    c, vocab = corpus
    model = init_model(small_config(vocab), RngStream(0), head="regression")
    with pytest.raises(StageError):
        run_epoch(model, examples(c.olid_train[:4], vocab), "classification")


def test_classification_overfit_32(corpus):
    c, vocab = corpus
    data = examples(c.olid_train[:32], vocab)
    model = init_model(small_config(vocab), RngStream(1), head="classification")
    opt = Adam(model.parameters(), 2e-5 * 100)
    for epoch in range(1, 201):
        run_epoch(model, data, "classification", opt, "train", RngStream(2), epoch=epoch,
                  batch_size=8)
        if dev_accuracy(model, data) == 100.0:
            break
    assert dev_accuracy(model, data) == 100.0
    assert epoch <= 200


def test_regression_overfit_8(corpus):
    c, vocab = corpus
    data = examples(c.solid[:8], vocab, target=lambda t: t.avg_conf)
    model = init_model(small_config(vocab), RngStream(1), head="regression")
    opt = Adam(model.parameters(), 3e-3)
    for epoch in range(1, 301):
        run_epoch(model, data, "regression", opt, "train", RngStream(2), epoch=epoch, batch_size=8)
    scores = sentence_outputs(model, data)
    assert np.max(np.abs(scores - [ex.target for ex in data])) < 0.05


@pytest.mark.parametrize("trace, lower, expected", [
    ([80.0, 70.0], False, 1),
    ([70.0, 80.0, 80.0], False, 2),
    ([30.0, 20.0, 20.0, 25.0], True, 2),
])
def test_best_epoch(trace, lower, expected):
    assert best_epoch(trace, lower) == expected


def test_stage_spec_contract():
    with pytest.raises(ValueError):
        StageSpec("PT-C-C", "A")
    assert StageSpec("PT", "B").objective == "mlm"
    assert StageSpec("PT-R", "A", "abc").selection == "dev_accuracy"


def test_pt_perplexity_below_uniform(tmp_path, corpus):
    c, vocab = corpus
    rows = examples(c.solid[:220], vocab, target=lambda t: None)
    store = CheckpointStore(tmp_path)
    spec = StageSpec("PT", "A", epochs=3, lr=2e-5, lr_scale=100, seed=1)
    res = run_stage(spec, rows[:200], rows[200:], store, small_config(vocab))
    assert res.best_metric < len(vocab)
    assert res.trace[res.best_epoch - 1] == min(res.trace)


def test_chain_parent_hashes(tmp_path, corpus):
    c, vocab = corpus
    store = CheckpointStore(tmp_path)
    mlm = examples(c.solid[:120], vocab, target=lambda t: None)
    clf = examples(c.olid_train[:120], vocab)
    spec = StageSpec("PT", "B", epochs=1, lr_scale=100)
    pt = run_stage(spec, mlm[:100], mlm[100:], store, small_config(vocab, "B"))
    ptc = run_stage(StageSpec("PT-C", "B", pt.checkpoint, epochs=1, lr_scale=100),
                    clf[:100], clf[100:], store)
    ptcc = run_stage(StageSpec("PT-C-C", "B", ptc.checkpoint, epochs=1, lr_scale=100),
                     clf[:100], clf[100:], store)
    assert ptc.parent == pt.checkpoint and ptcc.parent == ptc.checkpoint
    assert store.get(ptcc.checkpoint).head == "classification"
    with pytest.raises(StageError):
        store.get("0" * 64)


def test_store_detects_corruption(tmp_path, corpus):
    _, vocab = corpus
    store = CheckpointStore(tmp_path)
    digest = store.put(init_model(small_config(vocab), RngStream(0), head="classification"))
    weights = store.path(digest) / "weights.bin"
    raw = bytearray(weights.read_bytes())
    raw[0] ^= 0xFF
    weights.write_bytes(bytes(raw))
    with pytest.raises(StageError, match="corrupt"):
        store.get(digest)


def test_swap_head_preserves_encoder_across_stage(tmp_path, corpus):
    c, vocab = corpus
    store = CheckpointStore(tmp_path)
    parent = init_model(small_config(vocab), RngStream(0), head="mlm")
    digest = store.put(parent)
    child = swap_head(store.get(digest), "regression", RngStream(1))
    for name, p in parent.encoder_parameters().items():
        assert child[name].data.tobytes() == p.data.tobytes()


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.just(2)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)),
       st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_argmax_invariances(logits, scale, shift):
    base = predict_class(logits)
    assert np.array_equal(predict_class(logits * scale), base)
    shifted = logits + shift
    # only compare where float rounding cannot flip an exact comparison
    stable = np.abs(logits[:, 1] - logits[:, 0]) > 1e-6 * (1 + abs(shift))
    assert np.array_equal(predict_class(shifted)[stable], base[stable])
