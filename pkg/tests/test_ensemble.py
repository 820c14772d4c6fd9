import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olid_ensemble import tensor as T
from olid_ensemble.data import LabeledExample
from olid_ensemble.encoder import EncoderConfig, init_model, swap_head
from olid_ensemble.ensemble import (CONFIGURATIONS, EnsembleConfigError, EnsembleModel,
                                    EnsembleSpec, build_ensemble, ensemble_accuracy,
                                    ensemble_forward, load_ensemble, predict, save_ensemble,
                                    train_ensemble)
from olid_ensemble.evaluation import confusion
from olid_ensemble.rng import RngStream
from olid_ensemble.tokenizer import build_vocab, encode
from olid_ensemble.training import CheckpointStore
from olid_ensemble.workflow import specialization_experiment

TEXTS = ["you are an idiot", "what a lovely day", "the coach is a clown", "my friend loves it",
         "such a moron", "great game today", "you fool", "nice shoes"]


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(TEXTS, 100)


@pytest.fixture(scope="module")
def data(vocab):
    return [LabeledExample(f"e{i}", encode(t, vocab, 16), int(i % 2 == 0))
            for i, t in enumerate(TEXTS * 4)]


def members(vocab, n=6, hidden=32):
    out = []
    for i in range(n):
        variant = "AB"[i % 2]
        cfg = EncoderConfig.for_variant(variant, hidden=hidden, layers=1, heads=2, ffn=32,
                                        vocab_size=len(vocab), max_positions=16, dropout=0.1)
        out.append(init_model(cfg, RngStream(i), head="classification"))
    return out


def test_concat_dim_and_forward_shape(vocab, data):
    model = build_ensemble(members(vocab))
    assert model.concat_dim == 192
    assert model.weight.shape == (2, 192)
    assert ensemble_forward(model, data[0].encoded).shape == (2,)


def test_zero_decoder_predicts_not(vocab, data):
    model = build_ensemble(members(vocab))
    model.weight.data[...] = 0
    logits = ensemble_forward(model, data[0].encoded).data
    assert logits.tolist() == [0.0, 0.0]
    assert predict(model, data[:1]) == [(data[0].id, "NOT")]


def test_eval_forward_repeatable(vocab, data):
    model = build_ensemble(members(vocab), dropout=0.5)
    a = ensemble_forward(model, data[3].encoded).data
    b = ensemble_forward(model, data[3].encoded).data
    assert a.tobytes() == b.tobytes()


def test_member_count_enforced(vocab):
    with pytest.raises(EnsembleConfigError):
        build_ensemble(members(vocab, 5))
    assert build_ensemble(members(vocab, 2), expected=None).concat_dim == 64


def test_configurations():
    assert CONFIGURATIONS == {"E": (2e-5, 0.1), "E_1": (1e-5, 0.1), "E_2": (1e-5, 0.5)}
    spec = EnsembleSpec.configuration("E_2")
    assert (spec.lr, spec.dropout) == (1e-5, 0.5)


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(4)))
def test_member_permutation_with_decoder_blocks(perm):
    vocab = build_vocab(TEXTS, 100)
    ms = members(vocab, 4, hidden=8)
    model = build_ensemble(ms, [f"m{i}" for i in range(4)], expected=4)
    blocks = np.split(model.weight.data, 4, axis=1)
    w = T.Tensor(np.concatenate([blocks[i] for i in perm], axis=1))
    permuted = EnsembleModel([ms[i] for i in perm], [f"m{i}" for i in perm], 0.1, w,
                             T.Tensor(model.bias.data.copy()))
    seq = encode("you are a clown", vocab, 16)
    np.testing.assert_allclose(ensemble_forward(permuted, seq).data,
                               ensemble_forward(model, seq).data, atol=1e-6)


def test_freeze_members_keeps_checksums(vocab, data):
    ms = members(vocab, 2)
    before = [m.checksum() for m in ms]
    spec = EnsembleSpec(lr=1e-3, epochs=2, freeze_members=True)
    model, _ = train_ensemble(spec, ms, data, data, ["a", "b"], expected_members=2)
    assert model.member_checksums() == before
    assert [m.checksum() for m in ms] == before


def test_joint_training_updates_copies_only(vocab, data):
    ms = members(vocab, 2)
    before = [m.checksum() for m in ms]
    model, _ = train_ensemble(EnsembleSpec(lr=1e-3, epochs=1), ms, data, data, ["a", "b"],
                              expected_members=2)
    assert model.member_checksums() != before
    assert [m.checksum() for m in ms] == before


def test_lr_zero_leaves_decoder(vocab, data):
    ms = members(vocab, 2)
    spec = EnsembleSpec(lr=0.0, epochs=1, seed=5)
    rng = RngStream(spec.seed).fork("ensemble", spec.name)
    copies = [swap_head(m, m.head, rng) for m in ms]
    fresh = build_ensemble(copies, ["a", "b"], spec.dropout, rng, expected=2)
    model, _ = train_ensemble(spec, ms, data, data, ["a", "b"], expected_members=2)
    assert model.weight.data.tobytes() == fresh.weight.data.tobytes()


def test_dropout_zero_dev_evaluation_is_deterministic(vocab, data):
    spec = EnsembleSpec(lr=1e-3, epochs=2, dropout=0.0)
    _, a = train_ensemble(spec, members(vocab, 2), data, data, ["a", "b"], expected_members=2)
    _, b = train_ensemble(spec, members(vocab, 2), data, data, ["a", "b"], expected_members=2)
    assert a.trace == b.trace and a.losses == b.losses


def test_empty_split_rejected(vocab, data):
    with pytest.raises(ValueError):
        train_ensemble(EnsembleSpec(), members(vocab, 2), [], data, expected_members=2)


def test_save_load_roundtrip(tmp_path, vocab, data):
    store = CheckpointStore(tmp_path / "store")
    model = build_ensemble(members(vocab), dropout=0.5)
    digest = save_ensemble(model, tmp_path / "E_2", store)
    lines = (tmp_path / "E_2" / "ensemble.tsv").read_text().splitlines()
    assert lines[0] == "members\t6" and "freeze_members\tfalse" in lines
    loaded = load_ensemble(tmp_path / "E_2", store)
    assert loaded.names == model.names and loaded.dropout == 0.5
    assert loaded.member_checksums() == model.member_checksums()
    from olid_ensemble.ensemble import ensemble_hash
    assert ensemble_hash(loaded) == digest
    for ex in data[:4]:
        assert ensemble_forward(loaded, ex.encoded).data.tobytes() == \
            ensemble_forward(model, ex.encoded).data.tobytes()


def test_predict_contract(vocab, data):
    model = build_ensemble(members(vocab))
    assert predict(model, []) == []
    forward = dict(predict(model, data))
    backward = dict(predict(model, list(reversed(data))))
    single = {ex.id: predict(model, [ex])[0][1] for ex in data}
    assert forward == backward == single
    labels = [forward[ex.id] for ex in data]
    cm = confusion(["OFF" if ex.target else "NOT" for ex in data], labels)
    assert cm.col_sums() == (labels.count("NOT"), labels.count("OFF"))
    assert cm.row_sums() == (sum(1 - ex.target for ex in data), sum(ex.target for ex in data))
    assert ensemble_accuracy(model, data) == 100.0 * sum(
        (lab == "OFF") == bool(ex.target) for lab, ex in zip(labels, data)) / len(data)


def test_specialists_combine():
    out = specialization_experiment(n=300, epochs=3)
    assert out.ensemble_accuracy >= max(out.member_accuracy)
