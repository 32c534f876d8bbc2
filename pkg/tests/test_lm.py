import numpy as np
import pytest

from dafnet import autodiff as ad
from dafnet.lm import (EditableLM, PretrainConfig, TokenizationError, TokenSeq, Vocab, greedy_decode,
                       log_likelihood, make_batch, make_seq, pretrain, teacher_forced_argmax)

from conftest import tiny_lm


def test_vocab_roundtrip_and_unknown_word(vocab):
    ids = vocab.encode("alice lives in paris")
    assert vocab.decode(ids) == "alice lives in paris"
    assert vocab.pad_id == 0 and vocab.bos_id == 1
    with pytest.raises(TokenizationError):
        vocab.encode("alice lives in berlin")


def test_duplicate_vocab_rejected():
    with pytest.raises(ValueError):
        Vocab(["a", "b", "a"])


def test_token_seq_positions(vocab):
    s = make_seq(vocab, "bob lives in", "oslo lima")
    assert s.prompt[0] == vocab.bos_id
    assert len(s.inputs) == len(s.prompt) + 1
    assert list(s.target_positions) == [3, 4]
    with pytest.raises(ValueError):
        TokenSeq((1,), ())


def test_batch_padding_and_targets(vocab):
    a, b = make_seq(vocab, "bob lives in", "oslo"), make_seq(vocab, "the capital of alice is", "paris")
    batch = make_batch([a, b])
    assert batch.ids.shape == (2, 6)
    assert batch.ids[0, 4:].tolist() == [0, 0]
    assert batch.targets.tolist() == [vocab.index["oslo"], vocab.index["paris"]]
    assert batch.cols.tolist() == [3, 5]


def test_logits_are_causal(lm, vocab):
    ids = np.array([[1, 3, 4, 5, 6]])
    other = ids.copy()
    other[0, 4] = 9
    a, b = lm(ids).data, lm(other).data
    np.testing.assert_array_equal(a[0, :4], b[0, :4])
    assert not np.allclose(a[0, 4], b[0, 4])


def test_padding_does_not_change_real_positions(lm, vocab):
    s = make_seq(vocab, "bob lives in", "oslo")
    long = make_seq(vocab, "the capital of alice is", "paris")
    alone = lm(np.array([s.inputs])).data[0]
    batched = lm(make_batch([s, long]).ids).data[0, : len(s.inputs)]
    np.testing.assert_allclose(alone, batched, atol=1e-12)


def test_overlay_changes_output_and_clearing_restores(lm, vocab):
    ids = np.array([[1, 3, 4, 5]])
    base = lm(ids).data.copy()
    name = lm.editable_matrices()[-1].name
    # a constant overlay would be a uniform shift that the final layer norm removes
    delta = np.random.default_rng(0).normal(0, 0.05, lm.params[name].shape)
    lm.set_overlay(name, delta)
    assert not np.allclose(lm(ids).data, base)
    np.testing.assert_array_equal(lm.effective_weight(name), lm.params[name].data + delta)
    lm.clear_overlays()
    np.testing.assert_array_equal(lm(ids).data, base)


def test_overlay_shape_checked(lm):
    name = lm.editable_matrices()[0].name
    with pytest.raises(ad.ShapeError):
        lm.set_overlay(name, np.zeros((2, 2)))


def test_editable_matrices_are_last_ffn_outputs(vocab):
    m = tiny_lm(vocab, n_layers=3, edit_layer_count=2)
    got = [(e.name, e.layer, e.shape) for e in m.editable_matrices()]
    assert got == [("layer2.ffn.w_out", 2, (24, 16)), ("layer3.ffn.w_out", 3, (24, 16))]


def test_input_validation(lm):
    with pytest.raises(ValueError):
        lm(np.ones((1, 40), dtype=int))
    with pytest.raises(ValueError):
        lm(np.array([[1, 999]]))


def test_save_load_roundtrip(tmp_path, lm, vocab):
    p = tmp_path / "lm.ckpt"
    lm.save(p)
    back = EditableLM.load(p)
    assert back.fingerprint() == lm.fingerprint()
    assert back.vocab.tokens == vocab.tokens
    ids = np.array([[1, 3, 4]])
    np.testing.assert_array_equal(back(ids).data, lm(ids).data)


def test_clone_is_independent(lm):
    c = lm.clone()
    c.params["unembed"].data[0, 0] += 1.0
    assert c.fingerprint() != lm.fingerprint()


def test_greedy_decode_matches_argmax(lm, vocab):
    out = greedy_decode(lm, [1, 3, 4], 2)
    first = int(np.argmax(lm(np.array([[1, 3, 4]])).data[0, -1]))
    assert out[0] == first and len(out) == 2
    s = TokenSeq((1, 3, 4), tuple(out))
    assert teacher_forced_argmax(lm, [s]) == [tuple(out)]


def test_pretrain_memorizes_tiny_corpus(vocab):
    m = tiny_lm(vocab, init_std=0.1)
    corpus = [[1] + vocab.encode(t) for t in ("alice lives in paris", "bob lives in oslo")]
    losses = pretrain(m, corpus, PretrainConfig(steps=150, batch_size=4, lr=1e-2, log_every=1000))
    assert losses[-1] < 0.5 * losses[0]
    assert log_likelihood(m, make_seq(vocab, "bob lives in", "oslo")) > -0.5
