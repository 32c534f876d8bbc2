import numpy as np
import pytest

from dafnet.core import Dafnet, DafnetConfig, accumulate_closed
from dafnet.editor import (DafnetEditor, EditorState, FtEditor, NullEditor, StateMismatchError,
                           edit_once, edit_text, ft_baseline_edit)
from dafnet.lm import TokenizationError, log_likelihood, make_seq
from dafnet.signals import capture_signal

from conftest import make_records

NET = DafnetConfig(d_down=8, n_layers=2, n_heads=2, d_attn=8, seed=3)


def perturbed_net(lm, seed=0):
    net = Dafnet(lm.editable_matrices(), NET)
    rng = np.random.default_rng(seed)
    for p in net.params.values():
        p.data = p.data + rng.normal(0, 0.3, p.shape)
    return net


def test_overlay_equals_closed_form_accumulation(vocab, lm):
    net = perturbed_net(lm)
    state = EditorState.fresh(lm, net, keep_log=True)
    for r in make_records(vocab, 5):
        state, _ = edit_once(state, lm, net, r.edit)
    for n in net.names:
        ref = accumulate_closed([d[n] for d in state.delta_log], [b[n] for b in state.beta_log])
        np.testing.assert_allclose(state.accumulated[n], ref, atol=1e-12)
        np.testing.assert_array_equal(lm.overlays[n], state.accumulated[n])
    assert state.t == 5 and state.history.length == 5


def test_first_edit_applies_its_own_delta(vocab, lm):
    net = perturbed_net(lm)
    rec = make_records(vocab, 1)[0]
    sig = capture_signal(lm, rec.edit)
    out = net([sig])
    state, entry = edit_once(EditorState.fresh(lm, net), lm, net, rec.edit)
    for n in net.names:
        assert entry["beta_bar"][n] == pytest.approx(1.0)
        np.testing.assert_allclose(lm.overlays[n], out.deltas[n].data[0], atol=1e-13)


def test_edit_captures_against_current_model(vocab, lm):
    net = perturbed_net(lm)
    recs = make_records(vocab, 2)
    state, _ = edit_once(EditorState.fresh(lm, net), lm, net, recs[0].edit)
    sig_now = capture_signal(lm, recs[1].edit)
    st2, _ = edit_once(state, lm, net, recs[1].edit)
    # replaying with the signal taken on the edited model reproduces the step
    out = net([sig_now], state.history)
    for i, n in enumerate(net.names):
        b = out.beta_bar.data[i, 0]
        np.testing.assert_allclose(st2.accumulated[n],
                                   (1 - b) * state.accumulated[n] + b * out.deltas[n].data[0],
                                   atol=1e-13)


def test_tampered_overlay_detected(vocab, lm):
    net = perturbed_net(lm)
    recs = make_records(vocab, 2)
    state, _ = edit_once(EditorState.fresh(lm, net), lm, net, recs[0].edit)
    lm.clear_overlays()
    with pytest.raises(StateMismatchError):
        edit_once(state, lm, net, recs[1].edit)


def test_state_roundtrip(tmp_path, vocab, lm):
    net = perturbed_net(lm)
    state = EditorState.fresh(lm, net, keep_log=True)
    for r in make_records(vocab, 3):
        state, _ = edit_once(state, lm, net, r.edit)
    state.save(tmp_path / "s.ckpt")
    back = EditorState.load(tmp_path / "s.ckpt")
    assert back.t == 3 and back.beta_log == state.beta_log
    for n in net.names:
        np.testing.assert_array_equal(back.accumulated[n], state.accumulated[n])
    nxt = make_records(vocab, 4)[3].edit
    a, _ = edit_once(state, lm, net, nxt)
    lm.clear_overlays()
    lm.overlays.update({n: v.copy() for n, v in back.accumulated.items()})
    b, _ = edit_once(back, lm, net, nxt)
    for n in net.names:
        np.testing.assert_array_equal(a.accumulated[n], b.accumulated[n])


def test_unknown_words_rejected(vocab, lm):
    net = perturbed_net(lm)
    with pytest.raises(TokenizationError):
        edit_text(EditorState.fresh(lm, net), lm, net, "bob lives in", "berlin")


def test_dafnet_editor_reset_clears(vocab, lm):
    ed = DafnetEditor(perturbed_net(lm))
    for r in make_records(vocab, 2):
        ed.edit(lm, r)
    assert lm.overlays
    ed.reset(lm)
    assert not lm.overlays and ed.state.t == 0


def test_ft_baseline_raises_target_likelihood(vocab, lm):
    seq = make_seq(vocab, "bob lives in", "oslo lima")
    before = log_likelihood(lm, seq)
    ft_baseline_edit(lm, seq, steps=5, lr=0.5)
    assert log_likelihood(lm, seq) > before
    fp = lm.fingerprint()
    FtEditor(steps=2, lr=0.5).edit(lm, make_records(vocab, 1)[0])
    assert lm.fingerprint() == fp  # base weights untouched, only the overlays move


def test_null_editor(vocab, lm):
    ed = NullEditor()
    ed.reset(lm)
    assert ed.edit(lm, make_records(vocab, 1)[0]) == {} and not lm.overlays
