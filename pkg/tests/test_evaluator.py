import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dafnet.evaluator import (EditRecord, LocalityReference, MetricReport, evaluate_sequence, generality,
                              locality, reliability, report_from_dict, write_reports)
from dafnet.editor import FtEditor, NullEditor
from dafnet.lm import TokenSeq, make_seq

from conftest import make_records, tiny_lm
from oracles import recount


def logits_fn(model):
    return lambda ids: model(np.array([ids])).data[0]


def test_micro_fixture_matches_recount(vocab):
    pre = tiny_lm(vocab, seed=1)
    post = pre.clone()
    recs = make_records(vocab, 5, np.random.default_rng(4))
    ed = FtEditor(steps=3, lr=0.2)
    for r in recs[:2]:
        ed.edit(post, r)
    ref = LocalityReference(pre, recs)
    got = (reliability(post, recs), generality(post, recs), locality(ref, post, recs))
    assert got == recount(logits_fn(pre), logits_fn(post), recs)
    assert got == (0.4, 0.4, 0.2)  # a mixed case, not all-or-nothing


def test_targets_made_to_match_count_as_hits(vocab, lm):
    # build records whose targets are the model's own argmax paths
    seqs = []
    for p in ["bob lives in", "alice works at", "the capital of carol is"]:
        prompt = (vocab.bos_id, *vocab.encode(p))
        first = int(np.argmax(lm(np.array([prompt])).data[0, -1]))
        seqs.append(TokenSeq(prompt, (first,)))
    wrong = TokenSeq(seqs[0].prompt, ((seqs[0].target[0] + 1) % len(vocab),))
    recs = [EditRecord("a", seqs[0], [seqs[1], wrong], [seqs[2]]),
            EditRecord("b", wrong, [wrong], [seqs[2]])]
    assert reliability(lm, recs) == 0.5
    assert generality(lm, recs) == 0.25  # mean of per-edit means 0.5 and 0
    assert locality(LocalityReference(lm, recs), lm, recs) == 1.0


def test_locality_of_model_with_itself_is_one(vocab, lm):
    recs = make_records(vocab, 4)
    assert locality(LocalityReference(lm, recs), lm, recs) == 1.0


def test_missing_reference_and_empty(vocab, lm):
    recs = make_records(vocab, 3)
    ref = LocalityReference(lm, recs[:1])
    with pytest.raises(KeyError):
        locality(ref, lm, recs)
    for fn in (reliability, generality):
        with pytest.raises(ValueError):
            fn(lm, [])
    with pytest.raises(ValueError):
        locality(ref, lm, [])


def test_final_position_flag(vocab, lm):
    seq = make_seq(vocab, "bob lives in", "oslo lima")
    rec = EditRecord("a", seq, [seq], [seq])
    full = LocalityReference(lm, [rec])
    last = LocalityReference(lm, [rec], final_only=True)
    assert len(full.cache["a"][0]) == 2 and len(last.cache["a"][0]) == 1


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000))
def test_metrics_are_order_insensitive(seed):
    from conftest import WORDS
    from dafnet.lm import Vocab
    vocab = Vocab(WORDS)
    lm = tiny_lm(vocab, seed=seed % 3)
    recs = make_records(vocab, 5, np.random.default_rng(seed))
    perm = [recs[i] for i in np.random.default_rng(seed + 1).permutation(5)]
    ref = LocalityReference(lm, recs)
    assert reliability(lm, recs) == reliability(lm, perm)
    assert generality(lm, recs) == pytest.approx(generality(lm, perm), abs=1e-15)
    assert locality(ref, lm, recs) == pytest.approx(locality(ref, lm, perm), abs=1e-15)


def test_null_editor_sequence(vocab, lm):
    recs = make_records(vocab, 5)
    reports, journal = evaluate_sequence(lm, NullEditor(), recs, [1, 3, 5])
    assert [r.checkpoint for r in reports] == [1, 3, 5]
    assert all(r.loc == 1.0 for r in reports)
    assert reports[-1].rel == reliability(lm, recs)
    assert [j["index"] for j in journal] == [1, 2, 3, 4, 5]


def test_journal_replay_reproduces_checkpoint_metrics(vocab, lm):
    """Replaying the edits independently gives the same numbers at each checkpoint."""
    recs = make_records(vocab, 4, np.random.default_rng(9))
    reports, journal = evaluate_sequence(lm, FtEditor(steps=2, lr=0.5), recs, [2, 4])
    assert [j["sample_id"] for j in journal] == [r.id for r in recs]
    replay = lm.clone()
    ed = FtEditor(steps=2, lr=0.5)
    ed.reset(replay)
    for t, r in enumerate(recs, start=1):
        ed.edit(replay, r)
        if t in (2, 4):
            want = recount(logits_fn(lm), logits_fn(replay), recs[:t])
            rep = reports[[2, 4].index(t)]
            assert (rep.rel, rep.gen, rep.loc) == want
    assert not lm.overlays


def test_bad_checkpoints(vocab, lm):
    recs = make_records(vocab, 2)
    for bad in ([0], [3]):
        with pytest.raises(ValueError):
            evaluate_sequence(lm, NullEditor(), recs, bad)


def test_report_files(tmp_path):
    reps = [MetricReport("x", 10, 1.0, 0.5, 0.25)]
    write_reports(reps, tmp_path / "m.csv", tmp_path / "m.json", meta={"seed": 0})
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert rows == [{"editor": "x", "checkpoint": "10", "rel": "1.000000", "gen": "0.500000",
                     "loc": "0.250000", "avg": "0.583333"}]
    data = json.loads((tmp_path / "m.json").read_text())
    assert report_from_dict(data["reports"][0]) == reps[0]
    assert data["meta"] == {"seed": 0}
