import csv
import json

import pytest

from dafnet.cli import load_config, main

TINY = {
    "lm": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "edit_layer_count": 2},
    "pretrain": {"steps": 30, "batch_size": 16, "log_every": 10},
    "datagen": {"n_entities": 50, "n_triples": 200, "n_recent": 8, "n_popular": 8, "n_long_tail": 8,
                "n_robust": 4, "n_eval": 6, "n_locality": 2},
    "dafnet": {"d_down": 8, "d_attn": 8},
    "train": {"t_max": 3, "i_inc": 3, "i_max": 12, "tail_iters": 3, "checkpoint_every": 4,
              "calibration_samples": 10},
    "eval": {"edits": 6, "checkpoints": [2, 6], "ft_steps": 2},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "out"
    for cmd in ("pretrain", "datagen", "train"):
        assert main([cmd, "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 0
    return cfg, out


def evaluate(cfg, out, *extra):
    assert main(["eval", "--config", str(cfg), "--seed", "1", "--out", str(out), *extra]) == 0
    return list(csv.DictReader(open(out / "metrics.csv")))


def test_pipeline_artifacts(run):
    cfg, out = run
    for name in ("lm.ckpt", "dataset.jsonl", "stats.csv", "dafnet.ckpt", "train/train_log.jsonl",
                 "config.pretrain.json", "config.datagen.json", "config.train.json"):
        assert (out / name).exists(), name
    assert not list(out.glob("*.partial"))
    resolved = json.loads((out / "config.train.json").read_text())
    assert resolved["seed"] == 1 and resolved["train"]["seed"] == 1


def test_eval_outputs_for_each_editor(run):
    cfg, out = run
    rows = evaluate(cfg, out, "--editor", "dafnet")
    assert [r["checkpoint"] for r in rows] == ["2", "6"]
    journal = [json.loads(x) for x in (out / "journal.jsonl").read_text().splitlines()]
    assert len(journal) == 6 and "beta_bar" in journal[0]
    attn = list(csv.DictReader(open(out / "attn.csv")))
    assert {r["layer"] for r in attn} == {"1", "2", "mean"}
    null = evaluate(cfg, out, "--editor", "null")
    assert all(r["loc"] == "1.000000" for r in null)
    ft = evaluate(cfg, out, "--editor", "ft", "--edits", "4", "--checkpoints", "1,4")
    assert [r["checkpoint"] for r in ft] == ["1", "4"]


def test_eval_is_byte_reproducible(run):
    cfg, out = run
    evaluate(cfg, out, "--editor", "dafnet")
    first = ((out / "metrics.csv").read_bytes(), (out / "journal.jsonl").read_bytes())
    evaluate(cfg, out, "--editor", "dafnet")
    assert first == ((out / "metrics.csv").read_bytes(), (out / "journal.jsonl").read_bytes())


def test_export_attention(run):
    cfg, out = run
    evaluate(cfg, out, "--editor", "dafnet")
    before = (out / "attn.csv").read_bytes()
    (out / "attn.csv").unlink()
    assert main(["export-attn", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 0
    assert (out / "attn.csv").read_bytes() == before


def test_resume_after_finish_is_a_noop(run):
    cfg, out = run
    before = (out / "train/train_log.jsonl").read_text()
    assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(out), "--resume"]) == 0
    assert (out / "train/train_log.jsonl").read_text() == before


def test_errors_are_structured(tmp_path, capsys):
    assert main(["eval", "--seed", "0", "--out", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError" and err["command"] == "eval"
    assert main(["train", "--out", str(tmp_path)]) == 1  # no seed anywhere
    assert "seed" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]
    assert main(["pretrain", "--seed", "-3", "--out", str(tmp_path)]) == 1


def test_config_validation(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"bogus": 1}}))
    with pytest.raises(ValueError, match="bogus"):
        load_config(p)
    p.write_text(json.dumps({"trainer": {}}))
    with pytest.raises(ValueError, match="sections"):
        load_config(p)
    p.write_text(json.dumps({"train_splits": ["eval"]}))
    with pytest.raises(ValueError):
        load_config(p)
    p.write_text(json.dumps({"eval": {"editor": "rome"}}))
    with pytest.raises(ValueError):
        load_config(p)
