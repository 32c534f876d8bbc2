"""Command-line front end: datagen, pretrain, train, eval, export-attn.

Configuration is a JSON file with one section per component; command-line flags
win over the file. The resolved configuration is written next to every output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .core import Dafnet, DafnetConfig, write_attention_csv
from .datagen import (DatagenConfig, PROPERTIES, build_kg, emit_dataset, generate_records, load_dataset,
                      pretrain_corpus, subject_scores, to_edit_record, write_stats)
from .editor import DafnetEditor, FtEditor, NullEditor
from .evaluator import evaluate_sequence, write_reports
from .lm import EditableLM, LmConfig, PretrainConfig, pretrain
from .trainer import TrainConfig, train

log = logging.getLogger("dafnet")


@dataclass
class LmShape:
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 24
    edit_layer_count: int = 3
    init_std: float = 0.08


@dataclass
class EvalConfig:
    editor: str = "dafnet"
    edits: int = 50
    checkpoints: list[int] = field(default_factory=lambda: [1, 10, 50])
    split: str = "eval"
    ft_steps: int = 5
    ft_lr: float = 1.0
    final_only: bool = False

    def __post_init__(self):
        if self.editor not in ("dafnet", "ft", "null"):
            raise ValueError(f"unknown editor {self.editor!r}")


@dataclass
class RunConfig:
    seed: int | None = None
    lm: LmShape = field(default_factory=LmShape)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    dafnet: DafnetConfig = field(default_factory=DafnetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train_splits: list[str] = field(default_factory=lambda: ["recent", "popular", "long_tail", "robust"])

    def seeded(self) -> "RunConfig":
        """Push the run seed into every component."""
        if self.seed is None:
            raise ValueError("a seed is required (config 'seed' or --seed)")
        for part in (self.pretrain, self.datagen, self.dafnet, self.train):
            part.seed = self.seed
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"lm": LmShape, "pretrain": PretrainConfig, "datagen": DatagenConfig,
             "dafnet": DafnetConfig, "train": TrainConfig, "eval": EvalConfig}


def load_config(path: str | Path | None) -> RunConfig:
    raw = json.loads(Path(path).read_text()) if path else {}
    unknown = set(raw) - set(_SECTIONS) - {"seed", "train_splits"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        sec = raw.get(name, {})
        allowed = {f.name for f in fields(cls)}
        bad = set(sec) - allowed
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
        kw[name] = cls(**sec)
    cfg = RunConfig(seed=raw.get("seed"), **kw)
    if "train_splits" in raw:
        cfg.train_splits = list(raw["train_splits"])
    bad = set(cfg.train_splits) - set(PROPERTIES) | ({"eval"} & set(cfg.train_splits))
    if bad:
        raise ValueError(f"invalid training splits: {sorted(bad)}")
    return cfg


# -- output bookkeeping -------------------------------------------------------------------

class Outputs:
    """Files are written under a temporary name and moved into place on success."""

    def __init__(self, out: Path):
        self.out = out
        self.pending: list[tuple[Path, Path]] = []

    def path(self, name: str) -> Path:
        final = self.out / name
        tmp = final.with_name(final.name + ".partial")
        self.pending.append((tmp, final))
        return tmp

    def commit(self) -> None:
        for tmp, final in self.pending:
            if tmp.is_dir():
                if final.exists():
                    shutil.rmtree(final)
                os.replace(tmp, final)
            elif tmp.exists():
                os.replace(tmp, final)

    def discard(self) -> None:
        for tmp, _ in self.pending:
            if tmp.is_dir():
                shutil.rmtree(tmp, ignore_errors=True)
            elif tmp.exists():
                tmp.unlink()


@contextmanager
def outputs(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    o = Outputs(out)
    try:
        yield o
    except BaseException:
        o.discard()
        raise
    o.commit()


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path} (run the upstream command first)")
    return path


def _write_config(o: Outputs, cfg: RunConfig, command: str) -> None:
    o.path(f"config.{command}.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    kg = build_kg(cfg.datagen)
    vocab = kg.vocab()
    corpus, weights = pretrain_corpus(kg, vocab)
    lm = EditableLM(LmConfig(vocab_size=len(vocab), **asdict(cfg.lm)), vocab, seed=cfg.seed)
    with outputs(out) as o:
        pretrain(lm, corpus, cfg.pretrain, weights=weights, log=log.info)
        lm.save(o.path("lm.ckpt"), extra={"run_config": cfg.to_dict()})
        _write_config(o, cfg, "pretrain")


def cmd_datagen(cfg: RunConfig, out: Path, lm_path: Path | None = None) -> None:
    lm = EditableLM.load(_need(lm_path or out / "lm.ckpt", "LM checkpoint"))
    kg = build_kg(cfg.datagen)
    if kg.vocab().tokens != lm.vocab.tokens:
        raise ValueError("LM vocabulary does not match the knowledge graph of this config")
    records = generate_records(kg, lm, cfg.datagen)
    for r in records:
        r.meta["lm_fingerprint"] = lm.fingerprint()
    with outputs(out) as o:
        emit_dataset(records, o.path("dataset.jsonl"), shuffle_seed=cfg.seed)
        write_stats(kg, subject_scores(kg, lm), o.path("stats.csv"))
        _write_config(o, cfg, "datagen")
    log.info("wrote %d records", len(records))


def cmd_train(cfg: RunConfig, out: Path, resume: bool = False) -> None:
    lm = EditableLM.load(_need(out / "lm.ckpt", "LM checkpoint"))
    data = load_dataset(_need(out / "dataset.jsonl", "dataset"))
    recs = [to_edit_record(r, lm.vocab) for r in data if r.property in cfg.train_splits]
    recs.sort(key=lambda r: r.id)
    net = Dafnet(lm.editable_matrices(), cfg.dafnet)
    with outputs(out) as o:
        res = train(lm, net, recs, cfg.train, out_dir=out / "train", resume=resume, log=log.info)
        if res.selected is None:
            raise RuntimeError("training produced no checkpoint")
        best, extra, arrays = Dafnet.load(res.selected.path, with_extra=True)
        extra["run_config"] = cfg.to_dict()
        extra["selected_iteration"] = res.selected.iteration
        best.save(o.path("dafnet.ckpt"), extra=extra)
        _write_config(o, cfg, "train")
    log.info("selected checkpoint at iteration %d (window loss %.4f)", res.selected.iteration,
             res.selected.window_loss)


def build_editor(cfg: RunConfig, out: Path):
    e = cfg.eval
    if e.editor == "dafnet":
        return DafnetEditor(Dafnet.load(_need(out / "dafnet.ckpt", "network checkpoint")))
    if e.editor == "ft":
        return FtEditor(e.ft_steps, e.ft_lr)
    return NullEditor()


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    e = cfg.eval
    lm = EditableLM.load(_need(out / "lm.ckpt", "LM checkpoint"))
    data = load_dataset(_need(out / "dataset.jsonl", "dataset"))
    recs = sorted((r for r in data if r.property == e.split), key=lambda r: r.id)
    if len(recs) < e.edits:
        raise ValueError(f"split {e.split!r} has {len(recs)} records, {e.edits} edits requested")
    recs = [to_edit_record(r, lm.vocab) for r in recs[: e.edits]]
    checkpoints = sorted(c for c in set(e.checkpoints) | {e.edits} if c <= e.edits)
    editor = build_editor(cfg, out)
    reports, journal = evaluate_sequence(lm, editor, recs, checkpoints, final_only=e.final_only)
    with outputs(out) as o:
        write_reports(reports, o.path("metrics.csv"), o.path("metrics.json"),
                      meta={"run_config": cfg.to_dict(), "lm_fingerprint": lm.fingerprint()})
        with open(o.path("journal.jsonl"), "w") as fh:
            for entry in journal:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if e.editor == "dafnet":
            write_attention_csv(o.path("attn.csv"), journal)
        _write_config(o, cfg, "eval")
    for r in reports:
        log.info("%s t=%d rel=%.3f gen=%.3f loc=%.3f avg=%.3f", r.editor, r.checkpoint, r.rel, r.gen,
                 r.loc, r.avg)


def cmd_export_attn(cfg: RunConfig, out: Path) -> None:
    src = _need(out / "journal.jsonl", "edit journal")
    journal = [json.loads(ln) for ln in src.read_text().splitlines() if ln.strip()]
    if not journal or "beta" not in journal[0]:
        raise ValueError("journal has no attention scores (was it produced by the dafnet editor?)")
    with outputs(out) as o:
        write_attention_csv(o.path("attn.csv"), journal)


# -- argument parsing ---------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dafnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("datagen", "pretrain", "train", "eval", "export-attn"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON run configuration")
        s.add_argument("--seed", type=int, help="run seed (overrides the config)")
        s.add_argument("--out", type=Path, required=True, help="artifact directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "datagen":
            s.add_argument("--lm", type=Path, help="LM checkpoint (default <out>/lm.ckpt)")
        if name == "train":
            s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
            s.add_argument("--iterations", type=int, help="override train.i_max")
        if name == "eval":
            s.add_argument("--editor", choices=["dafnet", "ft", "null"])
            s.add_argument("--edits", type=int)
            s.add_argument("--checkpoints", type=_int_list)
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ValueError("seed must be non-negative")
        cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        cfg.train.i_max = args.iterations
    for key in ("editor", "edits", "checkpoints"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg.eval, key, val)
    cfg.eval.__post_init__()
    return cfg.seeded()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        if args.command == "pretrain":
            cmd_pretrain(cfg, args.out)
        elif args.command == "datagen":
            cmd_datagen(cfg, args.out, args.lm)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.out)
        else:
            cmd_export_attn(cfg, args.out)
    except Exception as exc:  # surfaced as a structured one-line error
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
