"""Reliability, generality and locality over an edit stream."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lm import EditableLM, TokenSeq, teacher_forced_argmax


@dataclass
class EditRecord:
    id: str
    edit: TokenSeq
    generality: list[TokenSeq] = field(default_factory=list)
    locality: list[TokenSeq] = field(default_factory=list)
    property: str = "eval"


@dataclass
class MetricReport:
    editor: str
    checkpoint: int
    rel: float
    gen: float
    loc: float

    @property
    def avg(self) -> float:
        return (self.rel + self.gen + self.loc) / 3.0

    def row(self) -> dict:
        return {"editor": self.editor, "checkpoint": self.checkpoint, "rel": self.rel,
                "gen": self.gen, "loc": self.loc, "avg": self.avg}


def _exact(preds: Sequence[tuple[int, ...]], seqs: Sequence[TokenSeq]) -> list[bool]:
    return [p == s.target for p, s in zip(preds, seqs)]


def reliability(model: EditableLM, records: Sequence[EditRecord]) -> float:
    if not records:
        raise ValueError("reliability needs at least one edit")
    seqs = [r.edit for r in records]
    return float(np.mean(_exact(teacher_forced_argmax(model, seqs), seqs)))


def generality(model: EditableLM, records: Sequence[EditRecord]) -> float:
    """Mean over edits of the mean exact-match over that edit's neighbours."""
    if not records:
        raise ValueError("generality needs at least one edit")
    flat, owner = [], []
    for i, r in enumerate(records):
        if not r.generality:
            raise ValueError(f"record {r.id} has no generality neighbours")
        flat.extend(r.generality)
        owner.extend([i] * len(r.generality))
    hits = np.array(_exact(teacher_forced_argmax(model, flat), flat), dtype=float)
    owner = np.array(owner)
    per = np.bincount(owner, weights=hits, minlength=len(records)) / np.bincount(owner)
    return float(per.mean())


class LocalityReference:
    """Pre-edit argmax outputs on locality probes, keyed by record id."""

    def __init__(self, model: EditableLM, records: Sequence[EditRecord], final_only: bool = False):
        self.final_only = final_only
        flat = [p for r in records for p in r.locality]
        preds = teacher_forced_argmax(model, flat)
        self.cache: dict[str, list[tuple[int, ...]]] = {}
        i = 0
        for r in records:
            n = len(r.locality)
            self.cache[r.id] = [self._probe(x) for x in preds[i:i + n]]
            i += n

    def _probe(self, pred: tuple[int, ...]) -> tuple[int, ...]:
        return pred[-1:] if self.final_only else pred

    def __contains__(self, rid: str) -> bool:
        return rid in self.cache


def locality(reference: LocalityReference, model: EditableLM,
             records: Sequence[EditRecord]) -> float:
    """Share of probes whose argmax at every probed position matches the pre-edit model."""
    if not records:
        raise ValueError("locality needs at least one edit")
    flat, owner = [], []
    for i, r in enumerate(records):
        if r.id not in reference:
            raise KeyError(f"no pre-edit reference for record {r.id}")
        if not r.locality:
            raise ValueError(f"record {r.id} has no locality probes")
        flat.extend(r.locality)
        owner.extend([i] * len(r.locality))
    preds = [reference._probe(p) for p in teacher_forced_argmax(model, flat)]
    ref = [p for r in records for p in reference.cache[r.id]]
    hits = np.array([a == b for a, b in zip(preds, ref)], dtype=float)
    owner = np.array(owner)
    per = np.bincount(owner, weights=hits, minlength=len(records)) / np.bincount(owner)
    return float(per.mean())


def evaluate_sequence(model: EditableLM, editor, records: Sequence[EditRecord],
                      checkpoints: Sequence[int], name: str | None = None,
                      final_only: bool = False) -> tuple[list[MetricReport], list[dict]]:
    """Apply edits in order; score all past edits at each checkpoint.

    ``editor`` needs ``reset(model)`` and ``edit(model, record) -> dict``.
    Returns the reports and the per-edit journal.
    """
    checkpoints = sorted(set(checkpoints))
    if checkpoints and (checkpoints[0] < 1 or checkpoints[-1] > len(records)):
        raise ValueError("checkpoints must lie in 1..len(records)")
    name = name or getattr(editor, "name", type(editor).__name__)
    model.clear_overlays()
    reference = LocalityReference(model, records[: checkpoints[-1]], final_only=final_only)
    editor.reset(model)
    reports, journal = [], []
    for t, rec in enumerate(records[: checkpoints[-1]], start=1):
        entry = editor.edit(model, rec)
        journal.append({"index": t, "sample_id": rec.id, **entry})
        if t in checkpoints:
            past = records[:t]
            reports.append(MetricReport(name, t, reliability(model, past), generality(model, past),
                                        locality(reference, model, past)))
    model.clear_overlays()
    return reports, journal


def write_reports(reports: Sequence[MetricReport], csv_path: str | Path,
                  json_path: str | Path | None = None, meta: dict | None = None) -> None:
    rows = [r.row() for r in reports]
    with open(csv_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["editor", "checkpoint", "rel", "gen", "loc", "avg"])
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"meta": meta or {}, "reports": rows}, fh, indent=2, sort_keys=True)


def report_from_dict(d: dict) -> MetricReport:
    return MetricReport(d["editor"], int(d["checkpoint"]), float(d["rel"]), float(d["gen"]),
                        float(d["loc"]))


__all__ = ["EditRecord", "MetricReport", "reliability", "generality", "locality",
           "LocalityReference", "evaluate_sequence", "write_reports", "report_from_dict"]
