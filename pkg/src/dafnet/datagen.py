"""Synthetic knowledge graph and editing datasets with property-tagged splits.

Entities get Zipf-distributed mention counts, so a low-frequency tail exists by
construction. The pretraining corpus renders every triple through relation
templates, repeated in proportion to how often its head is mentioned.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evaluator import EditRecord
from .lm import EditableLM, TokenSeq, Vocab, make_seq, mean_target_logprob

SCHEMA_VERSION = 1
PROPERTIES = ("recent", "popular", "long_tail", "robust", "eval")

# three phrasings per relation; the object always closes the sentence
TEMPLATES: dict[str, tuple[str, ...]] = {
    "capital": ("the capital of {h} is", "{h} has its capital in", "the seat of {h} is"),
    "language": ("the language of {h} is", "people in {h} speak", "{h} mostly speaks"),
    "currency": ("the currency of {h} is", "{h} pays with", "money used in {h} is"),
    "founder": ("{h} was founded by", "the founder of {h} is", "{h} was started by"),
    "location": ("{h} is located in", "{h} lies in", "you can find {h} in"),
    "birthplace": ("{h} was born in", "the birthplace of {h} is", "{h} comes from"),
    "member": ("{h} is a member of", "{h} belongs to", "{h} joined"),
    "employer": ("{h} works for", "the employer of {h} is", "{h} is employed by"),
    "partner": ("{h} is married to", "the partner of {h} is", "{h} lives with"),
    "neighbor": ("{h} borders", "the neighbor of {h} is", "{h} is next to"),
    "maker": ("{h} is made by", "the maker of {h} is", "{h} is produced by"),
    "leader": ("the leader of {h} is", "{h} is led by", "{h} is ruled by"),
    "citizen": ("{h} is a citizen of", "{h} holds a passport of", "{h} is a national of"),
    "genre": ("the genre of {h} is", "{h} is known for", "{h} plays"),
    "owner": ("{h} is owned by", "the owner of {h} is", "{h} is held by"),
    "teacher": ("{h} studied under", "the teacher of {h} is", "{h} was taught by"),
}
CONTEXT_SHORT = "so ,"
CONTEXT_LONG = "according to many old records it is known that"

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()
_CODAS = ["", "n", "r", "l", "s"]


class SelectionError(ValueError):
    pass


@dataclass
class DatagenConfig:
    n_entities: int = 120
    n_triples: int = 600
    zipf_s: float = 1.2
    top_mentions: int = 60          # corpus repetitions of a triple whose head is the top entity
    n_recent: int = 300
    n_popular: int = 300
    n_long_tail: int = 300
    n_robust: int = 130
    n_eval: int = 200
    freq_quantile: float = 0.8
    degree_threshold: int = 4
    likelihood_threshold: float = -1.5
    n_locality: int = 5
    popular_quantile: float = 0.8   # popular heads sit above this frequency quantile
    seed: int = 0

    def __post_init__(self):
        for k in ("n_recent", "n_popular", "n_long_tail", "n_robust", "n_eval", "n_locality"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        for k in ("freq_quantile", "popular_quantile"):
            if not 0 < getattr(self, k) < 1:
                raise ValueError(f"{k} must lie in (0, 1)")

    def counts(self) -> dict[str, int]:
        return {"recent": self.n_recent, "popular": self.n_popular, "long_tail": self.n_long_tail,
                "robust": self.n_robust, "eval": self.n_eval}


@dataclass
class SynthKG:
    entities: list[str]
    relations: list[str]
    triples: list[tuple[int, int, int]]            # (head, relation, tail) indices
    frequency: np.ndarray                          # corpus mentions per entity
    multiplicity: np.ndarray                       # corpus repetitions per triple

    def __post_init__(self):
        self._tail = {(h, r): t for h, r, t in self.triples}

    @property
    def in_degree(self) -> np.ndarray:
        return np.bincount([t for _, _, t in self.triples], minlength=len(self.entities))

    @property
    def out_degree(self) -> np.ndarray:
        return np.bincount([h for h, _, _ in self.triples], minlength=len(self.entities))

    @property
    def degree(self) -> np.ndarray:
        return self.in_degree + self.out_degree

    def tail_of(self, h: int, r: int) -> int | None:
        return self._tail.get((h, r))

    def neighbours(self, e: int) -> set[int]:
        out = set()
        for h, _, t in self.triples:
            if h == e:
                out.add(t)
            elif t == e:
                out.add(h)
        return out

    def within_hops(self, e: int, hops: int = 2) -> set[int]:
        seen, frontier = {e}, {e}
        for _ in range(hops):
            frontier = {n for f in frontier for n in self.neighbours(f)} - seen
            seen |= frontier
        return seen - {e}

    def vocab(self) -> Vocab:
        words = list(dict.fromkeys(
            w for name in self.entities for w in name.split()))
        for tpls in TEMPLATES.values():
            for t in tpls:
                words.extend(w for w in t.split() if w != "{h}")
        words.extend((CONTEXT_SHORT + " " + CONTEXT_LONG).split())
        return Vocab(list(dict.fromkeys(words)))

    def corpus(self) -> tuple[list[str], np.ndarray]:
        """Every triple under every template, with sampling weights."""
        sents, weights = [], []
        for (h, r, t), m in zip(self.triples, self.multiplicity):
            tpls = TEMPLATES[self.relations[r]]
            for tpl in tpls:
                sents.append(f"{render(tpl, self.entities[h])} {self.entities[t]}")
                weights.append(m / len(tpls))
        return sents, np.array(weights)


def render(template: str, head: str) -> str:
    return template.replace("{h}", head)


def _names(n: int, rng: np.random.Generator) -> list[str]:
    pool = [o + v + c for o in _ONSETS for v in _VOWELS for c in _CODAS]
    reserved = {w for tpls in TEMPLATES.values() for t in tpls for w in t.split()}
    reserved |= set((CONTEXT_SHORT + " " + CONTEXT_LONG).split())
    pool = [w for w in pool if w not in reserved]
    if n > len(pool):
        raise ValueError(f"at most {len(pool)} entities supported")
    return [str(w) for w in rng.choice(pool, size=n, replace=False)]


def build_kg(cfg: DatagenConfig) -> SynthKG:
    """Deterministic per seed. Heads and tails are drawn Zipf-weighted, so popular
    entities have many triples and are mentioned often."""
    rng = np.random.default_rng(cfg.seed)
    names = _names(cfg.n_entities, rng)
    relations = list(TEMPLATES)
    zipf = 1.0 / np.arange(1, cfg.n_entities + 1) ** cfg.zipf_s
    zipf /= zipf.sum()
    rank = rng.permutation(cfg.n_entities)       # entity rank[i] has popularity zipf[i]
    weight = np.empty(cfg.n_entities)
    weight[rank] = zipf
    triples, used = [], set()
    max_pairs = cfg.n_entities * len(relations)
    if cfg.n_triples > max_pairs // 2:
        raise ValueError("too many triples for the entity/relation grid")
    while len(triples) < cfg.n_triples:
        h = int(rng.choice(cfg.n_entities, p=weight))
        r = int(rng.integers(len(relations)))
        if (h, r) in used:
            continue
        t = int(rng.choice(cfg.n_entities, p=weight))
        if t == h:
            continue
        used.add((h, r))
        triples.append((h, r, t))
    mult = np.maximum(1, np.round(cfg.top_mentions * weight[[h for h, _, _ in triples]] / weight.max()))
    mult = mult.astype(np.int64)
    freq = np.zeros(cfg.n_entities, dtype=np.int64)
    for (h, _, t), m in zip(triples, mult):
        freq[h] += m
        freq[t] += m
    return SynthKG(names, relations, triples, freq, mult)


def frequency_cut(kg: SynthKG, quantile: float) -> float:
    return float(np.quantile(kg.frequency, quantile))


def subject_scores(kg: SynthKG, model: EditableLM) -> np.ndarray:
    """Mean per-token log-prob of each entity's own facts (first template); NaN without facts."""
    vocab = model.vocab
    seqs, owner = [], []
    for h, r, t in kg.triples:
        tpl = TEMPLATES[kg.relations[r]][0]
        seqs.append(make_seq(vocab, render(tpl, kg.entities[h]), kg.entities[t]))
        owner.append(h)
    scores = np.full(len(kg.entities), np.nan)
    if seqs:
        lp = mean_target_logprob(model, seqs)
        owner = np.array(owner)
        sums = np.bincount(owner, weights=lp, minlength=len(kg.entities))
        cnt = np.bincount(owner, minlength=len(kg.entities))
        has = cnt > 0
        scores[has] = sums[has] / cnt[has]
    return scores


def longtail_predicate(freq: float, degree: int, score: float, cfg: DatagenConfig,
                       freq_cut: float) -> bool:
    low_like = not math.isnan(score) and score < cfg.likelihood_threshold
    return freq <= freq_cut and (degree <= cfg.degree_threshold or low_like)


def select_longtail(kg: SynthKG, model: EditableLM, cfg: DatagenConfig) -> list[int]:
    cut = frequency_cut(kg, cfg.freq_quantile)
    scores = subject_scores(kg, model)
    deg = kg.degree
    chosen = [e for e in range(len(kg.entities))
              if longtail_predicate(kg.frequency[e], deg[e], scores[e], cfg, cut)]
    if not chosen:
        raise SelectionError("no long-tail entity passes the cuts; relax the frequency quantile, "
                             "degree threshold or likelihood threshold")
    return chosen


# -- records ----------------------------------------------------------------------------

@dataclass
class DatasetRecord:
    id: str
    property: str
    prompt: str
    target: str
    rephrases: list[str]
    locality_prompts: list[str]
    locality_targets: list[str]
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.property not in PROPERTIES:
            raise ValueError(f"unknown property {self.property!r}")
        if not self.prompt or not self.target:
            raise ValueError(f"record {self.id}: empty edit sample")
        if self.prompt in self.rephrases:
            raise ValueError(f"record {self.id}: rephrase repeats the edit prompt")
        if len(self.locality_prompts) != len(self.locality_targets):
            raise ValueError(f"record {self.id}: locality prompts and answers differ in count")

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


def _locality(kg: SynthKG, head: int, n: int, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    prompts, answers = [], []
    pool = [tr for tr in kg.triples if tr[0] != head]
    for j in rng.choice(len(pool), size=n, replace=False):
        h, r, t = pool[j]
        tpl = TEMPLATES[kg.relations[r]][int(rng.integers(len(TEMPLATES[kg.relations[r]])))]
        prompts.append(render(tpl, kg.entities[h]))
        answers.append(kg.entities[t])
    return prompts, answers


def render_records(kg: SynthKG, facts: Iterable[tuple[int, int, int]], prop: str,
                   cfg: DatagenConfig, rng: np.random.Generator, start: int = 0) -> list[DatasetRecord]:
    """One record per (head, relation, new tail) fact."""
    out = []
    for i, (h, r, t) in enumerate(facts):
        rel = kg.relations[r]
        if rel not in TEMPLATES:
            raise KeyError(f"relation {rel!r} has no template")
        tpls = TEMPLATES[rel]
        if len(tpls) < 2:
            raise ValueError(f"relation {rel!r} needs at least two templates")
        k = int(rng.integers(len(tpls)))
        head = kg.entities[h]
        prompt = render(tpls[k], head)
        rephrases = [render(tp, head) for j, tp in enumerate(tpls) if j != k]
        if prop == "robust":
            rephrases += [f"{CONTEXT_SHORT} {prompt}", f"{CONTEXT_LONG} {prompt}"]
        lp, la = _locality(kg, h, cfg.n_locality, rng)
        rec = DatasetRecord(f"{prop}-{start + i:05d}", prop, prompt, kg.entities[t], rephrases, lp, la,
                            {"subject": head, "relation": rel, "object": kg.entities[t]})
        rec.validate()
        out.append(rec)
    return out


def _new_tail(kg: SynthKG, h: int, r: int, rng: np.random.Generator, pool=None) -> int:
    old = kg.tail_of(h, r)
    cands = [e for e in (pool if pool is not None else range(len(kg.entities))) if e not in (h, old)]
    if not cands:
        cands = [e for e in range(len(kg.entities)) if e not in (h, old)]
    return int(cands[int(rng.integers(len(cands)))])


def _draw_pairs(heads: Sequence[int], n: int, kg: SynthKG, used: set, rng, prop: str,
                require_new: bool = False) -> list[tuple[int, int]]:
    cands = [(h, r) for h in heads for r in range(len(kg.relations))
             if (h, r) not in used and not (require_new and kg.tail_of(h, r) is not None)]
    if len(cands) < n:
        raise SelectionError(f"only {len(cands)} free (subject, relation) pairs for {prop!r}, "
                             f"need {n}; lower its count or grow the entity table")
    pick = rng.choice(len(cands), size=n, replace=False)
    pairs = [cands[j] for j in pick]
    used.update(pairs)
    return pairs


def generate_records(kg: SynthKG, model: EditableLM, cfg: DatagenConfig) -> list[DatasetRecord]:
    """All five splits; (subject, relation) pairs never repeat across records."""
    rng = np.random.default_rng(cfg.seed + 1)
    used: set = set()
    all_e = list(range(len(kg.entities)))
    pop_cut = np.quantile(kg.frequency, cfg.popular_quantile)
    popular = [e for e in all_e if kg.frequency[e] > pop_cut]
    tail = select_longtail(kg, model, cfg)
    records: list[DatasetRecord] = []

    pairs = _draw_pairs(popular, cfg.n_popular, kg, used, rng, "popular")
    facts = [(h, r, _new_tail(kg, h, r, rng, sorted(kg.within_hops(h, 2)))) for h, r in pairs]
    records += render_records(kg, facts, "popular", cfg, rng)

    pairs = _draw_pairs(tail, cfg.n_long_tail, kg, used, rng, "long_tail")
    records += render_records(kg, [(h, r, _new_tail(kg, h, r, rng)) for h, r in pairs], "long_tail", cfg, rng)

    pairs = _draw_pairs(all_e, cfg.n_recent, kg, used, rng, "recent", require_new=True)
    records += render_records(kg, [(h, r, _new_tail(kg, h, r, rng)) for h, r in pairs], "recent", cfg, rng)

    for prop in ("robust", "eval"):
        pairs = _draw_pairs(all_e, cfg.counts()[prop], kg, used, rng, prop)
        records += render_records(kg, [(h, r, _new_tail(kg, h, r, rng)) for h, r in pairs], prop, cfg, rng)
    return records


# -- io ---------------------------------------------------------------------------------

def emit_dataset(records: Sequence[DatasetRecord], path: str | Path, shuffle_seed: int | None = None) -> None:
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for r in records:
        r.validate()
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids")
    with open(path, "w") as fh:
        for i in order:
            fh.write(json.dumps(records[i].to_json(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            d = json.loads(line)
            if d.pop("schema_version", None) != SCHEMA_VERSION:
                raise ValueError(f"{path}:{n}: unsupported schema version")
            rec = DatasetRecord(**d)
            rec.validate()
            out.append(rec)
    return out


def to_edit_record(rec: DatasetRecord, vocab: Vocab) -> EditRecord:
    return EditRecord(
        rec.id,
        make_seq(vocab, rec.prompt, rec.target),
        [make_seq(vocab, p, rec.target) for p in rec.rephrases],
        [make_seq(vocab, p, a) for p, a in zip(rec.locality_prompts, rec.locality_targets)],
        rec.property,
    )


def split(records: Sequence[DatasetRecord], props: Iterable[str]) -> list[DatasetRecord]:
    want = set(props)
    return [r for r in records if r.property in want]


def write_stats(kg: SynthKG, scores: np.ndarray, path: str | Path, bins: int = 10) -> None:
    """Histograms of entity frequency, degree and subject log-likelihood."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["statistic", "bin_low", "bin_high", "count"])
        for name, vals in (("frequency", kg.frequency.astype(float)), ("degree", kg.degree.astype(float)),
                           ("log_likelihood", scores[~np.isnan(scores)])):
            counts, edges = np.histogram(vals, bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                wr.writerow([name, f"{lo:.6g}", f"{hi:.6g}", int(c)])


def pretrain_corpus(kg: SynthKG, vocab: Vocab) -> tuple[list[list[int]], np.ndarray]:
    sents, w = kg.corpus()
    return [[vocab.bos_id, *vocab.encode(s)] for s in sents], w


__all__ = ["PROPERTIES", "DatagenConfig", "SynthKG", "DatasetRecord", "TokenSeq", "build_kg", "select_longtail",
           "render_records", "generate_records", "emit_dataset", "load_dataset", "to_edit_record",
           "write_stats", "split", "pretrain_corpus", "longtail_predicate", "frequency_cut", "subject_scores"]
