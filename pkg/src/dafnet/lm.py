"""Toy decoder-only language model with editable FFN down-projections."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS = "<pad>", "<bos>"
CKPT_FORMAT_VERSION = 1


class TokenizationError(ValueError):
    pass


class Vocab:
    """Whitespace tokenizer over a closed word list."""

    def __init__(self, words: Sequence[str]):
        tokens = [PAD, BOS] + [w for w in words if w not in (PAD, BOS)]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {w: i for i, w in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as e:
            raise TokenizationError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class TokenSeq:
    """A prompt/target pair; ``prompt`` starts with BOS."""
    prompt: tuple[int, ...]
    target: tuple[int, ...]
    text: str = ""

    def __post_init__(self):
        if not self.target:
            raise ValueError("TokenSeq needs a nonempty target")
        if not self.prompt:
            raise ValueError("TokenSeq needs a nonempty prompt")

    @property
    def inputs(self) -> tuple[int, ...]:
        return self.prompt + self.target[:-1]

    @property
    def target_positions(self) -> range:
        start = len(self.prompt) - 1
        return range(start, start + len(self.target))


def make_seq(vocab: Vocab, prompt: str, target: str) -> TokenSeq:
    return TokenSeq((vocab.bos_id, *vocab.encode(prompt)), tuple(vocab.encode(target)),
                    f"{prompt} {target}")


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 48
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 24
    edit_layer_count: int = 3
    init_std: float = 0.08

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.edit_layer_count <= self.n_layers:
            raise ValueError("edit_layer_count must be in [1, n_layers]")


@dataclass(frozen=True)
class EditableMatrix:
    name: str
    layer: int  # 1-based
    d_in: int
    d_out: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d_in, self.d_out)


@dataclass
class Batch:
    ids: np.ndarray            # [B, L] inputs, right-padded
    lengths: np.ndarray        # [B]
    rows: np.ndarray           # flat index into batch for each target token
    cols: np.ndarray           # position of each target token
    targets: np.ndarray        # token id at each (row, col)
    owner: np.ndarray          # which sequence each target token belongs to


def make_batch(seqs: Sequence[TokenSeq], pad_id: int = 0) -> Batch:
    inputs = [s.inputs for s in seqs]
    L = max(len(x) for x in inputs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    rows, cols, tgts = [], [], []
    for b, (s, x) in enumerate(zip(seqs, inputs)):
        ids[b, : len(x)] = x
        for j, pos in enumerate(s.target_positions):
            rows.append(b)
            cols.append(pos)
            tgts.append(s.target[j])
    rows = np.array(rows, dtype=np.int64)
    return Batch(ids, np.array([len(x) for x in inputs]), rows, np.array(cols, dtype=np.int64),
                 np.array(tgts, dtype=np.int64), rows.copy())


class EditableLM:
    def __init__(self, config: LmConfig, vocab: Vocab | None = None, seed: int = 0,
                 zero: bool = False):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        c = config
        std = 0.0 if zero else c.init_std

        def w(*shape):
            return Tensor(rng.standard_normal(shape) * std)

        def ones(n):
            return Tensor(np.zeros(n) if zero else np.ones(n))

        p: dict[str, Tensor] = {
            "tok_emb": w(c.vocab_size, c.d_model),
            "pos_emb": w(c.max_seq_len, c.d_model),
        }
        for layer in range(1, c.n_layers + 1):
            pre = f"layer{layer}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = ones(c.d_model), Tensor(np.zeros(c.d_model))
            for k in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + k] = w(c.d_model, c.d_model)
                p[pre + "attn.b" + k[1]] = Tensor(np.zeros(c.d_model))
            p[pre + "ln2.g"], p[pre + "ln2.b"] = ones(c.d_model), Tensor(np.zeros(c.d_model))
            p[pre + "ffn.w_in"] = w(c.d_model, c.d_ff)
            p[pre + "ffn.b_in"] = Tensor(np.zeros(c.d_ff))
            p[pre + "ffn.w_out"] = w(c.d_ff, c.d_model)
            p[pre + "ffn.b_out"] = Tensor(np.zeros(c.d_model))
        p["ln_f.g"], p["ln_f.b"] = ones(c.d_model), Tensor(np.zeros(c.d_model))
        p["unembed"] = w(c.d_model, c.vocab_size)
        self.params = p
        self.overlays: dict[str, np.ndarray | Tensor] = {}

    # -- editable surface ---------------------------------------------------------
    def editable_matrices(self) -> list[EditableMatrix]:
        c = self.config
        first = c.n_layers - c.edit_layer_count + 1
        return [EditableMatrix(f"layer{i}.ffn.w_out", i, c.d_ff, c.d_model)
                for i in range(first, c.n_layers + 1)]

    def set_overlay(self, name: str, delta) -> None:
        base = self.params[name].data
        shape = delta.shape
        if tuple(shape) != base.shape:
            raise ad.ShapeError("set_overlay", tuple(shape), base.shape)
        self.overlays[name] = delta

    def clear_overlays(self) -> None:
        self.overlays = {}

    def effective_weight(self, name: str) -> np.ndarray:
        base = self.params[name].data
        ov = self.overlays.get(name)
        if ov is None:
            return base
        return base + (ov.data if isinstance(ov, Tensor) else ov)

    def requires_grad_(self, flag: bool) -> "EditableLM":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    # -- forward ----------------------------------------------------------------
    def forward(self, ids: np.ndarray, hooks: dict | None = None,
                weight_leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Logits ``[B, L, V]`` for right-padded token ids ``[B, L]``.

        ``hooks``, when given, is filled with ``name -> (u, z)`` per editable
        matrix where ``u`` is the matrix input and ``z`` its pre-bias output
        (grad retained). ``weight_leaves`` substitutes whole effective weights.
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        c = self.config
        if L > c.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {c.max_seq_len}")
        if ids.size and (ids.max() >= c.vocab_size or ids.min() < 0):
            raise ValueError("token id out of range")
        p = self.params
        editable = {m.name for m in self.editable_matrices()}
        H = c.n_heads
        dh = c.d_model // H
        causal = np.tril(np.ones((L, L), dtype=bool))

        x = ad.index(p["tok_emb"], ids) + p["pos_emb"][:L].reshape(1, L, c.d_model)
        for layer in range(1, c.n_layers + 1):
            pre = f"layer{layer}."
            hn = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

            def heads(t):
                return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

            q = heads(hn @ p[pre + "attn.wq"] + p[pre + "attn.bq"])
            k = heads(hn @ p[pre + "attn.wk"] + p[pre + "attn.bk"])
            v = heads(hn @ p[pre + "attn.wv"] + p[pre + "attn.bv"])
            att = ad.softmax((q @ k.T) * (1.0 / np.sqrt(dh)), axis=-1, mask=causal)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, c.d_model)
            x = x + (o @ p[pre + "attn.wo"] + p[pre + "attn.bo"])

            hn = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = ad.relu(hn @ p[pre + "ffn.w_in"] + p[pre + "ffn.b_in"])
            name = pre + "ffn.w_out"
            W = self._weight(name, editable, weight_leaves)
            z = u @ W
            if hooks is not None and name in editable:
                z.retain_grad()
                hooks[name] = (u.data, z)
            x = x + (z + p[pre + "ffn.b_out"])
        x = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return x @ p["unembed"]

    def _weight(self, name, editable, weight_leaves) -> Tensor:
        if weight_leaves and name in weight_leaves:
            return weight_leaves[name]
        base = self.params[name]
        ov = self.overlays.get(name) if name in editable else None
        if ov is None:
            return base
        return base + ov

    __call__ = forward

    # -- persistence --------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "lm", "config": asdict(self.config),
                "vocab": self.vocab.tokens if self.vocab else None, "extra": extra or {}}
        save_container(path, meta, self.state_arrays())

    @classmethod
    def load(cls, path: str | Path) -> "EditableLM":
        meta, arrays = load_container(path)
        if meta.get("kind") != "lm":
            raise ValueError(f"{path} is not an LM checkpoint")
        vocab = Vocab(meta["vocab"][2:]) if meta.get("vocab") else None
        model = cls(LmConfig(**meta["config"]), vocab, zero=True)
        for k, arr in arrays.items():
            model.params[k] = Tensor(arr)
        return model

    def clone(self) -> "EditableLM":
        other = EditableLM(self.config, self.vocab, zero=True)
        other.params = {k: Tensor(t.data.copy()) for k, t in self.params.items()}
        return other


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta = dict(meta, format_version=CKPT_FORMAT_VERSION)
    payload = {f"a/{k}": np.ascontiguousarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version") != CKPT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("a/")}
    return meta, arrays


# -- scoring ------------------------------------------------------------------------

def forward_logits(model: EditableLM, seq: TokenSeq) -> np.ndarray:
    with ad.no_grad():
        return model(np.array(seq.inputs)[None]).data[0]


def target_logprobs(model: EditableLM, seqs: Sequence[TokenSeq]) -> tuple[Tensor, Batch]:
    """Log-prob of every target token, flattened across the batch."""
    batch = make_batch(seqs)
    logp = ad.log_softmax(model(batch.ids), axis=-1)
    return logp[batch.rows, batch.cols, batch.targets], batch


def log_likelihood(model: EditableLM, seq: TokenSeq) -> float:
    with ad.no_grad():
        lp, _ = target_logprobs(model, [seq])
    return float(lp.data.sum())


def mean_target_logprob(model: EditableLM, seqs: Sequence[TokenSeq]) -> np.ndarray:
    """Per-sequence mean log-prob of the target tokens."""
    with ad.no_grad():
        lp, batch = target_logprobs(model, seqs)
    sums = np.bincount(batch.owner, weights=lp.data, minlength=len(seqs))
    counts = np.bincount(batch.owner, minlength=len(seqs))
    return sums / counts


def teacher_forced_argmax(model: EditableLM, seqs: Sequence[TokenSeq]) -> list[tuple[int, ...]]:
    """Argmax token at each target position, teacher-forced on the given targets."""
    if not seqs:
        return []
    batch = make_batch(seqs)
    with ad.no_grad():
        logits = model(batch.ids).data
    pred = np.argmax(logits[batch.rows, batch.cols], axis=-1)
    out: list[list[int]] = [[] for _ in seqs]
    for o, t in zip(batch.owner, pred):
        out[o].append(int(t))
    return [tuple(x) for x in out]


def greedy_decode(model: EditableLM, prompt: Sequence[int], max_new: int) -> list[int]:
    if not prompt:
        raise ValueError("prompt must be nonempty")
    ids = list(prompt)
    out: list[int] = []
    with ad.no_grad():
        for _ in range(max_new):
            logits = model(np.array(ids)[None]).data[0, -1]
            nxt = int(np.argmax(logits))  # first max -> lowest id on ties
            out.append(nxt)
            ids.append(nxt)
    return out


# -- pretraining ----------------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0
    log_every: int = 500


def pretrain(model: EditableLM, corpus: Sequence[Sequence[int]], cfg: PretrainConfig,
             weights: np.ndarray | None = None, log=None) -> list[float]:
    """Next-token training on BOS-prefixed sentences, sampled with ``weights``."""
    rng = np.random.default_rng(cfg.seed)
    model.requires_grad_(True)
    opt = ad.Adam(model.params, lr=cfg.lr)
    probs = None if weights is None else np.asarray(weights, float) / np.sum(weights)
    losses = []
    seqs = [TokenSeq((s[0],), tuple(s[1:])) for s in corpus]
    for step in range(1, cfg.steps + 1):
        pick = rng.choice(len(seqs), size=cfg.batch_size, p=probs)
        lp, _ = target_logprobs(model, [seqs[i] for i in pick])
        loss = -lp.mean()
        opt.zero_grad()
        loss.backward()
        # cosine decay keeps the end of training stable
        opt.state.lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * step / cfg.steps))
        opt.step()
        losses.append(loss.item())
        if log and (step % cfg.log_every == 0 or step == cfg.steps):
            log(f"pretrain step {step}: loss {np.mean(losses[-cfg.log_every:]):.4f}")
    model.requires_grad_(False)
    return losses
