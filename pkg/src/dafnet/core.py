"""The auxiliary fusion network: editing signals in, weight deltas out.

Shapes used throughout (all matrices of one model are processed together):

    M  editable matrices        T  facts in the sequence
    B  padded token count       d  common width d_in + d_out of the reference shape

Token-level work runs on ``[M, T, B, d]``; fact-level attention runs on
``[M, T, d]``. A ``history`` carries per-layer fact vectors of earlier edits so
that a single new fact can be processed incrementally with the same code.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lm import EditableMatrix, load_container, save_container
from .signals import EditSignal


@dataclass
class DafnetConfig:
    d_down: int = 64
    n_layers: int = 2          # K, for both the intra and the inter stack
    n_heads: int = 2
    d_attn: int = 64
    init_gain: float = 1.0
    branch_gain: float = 0.1   # init scale of projections that feed a residual sum
    delta_scale: float = 1.0   # synthesized delta is -s * u~^T d~ / B, a descent step at init
    seed: int = 0
    # minimum padded token width of a batched forward; a fixed width makes the
    # rounding of each fact independent of how long the other facts are
    token_pad: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_down < 1:
            raise ValueError("d_down must be positive")
        if self.d_attn % self.n_heads:
            raise ValueError("d_attn must be divisible by n_heads")


@dataclass
class History:
    """Cached fact vectors of past edits, one ``[M, t, d]`` array per layer."""
    intra: list[np.ndarray]
    inter: list[np.ndarray]

    @classmethod
    def empty(cls, n_matrices: int, n_layers: int, width: int) -> "History":
        z = np.zeros((n_matrices, 0, width))
        return cls([z.copy() for _ in range(n_layers)], [z.copy() for _ in range(n_layers)])

    @property
    def length(self) -> int:
        return self.intra[0].shape[1]

    def extend(self, other: "History") -> "History":
        return History([np.concatenate([a, b], axis=1) for a, b in zip(self.intra, other.intra)],
                       [np.concatenate([a, b], axis=1) for a, b in zip(self.inter, other.inter)])


@dataclass
class CoreOutput:
    deltas: dict[str, Tensor]       # name -> [T, d_in, d_out]
    beta_bar: Tensor                # [M, T]
    betas: list[Tensor]             # K x [M, T]
    alphas: list[Tensor]            # K x [M, T, B, 1]
    h_tilde: Tensor                 # [M, T, B, d] at layer K
    new_history: History            # fact vectors of the processed facts
    n_tokens: np.ndarray            # [T]
    names: list[str] = field(default_factory=list)


def _shape_key(shape: tuple[int, int]) -> str:
    return f"{shape[0]}x{shape[1]}"


class Dafnet:
    def __init__(self, matrices: Sequence[EditableMatrix], config: DafnetConfig | None = None):
        if not matrices:
            raise ValueError("no editable matrices")
        self.config = config or DafnetConfig()
        self.matrices = list(matrices)
        self.names = [m.name for m in self.matrices]
        ref = self.matrices[0]
        self.width = ref.d_in + ref.d_out
        rng = np.random.default_rng(self.config.seed)
        c, d = self.config, self.width
        g = c.init_gain

        def w(n_in, n_out, gain=g):
            return Tensor(rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        p: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for shape in dict.fromkeys(m.shape for m in self.matrices):
            native = shape[0] + shape[1]
            key = _shape_key(shape)
            # identity where widths agree, otherwise a truncated identity
            p[f"remap_in.{key}"] = Tensor(np.eye(native, d), requires_grad=True)
            p[f"remap_out.{key}"] = Tensor(np.eye(d, native), requires_grad=True)
            # fixed statistics set by calibrate(); identities until then
            self.buffers[f"scale.{key}"] = np.ones(native)
            self.buffers[f"key_precond.{key}"] = np.eye(shape[0])
        for k in range(1, c.n_layers + 1):
            pre = f"intra{k}."
            p[pre + "w1"], p[pre + "b1"] = w(d, c.d_down), zeros(c.d_down)
            p[pre + "w2"], p[pre + "b2"] = w(c.d_down, d, c.branch_gain), zeros(d)
            p[pre + "w3"], p[pre + "b3"] = w(d, c.d_down), zeros(c.d_down)
            p[pre + "w4"], p[pre + "b4"] = w(c.d_down, 1), zeros(1)
            p.update(self._attn_params(pre + "attn.", w, zeros, full=True))
        for k in range(1, c.n_layers + 1):
            # the last inter layer only contributes its attention matrix
            p.update(self._attn_params(f"inter{k}.attn.", w, zeros, full=k < c.n_layers))
        self.params = p

    def _attn_params(self, pre, w, zeros, full: bool) -> dict[str, Tensor]:
        d, a = self.width, self.config.d_attn
        out = {pre + "wq": w(d, a), pre + "bq": zeros(a), pre + "wk": w(d, a)}
        if full:
            out.update({pre + "wv": w(d, a), pre + "bv": zeros(a),
                        pre + "wo": w(a, d, self.config.branch_gain), pre + "bo": zeros(d)})
        return out

    def calibrate(self, signals: Sequence[dict[str, EditSignal]], ridge: float | None = 0.01,
                  floor: float = 1e-3) -> None:
        """Set the fixed feature statistics from a sample of editing signals.

        Inputs are divided by their per-feature RMS before the learnable input
        remap and multiplied back after the output remap. With ``ridge`` set,
        synthesized keys are also preconditioned by the ridge-regularised
        inverse second moment of the layer inputs, so an edit mostly touches
        its own key. Both maps are linear, so zero signals still give zero deltas.
        """
        for shape in dict.fromkeys(m.shape for m in self.matrices):
            names = [m.name for m in self.matrices if m.shape == shape]
            rows = np.concatenate([sig[n].h for sig in signals for n in names], axis=0)
            rms = np.sqrt(np.mean(rows ** 2, axis=0))
            rms = np.maximum(rms, floor * max(rms.max(), 1e-12))
            d_in = shape[0]
            key = _shape_key(shape)
            self.buffers[f"scale.{key}"] = rms
            prec = np.eye(d_in)
            if ridge is not None:
                u = rows[:, :d_in]
                cov = u.T @ u / len(u)
                prec = np.linalg.inv(cov + ridge * np.trace(cov) / d_in * np.eye(d_in))
                prec *= np.mean(np.linalg.norm(u, axis=1)) / np.mean(np.linalg.norm(u @ prec, axis=1))
            self.buffers[f"key_precond.{key}"] = prec

    # -- building blocks ------------------------------------------------------------
    def remap_in(self, h: Tensor, name: str) -> Tensor:
        key = _shape_key(self._matrix(name).shape)
        return (h * (1.0 / self.buffers[f"scale.{key}"])) @ self.params[f"remap_in.{key}"]

    def remap_out(self, h: Tensor, name: str) -> Tensor:
        key = _shape_key(self._matrix(name).shape)
        return (h @ self.params[f"remap_out.{key}"]) * self.buffers[f"scale.{key}"]

    def _matrix(self, name: str) -> EditableMatrix:
        for m in self.matrices:
            if m.name == name:
                return m
        raise KeyError(f"matrix {name!r} not registered with this network")

    def attention(self, pre: str, x: Tensor, n_new: int) -> tuple[Tensor | None, Tensor]:
        """Causal multi-head self-attention over facts.

        ``x`` is ``[M, t, d]`` (history followed by ``n_new`` new facts). Returns
        the residual block output for the new rows (None for score-only layers)
        and head-averaged attention probabilities ``[M, n_new, t]``.
        """
        p, c = self.params, self.config
        M, t, _ = x.shape
        H = c.n_heads
        dh = c.d_attn // H
        rows = slice(t - n_new, t)
        xq = x[:, rows]

        def heads(z, n):
            return z.reshape(M, n, H, dh).transpose(0, 2, 1, 3)

        q = heads(xq @ p[pre + "wq"] + p[pre + "bq"], n_new)
        k = heads(x @ p[pre + "wk"], t)
        mask = np.tril(np.ones((t, t), dtype=bool), k=0)[rows]
        probs = ad.softmax((q @ k.T) * (1.0 / np.sqrt(dh)), axis=-1, mask=mask)  # [M,H,n,t]
        avg = probs.mean(axis=1)
        if pre + "wv" not in p:
            return None, avg
        v = heads(x @ p[pre + "wv"] + p[pre + "bv"], t)
        o = (probs @ v).transpose(0, 2, 1, 3).reshape(M, n_new, c.d_attn)
        return xq + (o @ p[pre + "wo"] + p[pre + "bo"]), avg

    def intra_layer(self, k: int, h: Tensor, token_mask: np.ndarray,
                    hist: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """One intra-editing layer.

        ``h`` is ``[M, T, B, d]``, ``token_mask`` ``[T, B]``, ``hist`` the cached
        fused vectors ``[M, t0, d]`` of earlier facts. Returns
        ``(h_tilde, h_bar, alpha)``.
        """
        p = self.params
        pre = f"intra{k}."
        M, T, B, d = h.shape
        if not token_mask.any(axis=1).all():
            raise ValueError("every fact needs at least one token")
        h1 = ad.relu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        logits = ad.relu(h1 @ p[pre + "w3"] + p[pre + "b3"]) @ p[pre + "w4"] + p[pre + "b4"]
        alpha = ad.softmax(logits, axis=2, mask=token_mask[None, :, :, None])
        h_hat = alpha * h1
        h_bar = h_hat.sum(axis=2)                                   # [M, T, d]
        h_hat_res = h_hat + h
        seq = ad.concat([Tensor(hist), h_bar], axis=1) if hist.shape[1] else h_bar
        fused, _ = self.attention(pre + "attn.", seq, T)           # [M, T, d]
        h_tilde = h_hat_res + fused.reshape(M, T, 1, d)
        return h_tilde, h_bar, alpha

    def intra_flow(self, h0: Tensor, token_mask: np.ndarray, history: History):
        h, bars, alphas = h0, [], []
        for k in range(1, self.config.n_layers + 1):
            h, h_bar, alpha = self.intra_layer(k, h, token_mask, history.intra[k - 1])
            bars.append(h_bar)
            alphas.append(alpha)
        return h, bars, alphas

    def inter_fusion_weights(self, h_bar: Tensor, history: History):
        """Diagonal fusion weights from the stacked causal inter-editing attention.

        Returns ``(beta_bar [M, T], betas K x [M, T], layer inputs K x [M, T, d])``.
        """
        n_new = h_bar.shape[1]
        x_new = h_bar
        betas, inputs = [], []
        for k in range(1, self.config.n_layers + 1):
            hist = history.inter[k - 1]
            seq = ad.concat([Tensor(hist), x_new], axis=1) if hist.shape[1] else x_new
            inputs.append(x_new)
            out, avg = self.attention(f"inter{k}.attn.", seq, n_new)
            t0 = hist.shape[1]
            j = np.arange(n_new)
            betas.append(avg[:, j, t0 + j])
            x_new = out
        beta_bar = betas[0]
        for b in betas[1:]:
            beta_bar = beta_bar + b
        return beta_bar * (1.0 / len(betas)), betas, inputs

    def synthesize_delta(self, h_tilde: Tensor, name: str, token_mask: np.ndarray) -> Tensor:
        """``[T, B, d]`` fused token rows -> ``[T, d_in, d_out]`` deltas."""
        m = self._matrix(name)
        native = self.remap_out(h_tilde, name)
        if native.shape[-1] != m.d_in + m.d_out:
            raise ad.ShapeError("synthesize_delta", native.shape, m.shape)
        key = _shape_key(m.shape)
        u = native[..., :m.d_in] @ self.buffers[f"key_precond.{key}"]
        dl = native[..., m.d_in:] * (-self.config.delta_scale)
        return delta_from_rows(ad.concat([u, dl], axis=-1), m.d_in, token_mask)

    # -- full forward ------------------------------------------------------------------
    def forward(self, signals: Sequence[dict[str, EditSignal]],
                history: History | None = None) -> CoreOutput:
        """Process new facts (in edit order) given the cached history."""
        if not signals:
            raise ValueError("no facts")
        T = len(signals)
        n_tok = np.array([signals[t][self.names[0]].n_tokens for t in range(T)])
        if (n_tok == 0).any():
            raise ValueError("empty fact (B_t = 0)")
        B = max(int(n_tok.max()), self.config.token_pad)
        token_mask = np.arange(B)[None, :] < n_tok[:, None]
        history = history or History.empty(len(self.names), self.config.n_layers, self.width)

        per_matrix = []
        for name in self.names:
            m = self._matrix(name)
            raw = np.zeros((T, B, m.d_in + m.d_out))
            for t, sig in enumerate(signals):
                raw[t, : n_tok[t]] = sig[name].h
            per_matrix.append(self.remap_in(Tensor(raw), name))
        h0 = ad.stack(per_matrix, axis=0)

        h_tilde, bars, alphas = self.intra_flow(h0, token_mask, history)
        beta_bar, betas, inter_inputs = self.inter_fusion_weights(bars[-1], history)
        deltas = {name: self.synthesize_delta(h_tilde[i], name, token_mask)
                  for i, name in enumerate(self.names)}
        new_hist = History([b.data for b in bars], [x.data for x in inter_inputs])
        return CoreOutput(deltas, beta_bar, betas, alphas, h_tilde, new_hist, n_tok, list(self.names))

    __call__ = forward

    # -- persistence ---------------------------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None,
             extra_arrays: dict[str, np.ndarray] | None = None) -> None:
        meta = {"kind": "dafnet", "config": asdict(self.config),
                "matrices": [asdict(m) for m in self.matrices], "extra": extra or {}}
        arrays = {f"p/{k}": v.data for k, v in self.params.items()}
        arrays.update({f"b/{k}": v for k, v in self.buffers.items()})
        arrays.update({f"x/{k}": v for k, v in (extra_arrays or {}).items()})
        save_container(path, meta, arrays)

    @classmethod
    def load(cls, path: str | Path, with_extra: bool = False):
        meta, arrays = load_container(path)
        if meta.get("kind") != "dafnet":
            raise ValueError(f"{path} is not a network checkpoint")
        net = cls([EditableMatrix(**m) for m in meta["matrices"]], DafnetConfig(**meta["config"]))
        for k, v in arrays.items():
            if k.startswith("p/"):
                net.params[k[2:]] = Tensor(v, requires_grad=True)
            elif k.startswith("b/"):
                net.buffers[k[2:]] = v
        if with_extra:
            extra = {k[2:]: v for k, v in arrays.items() if k.startswith("x/")}
            return net, meta["extra"], extra
        return net


def delta_from_rows(native: Tensor, d_in: int, token_mask: np.ndarray) -> Tensor:
    """Split rows into ``[u~; delta~]`` and form ``u~^T delta~ / B_t`` per fact."""
    u = native[..., :d_in] * token_mask[..., None].astype(float)
    dl = native[..., d_in:]
    n_tok = token_mask.sum(axis=1).astype(float)
    return (u.T @ dl) * (1.0 / n_tok)[:, None, None]


def remap_signal(net: Dafnet, signal: EditSignal, name: str) -> Tensor:
    return net.remap_in(Tensor(signal.h), name)


# -- accumulation --------------------------------------------------------------------------

def accumulate_closed(deltas: Sequence[np.ndarray], beta_bar: Sequence[float]) -> np.ndarray:
    """Weighted sum where fact t keeps ``beta_t * prod_{tau>t} (1 - beta_tau)``."""
    if len(deltas) != len(beta_bar):
        raise ValueError("deltas and weights differ in length")
    beta = np.asarray(beta_bar, dtype=float)
    total = np.zeros_like(np.asarray(deltas[0], dtype=float))
    T = len(beta)
    for t in range(T):
        keep = 1.0
        for tau in range(t + 1, T):
            keep *= 1.0 - beta[tau]
        total = total + keep * beta[t] * np.asarray(deltas[t])
    return total


def accumulate_recursive(prev: np.ndarray, delta: np.ndarray, beta: float) -> np.ndarray:
    return (1.0 - beta) * prev + beta * delta


def fusion_weights(beta_bar: Tensor) -> Tensor:
    """Closed-form per-fact weights ``[M, T]`` as a differentiable expression."""
    M, T = beta_bar.shape
    keep = Tensor(np.ones(M))
    cols = [None] * T
    for t in range(T - 1, -1, -1):
        col = beta_bar[:, t]
        cols[t] = col * keep
        keep = keep * (1.0 - col)
    return ad.stack(cols, axis=1)


def accumulate_tensor(out: CoreOutput) -> dict[str, Tensor]:
    """Fused delta of the whole processed sequence, per matrix (graph kept)."""
    w = fusion_weights(out.beta_bar)
    fused = {}
    for i, name in enumerate(out.names):
        T = w.shape[1]
        fused[name] = (out.deltas[name] * w[i].reshape(T, 1, 1)).sum(axis=0)
    return fused


# -- attention export ------------------------------------------------------------------

def write_attention_csv(path: str | Path, journal: Sequence[dict]) -> None:
    """``edit_index, matrix, layer, value`` rows; layer ``mean`` holds beta_bar."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["edit_index", "matrix", "layer", "value"])
        for rec in journal:
            for name, layers in rec["beta"].items():
                for k, v in enumerate(layers, start=1):
                    wr.writerow([rec["index"], name, k, repr(float(v))])
                wr.writerow([rec["index"], name, "mean", repr(float(rec["beta_bar"][name]))])
