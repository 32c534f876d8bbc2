"""Sequential editing runtime and the comparison editors.

Edits are kept as additive overlays on top of the frozen base matrices, so
clearing the overlays restores the original model exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import Dafnet, History, accumulate_recursive
from .lm import EditableLM, TokenSeq, load_container, make_seq, save_container
from .signals import capture_signals

STATE_FORMAT_VERSION = 1


class StateMismatchError(RuntimeError):
    pass


@dataclass
class EditorState:
    accumulated: dict[str, np.ndarray]
    history: History
    t: int = 0
    # optional per-edit log of (beta_bar, delta) used to audit the recursion
    beta_log: list[dict[str, float]] = field(default_factory=list)
    delta_log: list[dict[str, np.ndarray]] = field(default_factory=list)
    keep_log: bool = False

    @classmethod
    def fresh(cls, model: EditableLM, net: Dafnet, keep_log: bool = False) -> "EditorState":
        acc = {m.name: np.zeros(m.shape) for m in model.editable_matrices()}
        if list(acc) != net.names:
            raise StateMismatchError("network and model disagree on editable matrices")
        return cls(acc, History.empty(len(acc), net.config.n_layers, net.width), keep_log=keep_log)

    def save(self, path: str | Path) -> None:
        arrays = {f"acc/{k}": v for k, v in self.accumulated.items()}
        for k, (a, b) in enumerate(zip(self.history.intra, self.history.inter)):
            arrays[f"intra/{k}"], arrays[f"inter/{k}"] = a, b
        for i, d in enumerate(self.delta_log):
            arrays.update({f"delta/{i}/{k}": v for k, v in d.items()})
        meta = {"kind": "editor_state", "format_version": STATE_FORMAT_VERSION, "t": self.t,
                "names": list(self.accumulated), "n_layers": len(self.history.intra),
                "beta_log": self.beta_log, "n_deltas": len(self.delta_log),
                "keep_log": self.keep_log}
        save_container(path, meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "EditorState":
        meta, arrays = load_container(path)
        if meta.get("kind") != "editor_state":
            raise ValueError(f"{path} is not an editor state")
        if meta.get("format_version") != STATE_FORMAT_VERSION:
            raise ValueError(f"unsupported editor state version {meta.get('format_version')}")
        names, K = meta["names"], meta["n_layers"]
        hist = History([arrays[f"intra/{k}"] for k in range(K)], [arrays[f"inter/{k}"] for k in range(K)])
        deltas = [{n: arrays[f"delta/{i}/{n}"] for n in names} for i in range(meta["n_deltas"])]
        return cls({n: arrays[f"acc/{n}"] for n in names}, hist, meta["t"], meta["beta_log"], deltas,
                   meta["keep_log"])


def apply_overlay(model: EditableLM, deltas: dict[str, np.ndarray]) -> None:
    """Set effective weights to base + delta for each named matrix."""
    for name, d in deltas.items():
        if name not in model.params:
            raise KeyError(f"unknown matrix {name!r}")
        model.set_overlay(name, np.asarray(d, dtype=float))


def _overlay(model: EditableLM, name: str) -> np.ndarray:
    ov = model.overlays.get(name)
    if ov is None:
        return np.zeros_like(model.params[name].data)
    return ov.data if isinstance(ov, ad.Tensor) else ov


def _check_consistent(state: EditorState, model: EditableLM) -> None:
    if state.history.length != state.t:
        raise StateMismatchError(f"history holds {state.history.length} facts, counter says {state.t}")
    for name, acc in state.accumulated.items():
        if not np.array_equal(_overlay(model, name), acc):
            raise StateMismatchError(f"model overlay for {name} does not match the editor state")


def edit_once(state: EditorState, model: EditableLM, net: Dafnet,
              sample: TokenSeq) -> tuple[EditorState, dict]:
    """Apply one edit: capture on f_{t-1}, run the network incrementally, fold the delta in.

    Returns the new state and a journal entry. ``model`` ends up carrying the
    new accumulated overlay.
    """
    _check_consistent(state, model)
    state, entry, _ = edit_step(state, model, net, sample)
    return state, entry


def edit_step(state: EditorState, model: EditableLM, net: Dafnet, sample: TokenSeq):
    """``edit_once`` without the consistency check; also returns the captured signal."""
    sig = capture_signals(model, [sample])[0]
    with ad.no_grad():
        out = net([sig], state.history)
    acc, beta_bar, delta_now = {}, {}, {}
    for i, name in enumerate(net.names):
        b = float(out.beta_bar.data[i, 0])
        d = out.deltas[name].data[0]
        acc[name] = accumulate_recursive(state.accumulated[name], d, b)
        beta_bar[name] = b
        delta_now[name] = d
    new = EditorState(acc, state.history.extend(out.new_history), state.t + 1,
                      state.beta_log + [beta_bar],
                      state.delta_log + ([delta_now] if state.keep_log else []), state.keep_log)
    apply_overlay(model, acc)
    entry = {
        "beta_bar": beta_bar,
        "beta": {n: [float(b.data[i, 0]) for b in out.betas] for i, n in enumerate(net.names)},
        "delta_norm": {n: float(np.linalg.norm(delta_now[n])) for n in net.names},
        "accumulated_norm": {n: float(np.linalg.norm(acc[n])) for n in net.names},
    }
    return new, entry, sig


def edit_text(state: EditorState, model: EditableLM, net: Dafnet, prompt: str, target: str):
    """``edit_once`` on raw text; unknown words raise ``TokenizationError``."""
    return edit_once(state, model, net, make_seq(model.vocab, prompt, target))


class DafnetEditor:
    name = "dafnet"

    def __init__(self, net: Dafnet, keep_log: bool = False):
        self.net = net
        self.keep_log = keep_log
        self.state: EditorState | None = None

    def reset(self, model: EditableLM) -> None:
        model.clear_overlays()
        self.state = EditorState.fresh(model, self.net, self.keep_log)

    def edit(self, model: EditableLM, record) -> dict:
        if self.state is None:
            self.reset(model)
        self.state, entry = edit_once(self.state, model, self.net, record.edit)
        return entry


def ft_baseline_edit(model: EditableLM, sample: TokenSeq, steps: int, lr: float) -> EditableLM:
    """Plain gradient descent on the editable overlays for one sample's mean target NLL."""
    names = [m.name for m in model.editable_matrices()]
    for _ in range(steps):
        _, grads = capture_signals(model, [sample], return_grads=True)
        scale = lr / len(sample.target)
        apply_overlay(model, {n: _overlay(model, n) - scale * grads[n] for n in names})
    return model


class FtEditor:
    name = "ft"

    def __init__(self, steps: int = 10, lr: float = 0.5):
        self.steps, self.lr = steps, lr

    def reset(self, model: EditableLM) -> None:
        model.clear_overlays()

    def edit(self, model: EditableLM, record) -> dict:
        before = {m.name: model.effective_weight(m.name) for m in model.editable_matrices()}
        ft_baseline_edit(model, record.edit, self.steps, self.lr)
        return {"delta_norm": {n: float(np.linalg.norm(model.effective_weight(n) - w))
                               for n, w in before.items()}}


class NullEditor:
    name = "null"

    def reset(self, model: EditableLM) -> None:
        model.clear_overlays()

    def edit(self, model: EditableLM, record) -> dict:
        return {}
