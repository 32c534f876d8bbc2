"""Per-token editing signals: layer inputs ``u`` and output gradients ``delta``.

For a linear map ``z = u @ W`` the weight gradient of any loss is the sum of
per-token outer products ``u_i^T delta_i``, so the pair ``[u; delta]`` carries
the full gradient in factored, rank-``B`` form.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .lm import EditableLM, TokenSeq, make_batch


@dataclass(frozen=True)
class EditSignal:
    u: np.ndarray      # [B_t, d_in]
    delta: np.ndarray  # [B_t, d_out]

    def __post_init__(self):
        if self.u.ndim != 2 or self.delta.ndim != 2 or self.u.shape[0] != self.delta.shape[0]:
            raise ad.ShapeError("EditSignal", self.u.shape, self.delta.shape)

    @property
    def n_tokens(self) -> int:
        return self.u.shape[0]

    @property
    def h(self) -> np.ndarray:
        return np.concatenate([self.u, self.delta], axis=1)


def reconstruct_gradient(signal: EditSignal) -> np.ndarray:
    return signal.u.T @ signal.delta


def capture_signals(model: EditableLM, samples: Sequence[TokenSeq],
                    return_grads: bool = False):
    """Editing signals for each sample against the model's current weights.

    One batched forward/backward of the summed target NLL. Sequences never
    interact, so each sample's rows are exactly its own signal. Every input
    position is kept: in non-final layers prompt tokens receive gradient
    through later attention, and dropping them would break the rank-1 sum.
    """
    if not samples:
        raise ValueError("no samples to capture")
    for s in samples:
        if not s.target:
            raise ValueError("sample has no target tokens")
    names = [m.name for m in model.editable_matrices()]
    leaves = {n: ad.Tensor(model.effective_weight(n), requires_grad=True) for n in names}
    batch = make_batch(samples)
    hooks: dict = {}
    logits = model(batch.ids, hooks=hooks, weight_leaves=leaves)
    logp = ad.log_softmax(logits, axis=-1)
    nll = -logp[batch.rows, batch.cols, batch.targets].sum()
    nll.backward()
    out: list[dict[str, EditSignal]] = []
    for b, n_tok in enumerate(batch.lengths):
        sig = {}
        for n in names:
            u, z = hooks[n]
            sig[n] = EditSignal(u[b, :n_tok].copy(), z.grad[b, :n_tok].copy())
        out.append(sig)
    if return_grads:
        return out, {n: leaves[n].grad for n in names}
    return out


def capture_signal(model: EditableLM, sample: TokenSeq) -> dict[str, EditSignal]:
    return capture_signals(model, [sample])[0]
