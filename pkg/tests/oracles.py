"""Independent reference implementations used by the tests.

Everything here is written with explicit loops over facts, tokens and heads in
plain numpy, without reusing any code path of the package under test.
"""
import numpy as np


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _fact_attention(P, pre, xs, n_heads, d_attn, full):
    """Causal attention over a list of fact vectors. Returns (outputs, head-mean probs)."""
    dh = d_attn // n_heads
    T = len(xs)
    probs = np.zeros((T, T))
    outs = []
    for t in range(T):
        q = xs[t] @ P[pre + "wq"] + P[pre + "bq"]
        o = np.zeros(d_attn)
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = np.array([q[sl] @ (xs[s] @ P[pre + "wk"])[sl] / np.sqrt(dh) for s in range(t + 1)])
            a = _softmax(scores)
            probs[t, : t + 1] += a / n_heads
            if full:
                for s in range(t + 1):
                    o[sl] += a[s] * (xs[s] @ P[pre + "wv"] + P[pre + "bv"])[sl]
        outs.append(xs[t] + o @ P[pre + "wo"] + P[pre + "bo"] if full else None)
    return outs, probs


def core_reference(P, buffers, matrices, signals, n_layers, n_heads, d_attn, delta_scale):
    """Fused deltas, per-fact deltas and mean fusion weights for a fact sequence.

    ``P`` maps parameter names to arrays, ``matrices`` is a list of
    ``(name, d_in, d_out)`` and ``signals[t][name]`` is a ``(u, delta)`` pair.
    """
    T = len(signals)
    result = {"delta": {}, "beta_bar": {}, "fused": {}}
    for name, d_in, d_out in matrices:
        key = f"{d_in}x{d_out}"
        scale = buffers[f"scale.{key}"]
        prec = buffers[f"key_precond.{key}"]
        # token rows per fact, mapped into the common width
        hs = []
        for t in range(T):
            u, dl = signals[t][name]
            rows = np.concatenate([u, dl], axis=1) / scale
            hs.append(rows @ P[f"remap_in.{key}"])
        bars_last = None
        for k in range(1, n_layers + 1):
            pre = f"intra{k}."
            hats, bars = [], []
            for t in range(T):
                h1 = np.array([_relu(r @ P[pre + "w1"] + P[pre + "b1"]) @ P[pre + "w2"] + P[pre + "b2"]
                               for r in hs[t]])
                logit = np.array([(_relu(r @ P[pre + "w3"] + P[pre + "b3"]) @ P[pre + "w4"])[0]
                                  + P[pre + "b4"][0] for r in h1])
                alpha = _softmax(logit)
                hat = alpha[:, None] * h1
                bars.append(hat.sum(axis=0))
                hats.append(hat + hs[t])
            fused_bars, _ = _fact_attention(P, pre + "attn.", bars, n_heads, d_attn, True)
            hs = [hats[t] + fused_bars[t][None, :] for t in range(T)]
            bars_last = bars
        xs = bars_last
        betas = np.zeros(T)
        for k in range(1, n_layers + 1):
            outs, probs = _fact_attention(P, f"inter{k}.attn.", xs, n_heads, d_attn, k < n_layers)
            betas += np.diag(probs)
            xs = outs
        beta_bar = betas / n_layers
        deltas = []
        for t in range(T):
            native = (hs[t] @ P[f"remap_out.{key}"]) * scale
            u_t = native[:, :d_in] @ prec
            d_t = -delta_scale * native[:, d_in:]
            deltas.append(sum(np.outer(u_t[i], d_t[i]) for i in range(len(u_t))) / len(u_t))
        fused = np.zeros((d_in, d_out))
        for t in range(T):
            w = beta_bar[t]
            for tau in range(t + 1, T):
                w *= 1.0 - beta_bar[tau]
            fused += w * deltas[t]
        result["delta"][name] = deltas
        result["beta_bar"][name] = beta_bar
        result["fused"][name] = fused
    return result


# -- metric recounts --------------------------------------------------------------------

def greedy_target_match(logits_fn, seq):
    """1 if every target token is the argmax under teacher forcing, else 0."""
    ids = list(seq.prompt) + list(seq.target[:-1])
    logits = logits_fn(ids)
    for j, tok in enumerate(seq.target):
        pos = len(seq.prompt) - 1 + j
        if int(np.argmax(logits[pos])) != tok:
            return 0
    return 1


def argmax_path(logits_fn, seq):
    ids = list(seq.prompt) + list(seq.target[:-1])
    logits = logits_fn(ids)
    return [int(np.argmax(logits[len(seq.prompt) - 1 + j])) for j in range(len(seq.target))]


def recount(pre_fn, post_fn, records):
    """(reliability, generality, locality) by brute force over explicit loops."""
    rel = [greedy_target_match(post_fn, r.edit) for r in records]
    gen = []
    for r in records:
        hits = [greedy_target_match(post_fn, g) for g in r.generality]
        gen.append(sum(hits) / len(hits))
    loc = []
    for r in records:
        same = [1 if argmax_path(pre_fn, p) == argmax_path(post_fn, p) else 0 for p in r.locality]
        loc.append(sum(same) / len(same))
    return sum(rel) / len(rel), sum(gen) / len(gen), sum(loc) / len(loc)
