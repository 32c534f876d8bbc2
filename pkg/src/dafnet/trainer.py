"""Meta-training of the fusion network with a growing edit-sequence curriculum."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import Dafnet, accumulate_tensor
from .editor import EditorState, edit_step
from .evaluator import EditRecord
from .lm import EditableLM, TokenSeq, make_batch
from .signals import EditSignal, capture_signals

TRAIN_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    t_max: int = 50
    ema_alpha: float = 0.01
    l_ini: float | None = None          # None -> ln(vocab) + 1
    i_inc: int = 300
    gamma: float = 0.25
    i_max: int = 4000
    tail_iters: int = 600                # iterations kept after T_now first hits t_max
    checkpoint_every: int = 100
    lr: float = 3e-4
    seed: int = 0
    token_mean: bool = True
    progressive: bool = True             # capture on f_{t-1} rather than on f
    calibration_samples: int = 200       # 0 skips setting the network's fixed feature statistics
    calibration_ridge: float | None = 0.01
    selection: str = "window"            # "window": mean per-edit loss since last checkpoint; "ema"

    def __post_init__(self):
        if not 0 < self.ema_alpha <= 1:
            raise ValueError("ema_alpha must be in (0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.selection not in ("window", "ema"):
            raise ValueError(f"unknown selection rule {self.selection!r}")


@dataclass
class CurriculumState:
    t_now: int
    l_ema: float
    l_min: float
    i_min: int = 1
    i: int = 0
    t_max_reached_at: int | None = None

    @classmethod
    def start(cls, l_ini: float, t_max: int) -> "CurriculumState":
        return cls(1, l_ini, l_ini, 1, 0, 0 if t_max == 1 else None)


def default_l_ini(vocab_size: int) -> float:
    return math.log(vocab_size) + 1.0


def curriculum_update(state: CurriculumState, l_total: float, cfg: TrainConfig,
                      l_ini: float) -> CurriculumState:
    """One bookkeeping step after iteration ``state.i + 1``."""
    i = state.i + 1
    ema = (1 - cfg.ema_alpha) * state.l_ema + cfg.ema_alpha * l_total
    l_min, i_min = state.l_min, state.i_min
    if ema < l_min:
        l_min, i_min = ema, i
    t_now, reached = state.t_now, state.t_max_reached_at
    if i - i_min > cfg.i_inc and t_now < cfg.t_max:
        t_now = min(cfg.t_max, t_now + max(10, math.floor(cfg.gamma * t_now)))
        ema = l_min = l_ini
        i_min = i
        if t_now == cfg.t_max:
            reached = i
    return CurriculumState(t_now, ema, l_min, i_min, i, reached)


# -- losses ----------------------------------------------------------------------------

def _nll_weights(batch, n: int, token_mean: bool) -> np.ndarray:
    if not token_mean:
        return np.ones(len(batch.owner))
    counts = np.bincount(batch.owner, minlength=n)
    return 1.0 / counts[batch.owner]


def _summed_nll(logp: Tensor, seqs: Sequence[TokenSeq], offset: int, token_mean: bool) -> Tensor:
    """Sum over ``seqs`` of (per-token mean) target NLL; rows start at ``offset``."""
    if not seqs:
        return Tensor(np.array(0.0))
    batch = make_batch(seqs)
    w = _nll_weights(batch, len(seqs), token_mean)
    picked = logp[batch.rows + offset, batch.cols, batch.targets]
    return -(picked * w).sum()


def _position_weights(seqs: Sequence[TokenSeq], L: int) -> np.ndarray:
    w = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        n = len(s.inputs)
        w[i, :n] = 1.0 / n
    return w


def _kl(ref_logp: np.ndarray, logq: Tensor, seqs: Sequence[TokenSeq]) -> Tensor:
    """Sum over probes of the position-averaged KL(p || q) of next-token distributions."""
    if not seqs:
        return Tensor(np.array(0.0))
    w = _position_weights(seqs, ref_logp.shape[1])[..., None]
    p = np.exp(ref_logp)
    return (Tensor(w * p) * (Tensor(ref_logp) - logq)).sum()


def _logp(model: EditableLM, seqs: Sequence[TokenSeq]) -> Tensor:
    return ad.log_softmax(model(make_batch(seqs).ids), axis=-1)


def loss_reliability(model: EditableLM, records: Sequence[EditRecord], token_mean: bool = True) -> Tensor:
    seqs = [r.edit for r in records]
    return _summed_nll(_logp(model, seqs), seqs, 0, token_mean)


def loss_generality(model: EditableLM, records: Sequence[EditRecord], token_mean: bool = True) -> Tensor:
    seqs = [g for r in records for g in r.generality]
    if not seqs:
        return Tensor(np.array(0.0))
    return _summed_nll(_logp(model, seqs), seqs, 0, token_mean)


def loss_locality(pre: EditableLM, post: EditableLM, records: Sequence[EditRecord]) -> Tensor:
    """KL between the pre-edit and edited next-token distributions on locality probes."""
    seqs = [p for r in records for p in r.locality]
    if not seqs:
        return Tensor(np.array(0.0))
    with ad.no_grad():
        ref = _logp(pre, seqs).data
    return _kl(ref, _logp(post, seqs), seqs)


def total_loss(model: EditableLM, records: Sequence[EditRecord], fused: dict[str, Tensor],
               token_mean: bool = True) -> tuple[Tensor, dict[str, float]]:
    """All three losses from one batched forward of the model carrying ``fused`` overlays."""
    rel = [r.edit for r in records]
    gen = [g for r in records for g in r.generality]
    loc = [p for r in records for p in r.locality]
    model.clear_overlays()
    ref = None
    if loc:
        with ad.no_grad():
            ref = _logp(model, loc).data
    try:
        for name, d in fused.items():
            model.set_overlay(name, d)
        seqs = rel + gen + loc
        logp = ad.log_softmax(model(make_batch(seqs).ids), axis=-1)
    finally:
        model.clear_overlays()
    l_rel = _summed_nll(logp, rel, 0, token_mean)
    l_gen = _summed_nll(logp, gen, len(rel), token_mean)
    if loc:
        n0 = len(rel) + len(gen)
        l_loc = _kl(ref, logp[n0:, : ref.shape[1]], loc)
    else:
        l_loc = Tensor(np.array(0.0))
    total = l_rel + l_gen + l_loc
    return total, {"L_rel": l_rel.item(), "L_gen": l_gen.item(), "L_loc": l_loc.item(),
                   "L_total": total.item()}


# -- one iteration ---------------------------------------------------------------------

def capture_sequence(model: EditableLM, net: Dafnet, samples: Sequence[TokenSeq],
                     progressive: bool = True) -> list[dict[str, EditSignal]]:
    """Editing signals for a stream, each against f_{t-1} or all against f."""
    model.clear_overlays()
    if not progressive:
        return capture_signals(model, samples)
    state = EditorState.fresh(model, net)
    sigs = []
    try:
        for s in samples:
            state, _, sig = edit_step(state, model, net, s)
            sigs.append(sig)
    finally:
        model.clear_overlays()
    return sigs


def loss_from_signals(model: EditableLM, net: Dafnet, signals, records: Sequence[EditRecord],
                      token_mean: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Joint forward over the fixed signals, fused overlay, and the total loss."""
    out = net(signals)
    return total_loss(model, records, accumulate_tensor(out), token_mean)


def train_iteration(model: EditableLM, net: Dafnet, opt: ad.Adam, records: Sequence[EditRecord],
                    cfg: TrainConfig, t_now: int) -> dict[str, float]:
    if not 1 <= len(records) <= t_now:
        raise ValueError(f"batch of {len(records)} edits outside 1..T_now={t_now}")
    sigs = capture_sequence(model, net, [r.edit for r in records], cfg.progressive)
    loss, parts = loss_from_signals(model, net, sigs, records, cfg.token_mean)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return parts


# -- the loop --------------------------------------------------------------------------

@dataclass
class CheckpointInfo:
    iteration: int
    l_ema: float
    t_now: int
    path: str
    # mean per-edit loss (L_total / T) over the iterations since the previous checkpoint
    window_loss: float = float("inf")


@dataclass
class TrainResult:
    net: Dafnet
    curriculum: CurriculumState
    checkpoints: list[CheckpointInfo] = field(default_factory=list)
    selected: CheckpointInfo | None = None
    log: list[dict] = field(default_factory=list)


def select_checkpoint(checkpoints: Sequence[CheckpointInfo], t_max: int | None = None,
                      by: str = "window") -> CheckpointInfo:
    """Lowest windowed per-edit loss, preferring checkpoints taken at the full sequence length.

    The curriculum EMA is reset on every growth step, so right after a reset it
    reads artificially low; the window mean does not have that bias. ``by="ema"``
    picks the lowest recorded EMA instead.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    pool = [c for c in checkpoints if t_max is not None and c.t_now >= t_max] or list(checkpoints)
    if by == "ema":
        return min(pool, key=lambda c: (c.l_ema, c.iteration))
    return min(pool, key=lambda c: (c.window_loss, c.iteration))


def validate_records(records: Sequence[EditRecord]) -> None:
    if not records:
        raise ValueError("empty training set")
    for r in records:
        if not r.generality or not r.locality:
            raise ValueError(f"record {r.id} lacks generality or locality samples")


def _save_checkpoint(path: Path, net: Dafnet, opt: ad.Adam, cur: CurriculumState,
                     rng: np.random.Generator, cfg: TrainConfig, l_ini: float,
                     window_loss: float) -> None:
    arrays = {f"m/{k}": v for k, v in opt.state.m.items()}
    arrays.update({f"v/{k}": v for k, v in opt.state.v.items()})
    extra = {"format_version": TRAIN_FORMAT_VERSION, "curriculum": asdict(cur),
             "rng": rng.bit_generator.state, "opt_step": opt.state.step,
             "train_config": asdict(cfg), "l_ini": l_ini,
             "window_loss": window_loss}
    net.save(path, extra=extra, extra_arrays=arrays)


def _keep_going(cur: CurriculumState, cfg: TrainConfig) -> bool:
    """True while the loop should keep going."""
    if cur.i >= cfg.i_max:
        return False
    return cur.t_max_reached_at is None or cur.i - cur.t_max_reached_at < cfg.tail_iters


def train(model: EditableLM, net: Dafnet, records: Sequence[EditRecord], cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: bool = False,
          log: Callable[[str], None] | None = None, log_every: int = 50) -> TrainResult:
    """Run the curriculum; checkpoints go to ``out_dir/checkpoints``.

    With ``resume`` the latest checkpoint in ``out_dir`` is restored (network,
    optimizer moments, curriculum, RNG) and training continues from there.
    """
    validate_records(records)
    base_fp = model.fingerprint()
    model.requires_grad_(False)
    l_ini = cfg.l_ini if cfg.l_ini is not None else default_l_ini(model.config.vocab_size)
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(net.params, lr=cfg.lr)
    cur = CurriculumState.start(l_ini, cfg.t_max)
    ckdir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir is not None else None
    checkpoints: list[CheckpointInfo] = []
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    if resume and ckdir is not None:
        found = sorted(ckdir.glob("iter_*.ckpt"))
        if found:
            cur, checkpoints = _restore(found[-1], net, opt, rng, ckdir)
            _truncate_log(log_path, cur.i)
    if cur.i == 0 and cfg.calibration_samples > 0:
        sample = [r.edit for r in records[: cfg.calibration_samples]]
        net.calibrate(capture_signals(model, sample), ridge=cfg.calibration_ridge)
    entries: list[dict] = []
    window: list[float] = []
    fh = open(log_path, "a") if log_path is not None else None
    try:
        while _keep_going(cur, cfg):
            T = int(rng.integers(1, cur.t_now + 1))
            pick = rng.choice(len(records), size=min(T, len(records)), replace=False)
            parts = train_iteration(model, net, opt, [records[j] for j in pick], cfg, cur.t_now)
            cur = curriculum_update(cur, parts["L_total"], cfg, l_ini)
            entry = {"iteration": cur.i, "T": T, **parts, "L_ema": cur.l_ema, "T_now": cur.t_now}
            entries.append(entry)
            window.append(parts["L_total"] / T)
            if fh is not None:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if log and (cur.i % log_every == 0):
                log(f"iter {cur.i}: T={T} T_now={cur.t_now} L_total={parts['L_total']:.4f} "
                    f"L_ema={cur.l_ema:.4f}")
            if cur.i % cfg.checkpoint_every == 0 or not _keep_going(cur, cfg):
                path = ckdir / f"iter_{cur.i:07d}.ckpt" if ckdir is not None else None
                if path is not None:
                    if fh is not None:
                        fh.flush()
                    wl = float(np.mean(window))
                    _save_checkpoint(path, net, opt, cur, rng, cfg, l_ini, wl)
                    checkpoints.append(CheckpointInfo(cur.i, cur.l_ema, cur.t_now, str(path), wl))
                window = []
    finally:
        if fh is not None:
            fh.close()
    if model.fingerprint() != base_fp:
        raise RuntimeError("base model weights changed during training")
    selected = select_checkpoint(checkpoints, cfg.t_max, cfg.selection) if checkpoints else None
    return TrainResult(net, cur, checkpoints, selected, entries)


def _restore(path: Path, net: Dafnet, opt: ad.Adam, rng: np.random.Generator, ckdir: Path):
    loaded, extra, arrays = Dafnet.load(path, with_extra=True)
    if extra.get("format_version") != TRAIN_FORMAT_VERSION:
        raise ValueError(f"unsupported training checkpoint version in {path}")
    for k, t in loaded.params.items():
        net.params[k].data = t.data
    net.buffers.update(loaded.buffers)
    opt.state.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
    opt.state.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
    opt.state.step = extra["opt_step"]
    rng.bit_generator.state = extra["rng"]
    cur = CurriculumState(**extra["curriculum"])
    infos = []
    for p in sorted(ckdir.glob("iter_*.ckpt")):
        meta_extra = Dafnet.load(p, with_extra=True)[1]
        c = meta_extra["curriculum"]
        if c["i"] <= cur.i:
            infos.append(CheckpointInfo(c["i"], c["l_ema"], c["t_now"], str(p),
                                        meta_extra.get("window_loss", float("inf"))))
    return cur, infos


def _truncate_log(path: Path | None, upto: int) -> None:
    if path is None or not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["iteration"] <= upto]
    path.write_text("".join(ln + "\n" for ln in keep))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
