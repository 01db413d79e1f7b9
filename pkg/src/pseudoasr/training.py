"""Training: loss assembly for paired and text-only batches, update rule, batch planning, loop.

Each step draws a paired batch of about ``paired_batch_tokens`` label tokens
and (for pseudo regimes) a text-only batch sized so that the running ratio
of text tokens to paired tokens tracks ``text_ratio``. Both gradients are
accumulated and applied in one optimizer update.

Losses are normalized per batch: token-level losses (CTC, decoder
cross-entropy) divide by the batch's token count, utterance-level losses
(duration, modality matching) average over utterances.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, TrainConfig, dump_config
from .ctc import ctc_forced_align, ctc_loss_batch, durations_from_alignment
from .data import Corpus, Utterance, tts_features
from .decoding import corpus_wer, greedy_batch
from .model import ASRModel, EncoderOutput
from .numcore import Tensor, no_grad, ops
from .optim import AdamW, clip_grad_norm, global_grad_norm, warmup_inv_sqrt
from .pseudo import DurationAssignment, modality_matching_loss_batch


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StepReport:
    step: int = 0
    losses: dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    grad_norm: float = 0.0
    lr: float = 0.0
    tokens: dict[str, int] = field(default_factory=dict)
    compress_fallbacks: int = 0
    wall_time: float = 0.0

    def record(self) -> dict:
        """Deterministic log record (wall time is left out on purpose)."""
        return {"type": "step", "step": self.step, "losses": dict(sorted(self.losses.items())),
                "total": self.total, "grad_norm": self.grad_norm, "lr": self.lr,
                "tokens": dict(sorted(self.tokens.items())), "compress_fallbacks": self.compress_fallbacks}


def make_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def build_model(cfg: RunConfig) -> ASRModel:
    use_pseudo = cfg.train.regime in ("pseudo_direct", "pseudo_modality_matching")
    return ASRModel(cfg.model, cfg.pseudo if use_pseudo else None)


# -- losses --------------------------------------------------------------------

def decoder_ce(out: EncoderOutput) -> Tensor:
    """Summed token cross-entropy of the decoder over the batch (EOS included)."""
    tgt = out.extras["decoder_targets"]
    lens = out.extras["decoder_lengths"]
    w = np.zeros(tgt.shape)
    for b, n in enumerate(lens):
        w[b, :n] = 1.0
    return -(ops.pick(out.decoder_logp, tgt) * Tensor(w)).sum()


def _loss_sum(parts: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    total = None
    for k, v in parts.items():
        term = v * weights[k]
        total = term if total is None else total + term
    return total


def _weights(cfg: TrainConfig) -> dict[str, float]:
    return {"ce": cfg.w_ce, "ctc": cfg.w_ctc, "ictc": cfg.w_ictc, "dur": cfg.w_dur, "mm": cfg.w_mm,
            "text_ce": cfg.w_ce, "text_ctc": cfg.w_ctc}


def paired_losses(model: ASRModel, utts: Sequence[Utterance], cfg: TrainConfig,
                  rng: np.random.Generator) -> tuple[dict[str, Tensor], int]:
    """Loss terms for a batch of (features, labels); also returns the compression fallback count."""
    labels = [u.tokens for u in utts]
    ids = [u.id for u in utts]
    ntok = sum(len(t) for t in labels)
    out = model.forward_batch(feats=[u.features for u in utts], labels=labels)
    parts = {"ctc": ctc_loss_batch(out.final_logp, out.text_lengths, labels, ids).sum() * (1.0 / ntok),
             "ictc": ctc_loss_batch(out.ictc_logp, out.speech_lengths, labels, ids).sum() * (1.0 / ntok)}
    if out.decoder_logp is not None:
        parts["ce"] = decoder_ce(out) * (1.0 / (ntok + len(utts)))
    fallbacks = out.extras.get("compress_fallbacks", 0)
    pseudo = model.pseudo
    if pseudo is not None:
        trained = pseudo.config.duration_model == "trained"
        mm = cfg.regime == "pseudo_modality_matching"
        if trained or mm:
            forced = []
            for b, lab in enumerate(labels):
                path = ctc_forced_align(out.ictc_grid(b), lab)
                ld, bd = durations_from_alignment(path, lab, model.config.blank)
                forced.append(DurationAssignment(ld, bd))
            if trained:
                slots, counts = pseudo.slot_encodings(labels)
                parts["dur"] = pseudo.duration_loss(slots, counts, forced).mean()
            if mm:
                pb = pseudo.encode(labels, rng, forced=forced, augment=False, mask=False)
                target = out.speech_hidden.detach()
                parts["mm"] = modality_matching_loss_batch(pb.frames, target, out.speech_lengths).mean()
    return parts, fallbacks


def text_losses(model: ASRModel, token_lists: Sequence[Sequence[int]], cfg: TrainConfig,
                rng: np.random.Generator, ids: Sequence[str] | None = None) -> dict[str, Tensor]:
    """Loss terms for text-only data routed through the pseudo-speech encoder.

    Under modality matching the pseudo-speech frames are detached, so text
    losses train only the text-level encoder and decoder.
    """
    if model.pseudo is None:
        raise RuntimeError("text-only steps need a model with a pseudo-speech encoder")
    labels = [list(t) for t in token_lists]
    ntok = sum(len(t) for t in labels)
    pb = model.pseudo.encode(labels, rng)
    frames = pb.frames.detach() if cfg.regime == "pseudo_modality_matching" else pb.frames
    out = model.forward_batch(pseudo=(frames, pb.lengths), labels=labels)
    parts = {"text_ctc": ctc_loss_batch(out.final_logp, out.text_lengths, labels, ids).sum() * (1.0 / ntok)}
    if out.decoder_logp is not None:
        parts["text_ce"] = decoder_ce(out) * (1.0 / (ntok + len(labels)))
    return parts


def _check_finite(parts: dict[str, Tensor], step: int) -> None:
    for k, v in parts.items():
        if not math.isfinite(float(v.data)):
            raise TrainingDiverged(f"step {step}: non-finite {k} loss")


def paired_step(model: ASRModel, utts: Sequence[Utterance], cfg: TrainConfig, rng: np.random.Generator,
                step: int = 0) -> StepReport:
    """Forward + backward on a paired batch; gradients accumulate into ``.grad``."""
    parts, fb = paired_losses(model, utts, cfg, rng)
    _check_finite(parts, step)
    total = _loss_sum(parts, _weights(cfg))
    total.backward()
    return StepReport(step=step, losses={k: float(v.data) for k, v in parts.items()}, total=float(total.data),
                      tokens={"paired": sum(len(u.tokens) for u in utts)}, compress_fallbacks=fb)


def text_only_step(model: ASRModel, token_lists: Sequence[Sequence[int]], cfg: TrainConfig,
                   rng: np.random.Generator, step: int = 0) -> StepReport:
    parts = text_losses(model, token_lists, cfg, rng)
    _check_finite(parts, step)
    total = _loss_sum(parts, _weights(cfg))
    total.backward()
    return StepReport(step=step, losses={k: float(v.data) for k, v in parts.items()}, total=float(total.data),
                      tokens={"text": sum(len(t) for t in token_lists)})


def accumulate_update(model: ASRModel, opt: AdamW, paired: Sequence[Utterance],
                      text: Sequence[Sequence[int]], cfg: TrainConfig, rng: np.random.Generator,
                      step: int) -> StepReport:
    """One optimizer update from the summed gradients of a paired and a text-only batch."""
    t0 = time.perf_counter()
    opt.zero_grad()
    rep = paired_step(model, paired, cfg, rng, step)
    if text:
        trep = text_only_step(model, text, cfg, rng, step)
        rep.losses.update(trep.losses)
        rep.total += trep.total
        rep.tokens.update(trep.tokens)
    else:
        rep.tokens["text"] = 0
    norm = global_grad_norm(opt.params)
    if not math.isfinite(norm):
        raise TrainingDiverged(f"step {step}: non-finite gradient norm")
    clip_grad_norm(opt.params, cfg.grad_clip)
    lr = warmup_inv_sqrt(step, cfg.lr, cfg.warmup)
    opt.step(lr)
    rep.grad_norm = norm
    rep.lr = lr
    rep.wall_time = time.perf_counter() - t0
    return rep


# -- batch planning ------------------------------------------------------------

class _Stream:
    """Endless reshuffled pass over item indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order: list[int] = []

    def next(self) -> int:
        if not self.order:
            self.order = self.rng.permutation(self.n).tolist()[::-1]
        return self.order.pop()


@dataclass
class StepPlan:
    paired: list[int]
    text: list[int]
    paired_tokens: int
    text_tokens: int


class RatioScheduler:
    """Plans per-step batches so cumulative text tokens track ``ratio`` x cumulative paired tokens.

    The paired batch takes utterances until it holds at least
    ``paired_batch_tokens`` tokens; the text batch then takes utterances
    while the running deficit ``ratio * paired_total - text_total`` is
    positive. The running ratio therefore stays within one text utterance
    of the target at every step.
    """

    def __init__(self, paired_lengths: Sequence[int], text_lengths: Sequence[int], paired_batch_tokens: int,
                 ratio: float, rng: np.random.Generator):
        if not paired_lengths:
            raise ValueError("no paired utterances")
        if ratio > 0 and not text_lengths:
            raise ValueError("text ratio > 0 but no text-only utterances")
        self.pl = list(paired_lengths)
        self.tl = list(text_lengths)
        self.pbt = paired_batch_tokens
        self.ratio = ratio
        self.ps = _Stream(len(self.pl), rng)
        self.ts = _Stream(len(self.tl), rng) if self.tl else None
        self.paired_total = 0
        self.text_total = 0

    def next(self) -> StepPlan:
        p, pt = [], 0
        while pt < self.pbt:
            i = self.ps.next()
            p.append(i)
            pt += self.pl[i]
        self.paired_total += pt
        t, tt = [], 0
        if self.ratio > 0:
            while self.ratio * self.paired_total - self.text_total > 0:
                i = self.ts.next()
                t.append(i)
                tt += self.tl[i]
                self.text_total += self.tl[i]
        return StepPlan(p, t, pt, tt)


# -- loop ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ASRModel
    steps: int
    checkpoint: Path
    metrics: Path
    dev_wer: float | None


def evaluate(model: ASRModel, utts: Sequence[Utterance], batch_size: int = 32) -> float:
    """Corpus WER of greedy final-head CTC decoding."""
    pairs = []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i:i + batch_size]
        hyps = greedy_batch(model, [u.features for u in chunk])
        pairs += [(h, u.tokens) for h, u in zip(hyps, chunk)]
    return corpus_wer(pairs)


class _TTSCache:
    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self.cache: dict[int, np.ndarray] = {}

    def utterance(self, i: int) -> Utterance:
        u = self.corpus["train_text"][i]
        if i not in self.cache:
            self.cache[i] = tts_features(u.id, i, u.tokens, self.corpus.config)
        return Utterance(u.id, u.tokens, "tts", self.cache[i])


def train(cfg: RunConfig, corpus: Corpus, out_dir: str | Path, dev_limit: int | None = None,
          progress=None) -> TrainResult:
    """Train from scratch; writes ``model.ckpt`` and ``metrics.jsonl`` into ``out_dir``.

    A checkpoint is written at every evaluation. On a non-finite loss the
    run stops with :class:`TrainingDiverged` and the last good checkpoint
    stays in place.
    """
    tc = cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    metrics = out / "metrics.jsonl"
    model = build_model(cfg)
    opt = AdamW(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.adam_eps,
                weight_decay=tc.weight_decay)
    paired = corpus["train_paired"]
    text = corpus["train_text"]
    dev = corpus["dev"][:dev_limit] if dev_limit else corpus["dev"]
    sched_rng, loss_rng = make_rng(tc.seed, 0), make_rng(tc.seed, 1)
    tts = _TTSCache(corpus) if tc.regime == "toy_tts" else None
    # toy TTS spends the text ratio on synthetic paired batches
    ratio = tc.text_ratio if tc.regime != "paired_only" else 0.0
    sched = RatioScheduler([len(u.tokens) for u in paired], [len(u.tokens) for u in text],
                           tc.paired_batch_tokens, ratio, sched_rng)
    meta = {"config": dump_config(cfg)}
    dev_wer = None
    with open(metrics, "w") as log:
        def emit(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()

        for step in range(1, tc.steps + 1):
            plan = sched.next()
            batch = [paired[i] for i in plan.paired]
            text_batch: list[list[int]] = []
            if tts is not None:
                batch = batch + [tts.utterance(i) for i in plan.text]
            else:
                text_batch = [text[i].tokens for i in plan.text]
            rep = accumulate_update(model, opt, batch, text_batch, tc, loss_rng, step)
            if tts is not None:
                rep.tokens = {"paired": plan.paired_tokens, "text": plan.text_tokens}
            emit(rep.record())
            if progress is not None:
                progress(rep)
            if step % tc.eval_every == 0 or step == tc.steps:
                dev_wer = evaluate(model, dev)
                emit({"type": "eval", "step": step, "dev_wer": dev_wer})
                model.save(ckpt, {**meta, "step": step, "dev_wer": dev_wer})
    return TrainResult(model, tc.steps, ckpt, metrics, dev_wer)
