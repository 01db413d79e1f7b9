"""Pseudo-speech encoder: turns token sequences into frame sequences for the text-level encoder.

Composition for one utterance::

    tokens -> (text augmentation)
           -> slot encodings, one per slot of (blank, y1, blank, ..., yN, blank):
                interleave_blanks: embedding of the interleaved ids
                text_encoder_transposed_conv: Transformer++ over the tokens,
                    stride-2 transposed conv (label slot, following blank slot),
                    plus a learned leading-blank vector
           -> per-slot durations (random / trained / forced from an alignment)
           -> upsample (repeat each slot encoding by its duration)
           -> optional small Transformer++ over the upsampled frames
           -> linear projection to the text-level encoder dim
           -> (output masking with a learned vector)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import TransformerPPBlock, frame_mask
from .numcore import Linear, Module, Parameter, Tensor, ops

INPUT_VARIANTS = ("interleave_blanks", "text_encoder_transposed_conv")
DURATION_MODELS = ("random", "trained")
UPSAMPLE_ENCODERS = ("none", "embed", "small_transformer")


@dataclass
class PseudoSpeechConfig:
    input_variant: str = "interleave_blanks"
    duration_model: str = "random"
    # "none" and "embed" both mean no encoder after upsampling; the names follow
    # the two input variants ("embed" for interleaved blanks, "none" otherwise)
    upsample_encoder: str = "embed"
    modality_matching: bool = False
    max_blank_dur: int = 3
    max_label_dur: int = 1
    mask_prob: float = 0.0
    augment_prob: float = 0.2
    text_encoder_layers: int = 2

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.input_variant not in INPUT_VARIANTS:
            raise ValueError(f"input_variant must be one of {INPUT_VARIANTS}, got {self.input_variant!r}")
        if self.duration_model not in DURATION_MODELS:
            raise ValueError(f"duration_model must be one of {DURATION_MODELS}, got {self.duration_model!r}")
        if self.upsample_encoder not in UPSAMPLE_ENCODERS:
            raise ValueError(f"upsample_encoder must be one of {UPSAMPLE_ENCODERS}, got {self.upsample_encoder!r}")
        if self.max_label_dur < 1:
            raise ValueError("max_label_dur must be >= 1")
        if self.max_blank_dur < 0:
            raise ValueError("max_blank_dur must be >= 0")
        for name in ("mask_prob", "augment_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


@dataclass
class DurationAssignment:
    label_durs: list[int]
    blank_durs: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self) -> None:
        if len(self.blank_durs) != len(self.label_durs) + 1:
            raise ValueError("need exactly one more blank slot than labels")

    @property
    def total(self) -> int:
        return int(sum(self.label_durs) + sum(self.blank_durs))

    def slot_durations(self) -> list[int]:
        """Durations in slot order (b0, l1, b1, ..., lN, bN)."""
        out = [self.blank_durs[0]]
        for lab, blk in zip(self.label_durs, self.blank_durs[1:]):
            out += [lab, blk]
        return out


class AlignmentLengthError(ValueError):
    pass


def interleave_blanks(tokens: Sequence[int], blank: int) -> list[int]:
    tokens = [int(t) for t in tokens]
    if blank in tokens:
        raise ValueError("input tokens must not contain the blank id")
    out = [blank]
    for t in tokens:
        out += [t, blank]
    return out


def random_durations(tokens: Sequence[int], cfg: PseudoSpeechConfig, rng: np.random.Generator) -> DurationAssignment:
    n = len(tokens)
    labels = rng.integers(1, cfg.max_label_dur + 1, size=n).tolist()
    blanks = rng.integers(0, cfg.max_blank_dur + 1, size=n + 1).tolist()
    return DurationAssignment(labels, blanks)


def ensure_emittable(durs: DurationAssignment, tokens: Sequence[int]) -> DurationAssignment:
    """Force a blank frame between repeated labels and at least one frame overall."""
    blanks = list(durs.blank_durs)
    for i in range(1, len(tokens)):
        if tokens[i] == tokens[i - 1] and blanks[i] == 0:
            blanks[i] = 1
    if sum(durs.label_durs) + sum(blanks) == 0:
        blanks[-1] = 1
    return DurationAssignment(list(durs.label_durs), blanks)


def durations_from_predictions(pred_log1p: np.ndarray) -> DurationAssignment:
    """Round predicted ``log(1 + d)`` per slot to integer durations; labels get at least 1 frame."""
    d = np.rint(np.maximum(np.expm1(np.asarray(pred_log1p, dtype=float)), 0.0)).astype(int)
    blanks = d[0::2].tolist()
    labels = np.maximum(d[1::2], 1).tolist()
    return DurationAssignment(labels, blanks)


def upsample(embeddings, durations: Sequence[int]) -> Tensor:
    """Repeat row j ``durations[j]`` times: ``[M, E] -> [sum(durations), E]``."""
    durations = np.asarray(durations, dtype=np.int64)
    if (durations < 0).any():
        raise ValueError("durations must be non-negative")
    e = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if len(durations) != e.shape[0]:
        raise ValueError(f"{len(durations)} durations for {e.shape[0]} rows")
    return ops.take(e, np.repeat(np.arange(len(durations)), durations))


def upsample_matrix(slot_durs: Sequence[Sequence[int]], max_slots: int) -> tuple[np.ndarray, list[int]]:
    """0/1 ``[B, L_max, S_max]`` matrix repeating slot encodings; also the frame counts."""
    lengths = [int(sum(d)) for d in slot_durs]
    U = np.zeros((len(slot_durs), max(max(lengths), 1), max_slots))
    for b, durs in enumerate(slot_durs):
        src = np.repeat(np.arange(len(durs)), durs)
        U[b, np.arange(len(src)), src] = 1.0
    return U, lengths


def text_augment(tokens: Sequence[int], p: float, rng: np.random.Generator, vocab_size: int) -> list[int]:
    """Replace each token by a uniformly drawn vocabulary token with probability ``p``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    hit = rng.random(len(tokens)) < p
    repl = rng.integers(0, vocab_size, size=len(tokens))
    return np.where(hit, repl, tokens).tolist()


def output_mask(pseudo: Tensor, p: float, rng: np.random.Generator, mask_vector: Tensor,
                valid: np.ndarray | None = None) -> Tensor:
    """Replace each (valid) frame by ``mask_vector`` with probability ``p``."""
    m = rng.random(pseudo.shape[:-1]) < p
    if valid is not None:
        m &= valid
    if not m.any():
        return pseudo
    return ops.row_mask(pseudo, mask_vector, m)


def modality_matching_loss(pseudo, speech_hidden) -> Tensor:
    """Mean squared difference over frames and dims; shapes must agree."""
    if pseudo.shape != speech_hidden.shape:
        raise AlignmentLengthError(
            f"pseudo-speech {tuple(pseudo.shape)} and speech encoder output "
            f"{tuple(speech_hidden.shape)} are not length-aligned")
    return ops.mean(ops.square(pseudo - speech_hidden))


def modality_matching_loss_batch(pseudo: Tensor, speech_hidden: Tensor, lengths: Sequence[int]) -> Tensor:
    """Per-utterance MSE ``[B]`` over valid frames of padded batches."""
    if pseudo.shape != speech_hidden.shape:
        raise AlignmentLengthError(
            f"pseudo-speech {tuple(pseudo.shape)} vs speech encoder output {tuple(speech_hidden.shape)}")
    valid = frame_mask(lengths, pseudo.shape[1])
    w = valid[..., None] / (np.asarray(lengths, dtype=float)[:, None, None] * pseudo.shape[-1])
    sq = ops.square(pseudo - speech_hidden) * Tensor(np.broadcast_to(w, pseudo.shape))
    return sq.sum(axis=(1, 2))


@dataclass
class PseudoBatch:
    frames: Tensor            # [B, L_max, D_enc]
    lengths: list[int]
    durations: list[DurationAssignment]
    slot_encodings: Tensor    # [B, S_max, E], what the duration head reads
    slot_counts: list[int]


class PseudoSpeechEncoder(Module):
    def __init__(self, cfg: PseudoSpeechConfig, vocab_size: int, embed_dim: int, out_dim: int,
                 heads: int, ff_dim: int, rng: np.random.Generator, max_rel: int = 16):
        cfg.validate()
        self._cfg = cfg
        self._vocab = vocab_size
        self._blank = vocab_size
        if cfg.input_variant == "interleave_blanks":
            self.embed = Parameter(rng.standard_normal((vocab_size + 1, embed_dim)))
            self.text_encoder = []
            self.tconv = None
            self.lead_blank = None
        else:
            self.embed = Parameter(rng.standard_normal((vocab_size, embed_dim)))
            self.text_encoder = [TransformerPPBlock(embed_dim, heads, ff_dim, max_rel, rng)
                                 for _ in range(cfg.text_encoder_layers)]
            self.tconv = Linear(embed_dim, 2 * embed_dim, rng)
            self.lead_blank = Parameter(rng.standard_normal(embed_dim))
        self.duration_head = Linear(embed_dim, 1, rng, zero=True) if cfg.duration_model == "trained" else None
        if cfg.upsample_encoder == "small_transformer":
            self.upsampled_encoder = [TransformerPPBlock(embed_dim, heads, ff_dim, max_rel, rng)]
        else:
            self.upsampled_encoder = []
        self.proj = Linear(embed_dim, out_dim, rng)
        self.mask_vector = Parameter(rng.standard_normal(out_dim) * 0.1)

    @property
    def config(self) -> PseudoSpeechConfig:
        return self._cfg

    def duration_parameters(self) -> list[Tensor]:
        return self.duration_head.parameters() if self.duration_head is not None else []

    def non_duration_parameters(self) -> list[Tensor]:
        dur = {id(p) for p in self.duration_parameters()}
        return [p for p in self.parameters() if id(p) not in dur]

    # -- slots ---------------------------------------------------------------
    def slot_encodings(self, token_lists: Sequence[Sequence[int]]) -> tuple[Tensor, list[int]]:
        """``[B, S_max, E]`` encodings for the 2N+1 slots of each utterance."""
        B = len(token_lists)
        counts = [2 * len(t) + 1 for t in token_lists]
        if self._cfg.input_variant == "interleave_blanks":
            ids = np.full((B, max(counts)), self._blank, dtype=np.int64)
            for b, toks in enumerate(token_lists):
                ids[b, :counts[b]] = interleave_blanks(toks, self._blank)
            return ops.take(self.embed, ids), counts
        n_max = max(len(t) for t in token_lists)
        E = self.embed.shape[1]
        lead = Tensor(np.zeros((B, 1, E))) + self.lead_blank
        if n_max == 0:
            return lead, counts
        ids = np.zeros((B, n_max), dtype=np.int64)
        for b, toks in enumerate(token_lists):
            ids[b, :len(toks)] = toks
        valid = frame_mask([len(t) for t in token_lists], n_max)
        h = ops.take(self.embed, ids)
        for blk in self.text_encoder:
            h = blk(h, valid)
        # stride-2 kernel-2 transposed conv: each token yields (label slot, following blank slot)
        up = self.tconv(h).reshape(B, 2 * n_max, E)
        return ops.concat([lead, up], axis=1), counts

    def predict_log_durations(self, slots: Tensor) -> Tensor:
        """Duration head on detached slot encodings: predicted ``log(1 + d)`` ``[B, S_max]``."""
        if self.duration_head is None:
            raise RuntimeError("pseudo-speech encoder has no trained duration model")
        z = self.duration_head(slots.detach())
        return z.reshape(z.shape[0], z.shape[1])

    def trained_durations(self, token_encodings) -> np.ndarray:
        """Predicted (real-valued) durations for one utterance's slot encodings ``[S, E]``."""
        enc = token_encodings if isinstance(token_encodings, Tensor) else Tensor(token_encodings)
        z = self.predict_log_durations(enc.reshape(1, *enc.shape))
        return np.maximum(np.expm1(z.data[0]), 0.0)

    def duration_loss(self, slots: Tensor, counts: Sequence[int], targets: Sequence[DurationAssignment]) -> Tensor:
        """Per-utterance MSE on ``log(1 + d)`` over the slots ``[B]``."""
        z = self.predict_log_durations(slots)
        tgt = np.zeros(z.shape)
        w = np.zeros(z.shape)
        for b, (c, d) in enumerate(zip(counts, targets)):
            tgt[b, :c] = np.log1p(d.slot_durations())
            w[b, :c] = 1.0 / c
        return (ops.square(z - Tensor(tgt)) * Tensor(w)).sum(axis=1)

    # -- full composition -----------------------------------------------------
    def encode(self, token_lists: Sequence[Sequence[int]], rng: np.random.Generator,
               forced: Sequence[DurationAssignment] | None = None, augment: bool = True,
               mask: bool = True) -> PseudoBatch:
        cfg = self._cfg
        if forced is not None and len(forced) != len(token_lists):
            raise ValueError("one forced duration assignment per utterance required")
        inputs = []
        for toks in token_lists:
            if augment and cfg.augment_prob > 0:
                toks = text_augment(toks, cfg.augment_prob, rng, self._vocab)
            inputs.append(list(toks))
        slots, counts = self.slot_encodings(inputs)
        if forced is not None:
            durs = list(forced)
        elif cfg.duration_model == "trained":
            z = self.predict_log_durations(slots).data
            durs = [ensure_emittable(durations_from_predictions(z[b, :c]), token_lists[b])
                    for b, c in enumerate(counts)]
        else:
            durs = [ensure_emittable(random_durations(t, cfg, rng), orig)
                    for t, orig in zip(inputs, token_lists)]
        U, lengths = upsample_matrix([d.slot_durations() for d in durs], slots.shape[1])
        frames = ops.matmul(Tensor(U), slots)
        valid = frame_mask(lengths, frames.shape[1])
        for blk in self.upsampled_encoder:
            frames = blk(frames, valid)
        out = self.proj(frames)
        if mask and cfg.mask_prob > 0:
            out = output_mask(out, cfg.mask_prob, rng, self.mask_vector, valid)
        return PseudoBatch(out, lengths, durs, slots, counts)


def pseudo_speech_encode(encoder: PseudoSpeechEncoder, tokens: Sequence[int], rng: np.random.Generator,
                         forced: DurationAssignment | None = None) -> Tensor:
    """Single-utterance convenience wrapper: ``[T', D_enc]``."""
    batch = encoder.encode([list(tokens)], rng, forced=None if forced is None else [forced])
    return batch.frames[0, :batch.lengths[0]]
