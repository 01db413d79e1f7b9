"""CTC + small-decoder ASR model with a text-level upper encoder.

Speech path::

    features -> conv front-end (x6 in time) -> Conformer speech encoder
             -> intermediate CTC head
             -> (+ self-conditioning on intermediate CTC probabilities)
             -> (CTC compression to text-level frames)
             -> text-level encoder (Transformer++ or Conformer) -> final CTC head
             -> cross-attention decoder

Pseudo path (training only): pseudo-speech frames enter the text-level
encoder directly, above the compression point.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .compress import MergePlan, compress_batch, identity_plan, merge_plan
from .ctc import min_frames
from .layers import ConformerBlock, DecoderBlock, TransformerPPBlock, frame_mask, sinusoidal_positions, zero_padding
from .numcore import (Embedding, LayerNorm, Linear, Module, Tensor, load_checkpoint, ops,
                      save_checkpoint)
from .pseudo import PseudoSpeechConfig, PseudoSpeechEncoder

FRONTEND_FACTOR = 6


@dataclass
class ModelConfig:
    feat_dim: int = 16
    model_dim: int = 64
    speech_layers: int = 4
    text_level_layers: int = 4
    text_level_type: str = "conformer"
    decoder_layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    vocab_size: int = 16
    downsampling: bool = False
    self_conditioning: bool = False
    tau: float = 0.9
    conv_kernel: int = 5
    max_rel_pos: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.text_level_type not in ("transformerpp", "conformer"):
            raise ValueError(f"text_level_type must be transformerpp or conformer, got {self.text_level_type!r}")
        if min(self.speech_layers, self.text_level_layers, self.decoder_layers) < 0:
            raise ValueError("layer counts must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def total_encoder_layers(self) -> int:
        return self.speech_layers + self.text_level_layers

    @property
    def blank(self) -> int:
        return self.vocab_size

    @property
    def bos(self) -> int:
        return self.vocab_size

    @property
    def eos(self) -> int:
        return self.vocab_size + 1


@dataclass
class EncoderOutput:
    speech_hidden: Tensor | None        # [B, T_enc, D]
    speech_lengths: list[int]
    ictc_logp: Tensor | None            # [B, T_enc, V+1]
    text_hidden: Tensor                 # [B, T', D]
    text_lengths: list[int]
    final_logp: Tensor                  # [B, T', V+1]
    merge_plans: list[MergePlan] | None = None
    decoder_logp: Tensor | None = None  # [B, U+1, V+2]
    extras: dict = field(default_factory=dict)

    def ictc_grid(self, b: int = 0) -> np.ndarray:
        return self.ictc_logp.data[b, :self.speech_lengths[b]]

    def final_grid(self, b: int = 0) -> np.ndarray:
        return self.final_logp.data[b, :self.text_lengths[b]]


def frontend_length(num_frames: int) -> int:
    return -(-num_frames // FRONTEND_FACTOR)


def pad_features(feats: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    lengths = [f.shape[0] for f in feats]
    T = FRONTEND_FACTOR * max(frontend_length(n) for n in lengths)
    out = np.zeros((len(feats), T, feats[0].shape[1]))
    for b, f in enumerate(feats):
        out[b, :len(f)] = f
    return out, [frontend_length(n) for n in lengths]


def decoder_io(token_lists: Sequence[Sequence[int]], bos: int, eos: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Padded ``[BOS] + y`` inputs, ``y + [EOS]`` targets and their lengths."""
    lens = [len(t) + 1 for t in token_lists]
    U = max(lens)
    inp = np.full((len(token_lists), U), eos, dtype=np.int64)
    tgt = np.full((len(token_lists), U), eos, dtype=np.int64)
    for b, toks in enumerate(token_lists):
        inp[b, 0] = bos
        inp[b, 1:lens[b]] = toks
        tgt[b, :lens[b] - 1] = toks
    return inp, tgt, lens


class ConvFrontend(Module):
    """Two strided convolutions (stride 3 then 2): ``[B, T, F] -> [B, T/6, D]`` (T padded to x6)."""

    def __init__(self, feat_dim: int, dim: int, rng: np.random.Generator):
        self.conv1 = Linear(3 * feat_dim, dim, rng)
        self.conv2 = Linear(2 * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, T, F = x.shape
        h = ops.unfold(x, 3, 3).reshape(B, T // 3, 3 * F)
        h = ops.silu(self.conv1(h))
        D = h.shape[-1]
        h = ops.unfold(h, 2, 2).reshape(B, T // 6, 2 * D)
        return self.conv2(h)


class ASRModel(Module):
    def __init__(self, cfg: ModelConfig, pseudo_cfg: PseudoSpeechConfig | None = None):
        cfg.validate()
        self._cfg = cfg
        self._pseudo_cfg = pseudo_cfg
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        D, V = cfg.model_dim, cfg.vocab_size
        self.frontend = ConvFrontend(cfg.feat_dim, D, rng)
        self.speech = [ConformerBlock(D, cfg.heads, cfg.ff_dim, cfg.conv_kernel, cfg.max_rel_pos, rng)
                       for _ in range(cfg.speech_layers)]
        self.ictc_head = Linear(D, V + 1, rng)
        self.self_cond = Linear(V + 1, D, rng, zero=True) if cfg.self_conditioning else None
        if cfg.text_level_type == "conformer":
            self.text_level = [ConformerBlock(D, cfg.heads, cfg.ff_dim, cfg.conv_kernel, cfg.max_rel_pos, rng)
                               for _ in range(cfg.text_level_layers)]
        else:
            self.text_level = [TransformerPPBlock(D, cfg.heads, cfg.ff_dim, cfg.max_rel_pos, rng)
                               for _ in range(cfg.text_level_layers)]
        self.final_ctc_head = Linear(D, V + 1, rng)
        if cfg.decoder_layers > 0:
            self.dec_embed = Embedding(V + 2, D, rng, scale=1.0)
            self.decoder = [DecoderBlock(D, cfg.heads, cfg.ff_dim, rng) for _ in range(cfg.decoder_layers)]
            self.dec_norm = LayerNorm(D)
            self.dec_out = Linear(D, V + 2, rng)
        else:
            self.dec_embed = None
            self.decoder = []
            self.dec_norm = None
            self.dec_out = None
        if pseudo_cfg is not None:
            prng = np.random.Generator(np.random.Philox(cfg.seed + 1))
            self.pseudo = PseudoSpeechEncoder(pseudo_cfg, V, D, D, cfg.heads, cfg.ff_dim, prng,
                                              max_rel=cfg.max_rel_pos)
        else:
            self.pseudo = None

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def pseudo_config(self) -> PseudoSpeechConfig | None:
        return self._pseudo_cfg

    # -- parameter groups -------------------------------------------------------
    def group_parameters(self, group: str) -> list[Tensor]:
        if group == "pseudo":
            return self.pseudo.non_duration_parameters() if self.pseudo is not None else []
        if group == "duration":
            return self.pseudo.duration_parameters() if self.pseudo is not None else []
        if group == "text_level":
            out = [p for blk in self.text_level for p in blk.parameters()] + self.final_ctc_head.parameters()
            return out + (self.self_cond.parameters() if self.self_cond is not None else [])
        if group == "speech":
            out = self.frontend.parameters() + [p for blk in self.speech for p in blk.parameters()]
            return out + self.ictc_head.parameters()
        if group == "decoder":
            return [p for n, p in self.named_parameters() if n.startswith("dec")]
        raise KeyError(group)

    # -- encoder ---------------------------------------------------------------
    def speech_encode_batch(self, feats: Sequence[np.ndarray]) -> tuple[Tensor, list[int], Tensor]:
        x, lengths = pad_features(feats)
        h = self.frontend(Tensor(x))
        valid = frame_mask(lengths, h.shape[1])
        h = zero_padding(h, valid)
        for blk in self.speech:
            h = blk(h, valid)
        ictc = ops.log_softmax(self.ictc_head(h))
        return h, lengths, ictc

    def text_level_batch(self, x: Tensor, lengths: Sequence[int]) -> tuple[Tensor, Tensor]:
        valid = frame_mask(lengths, x.shape[1])
        h = zero_padding(x, valid)
        for blk in self.text_level:
            h = blk(h, valid)
        return h, ops.log_softmax(self.final_ctc_head(h))

    def encode_speech(self, feats: Sequence[np.ndarray],
                      labels: Sequence[Sequence[int]] | None = None) -> EncoderOutput:
        """Speech path. With ``labels`` (training), an utterance whose merge plan
        would leave too few frames for its final CTC target is not compressed."""
        h, lengths, ictc = self.speech_encode_batch(feats)
        x = h
        if self.self_cond is not None:
            x = x + self.self_cond(ops.exp(ictc))
        plans = None
        fallbacks = 0
        text_lengths = list(lengths)
        if self._cfg.downsampling:
            plans = [merge_plan(ictc.data[b, :n], self._cfg.tau) for b, n in enumerate(lengths)]
            if labels is not None:
                keep = [p.segments >= min_frames(lab) for p, lab in zip(plans, labels)]
                fallbacks = keep.count(False)
                plans = [p if k else identity_plan(n) for p, k, n in zip(plans, keep, lengths)]
            x, text_lengths = compress_batch(x, [p.index for p in plans], lengths)
        th, final = self.text_level_batch(x, text_lengths)
        return EncoderOutput(h, lengths, ictc, th, text_lengths, final, plans,
                             extras={"compress_fallbacks": fallbacks})

    def encode_pseudo(self, frames: Tensor, lengths: Sequence[int]) -> EncoderOutput:
        th, final = self.text_level_batch(frames, lengths)
        return EncoderOutput(None, [], None, th, list(lengths), final)

    # -- decoder ---------------------------------------------------------------
    def decoder_batch(self, memory: Tensor, mem_lengths: Sequence[int], inputs: np.ndarray,
                      in_lengths: Sequence[int]) -> Tensor:
        if not self.decoder:
            raise RuntimeError("model has no decoder (decoder_layers = 0)")
        B, U = inputs.shape
        D = self._cfg.model_dim
        y = self.dec_embed(inputs) * float(np.sqrt(D)) + Tensor(sinusoidal_positions(U, D))
        y_valid = frame_mask(in_lengths, U)
        m_valid = frame_mask(mem_lengths, memory.shape[1])
        for blk in self.decoder:
            y = blk(y, y_valid, memory, m_valid)
        return ops.log_softmax(self.dec_out(self.dec_norm(y)))

    def forward_batch(self, feats: Sequence[np.ndarray] | None = None, pseudo: tuple[Tensor, Sequence[int]] | None = None,
                      labels: Sequence[Sequence[int]] | None = None) -> EncoderOutput:
        if (feats is None) == (pseudo is None):
            raise ValueError("pass exactly one of speech features or pseudo-speech frames")
        out = self.encode_speech(feats, labels) if feats is not None else self.encode_pseudo(*pseudo)
        if labels is not None and self.decoder:
            inp, tgt, lens = decoder_io(labels, self._cfg.bos, self._cfg.eos)
            out.decoder_logp = self.decoder_batch(out.text_hidden, out.text_lengths, inp, lens)
            out.extras["decoder_targets"] = tgt
            out.extras["decoder_lengths"] = lens
        return out

    # -- single-utterance operations ------------------------------------------
    def conv_frontend(self, features: np.ndarray) -> Tensor:
        x, lengths = pad_features([np.asarray(features)])
        return self.frontend(Tensor(x))[0]

    def speech_encode(self, features: np.ndarray) -> tuple[Tensor, Tensor]:
        h, lengths, ictc = self.speech_encode_batch([np.asarray(features)])
        return h[0], ictc[0]

    def text_level_encode(self, hidden: Tensor, ictc_probs: Tensor | None = None,
                          mode: str = "speech") -> tuple[Tensor, Tensor]:
        """Text-level encoder on one ``[T', D]`` sequence.

        With self-conditioning on, speech-mode inputs need the (length-matched)
        intermediate CTC probabilities; pseudo-mode inputs carry none.
        """
        x = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
        if self.self_cond is not None and mode == "speech":
            if ictc_probs is None:
                raise ValueError("self-conditioning is on: intermediate CTC probabilities are required")
            probs = ictc_probs if isinstance(ictc_probs, Tensor) else Tensor(ictc_probs)
            if probs.shape[0] != x.shape[0]:
                raise ValueError(f"ictc_probs length {probs.shape[0]} != hidden length {x.shape[0]}")
            x = x + self.self_cond(probs)
        th, final = self.text_level_batch(x.reshape(1, *x.shape), [x.shape[0]])
        return th[0], final[0]

    def decode_step(self, text_hidden, prefix: Sequence[int]) -> np.ndarray:
        """Next-token log-probs ``[V+2]`` after ``prefix`` (index V is BOS, V+1 is EOS)."""
        return self.decode_steps(text_hidden, [list(prefix)])[0]

    def decode_steps(self, text_hidden, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Batched :meth:`decode_step` over several prefixes sharing one encoder output."""
        if not self.decoder:
            raise RuntimeError("model has no decoder (decoder_layers = 0)")
        th = text_hidden if isinstance(text_hidden, Tensor) else Tensor(text_hidden)
        B = len(prefixes)
        mem = Tensor(np.broadcast_to(th.data, (B,) + th.shape).copy())
        lens = [len(p) + 1 for p in prefixes]
        inp = np.full((B, max(lens)), self._cfg.eos, dtype=np.int64)
        for b, p in enumerate(prefixes):
            inp[b, 0] = self._cfg.bos
            inp[b, 1:lens[b]] = p
        logp = self.decoder_batch(mem, [th.shape[0]] * B, inp, lens).data
        return np.stack([logp[b, lens[b] - 1] for b in range(B)])

    def forward_full(self, features: np.ndarray | None = None, pseudo: Tensor | None = None,
                     mode: str = "speech", labels: Sequence[int] | None = None) -> EncoderOutput:
        if mode not in ("speech", "pseudo"):
            raise ValueError(f"mode must be speech or pseudo, got {mode!r}")
        if mode == "speech" and (features is None or pseudo is not None):
            raise ValueError("speech mode takes features only")
        if mode == "pseudo" and (pseudo is None or features is not None):
            raise ValueError("pseudo mode takes pseudo-speech frames only")
        lab = None if labels is None else [list(labels)]
        if mode == "speech":
            return self.forward_batch(feats=[np.asarray(features)], labels=lab)
        p = pseudo if isinstance(pseudo, Tensor) else Tensor(pseudo)
        return self.forward_batch(pseudo=(p.reshape(1, *p.shape), [p.shape[0]]), labels=lab)

    # -- persistence -----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model": dataclasses.asdict(self._cfg),
                "pseudo": None if self._pseudo_cfg is None else dataclasses.asdict(self._pseudo_cfg)}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> ASRModel:
        state, meta = load_checkpoint(path)
        pcfg = None if meta.get("pseudo") is None else PseudoSpeechConfig(**meta["pseudo"])
        model = cls(ModelConfig(**meta["model"]), pcfg)
        model.load_state_dict(state)
        return model
