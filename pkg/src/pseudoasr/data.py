"""Deterministic synthetic corpora standing in for paired speech, text-only data and TTS.

Token sequences come from a seeded bigram model (no immediate repeats).
An "articulation oracle" turns tokens into features: every token occupies a
whole number of front-end blocks (``frame_quantum`` frames each), each frame
being the token's fixed prototype vector plus Gaussian noise.
Tokens come in confusable pairs (2k, 2k+1) whose prototypes differ only by a
small offset, so acoustics alone leave ambiguity that sentence context can
resolve.

All randomness uses numpy's Philox counter-based generator, keyed by
``numpy.random.SeedSequence`` entropy ``[seed, stream, index]`` so every
utterance can be regenerated on its own.

Feature files (``.f32``) are little-endian::

    offset size field
    0      4    magic b"PSF1"
    4      2    uint16 T (frames)
    6      2    uint16 F (feature dim)
    8      4*T*F float32 payload, row-major [T, F]

The manifest is JSON lines ``{"id", "split", "tokens": [words],
"feature_file": relative path or null}`` next to ``corpus.json`` holding the
generator config and the vocabulary.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

SPLITS = ("train_paired", "train_text", "dev", "test")
_STREAMS = {"bigram": 0, "oracle": 1, "train_paired": 2, "train_text": 3, "dev": 4, "test": 5, "tts": 6}
_ID_PREFIX = {"train_paired": "p", "train_text": "x", "dev": "d", "test": "t"}
FEATURE_MAGIC = b"PSF1"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ToyCorpusConfig:
    seed: int = 1234
    vocab_size: int = 16
    num_paired: int = 200
    num_text_only: int = 16000
    num_dev: int = 100
    num_test: int = 100
    min_len: int = 4
    max_len: int = 10
    frame_range: tuple[int, int] = (6, 18)
    frame_quantum: int = 6
    feat_dim: int = 16
    noise: float = 0.6
    pair_offset: float = 0.6
    successors: int = 3
    bigram_smoothing: float = 0.05

    def __post_init__(self) -> None:
        lo, hi = self.frame_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad frame range {self.frame_range}")
        if lo < self.frame_quantum or lo % self.frame_quantum or hi % self.frame_quantum:
            raise ValueError("frame range bounds must be multiples of frame_quantum")
        if self.vocab_size < 2 or self.successors >= self.vocab_size:
            raise ValueError("need vocab_size >= 2 and successors < vocab_size")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


@dataclass
class Utterance:
    id: str
    tokens: list[int]
    split: str
    features: np.ndarray | None = None


@dataclass
class Corpus:
    config: ToyCorpusConfig
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]

    def words(self, tokens: Sequence[int]) -> list[str]:
        return [token_word(t) for t in tokens]


@dataclass
class ToyCorpus(Corpus):
    """A generated corpus plus generator-side gold token durations (for tests only)."""

    gold: dict[str, list[int]] = field(default_factory=dict)

    def public(self) -> Corpus:
        return Corpus(self.config, self.splits)


def token_word(t: int) -> str:
    return f"w{int(t):02d}"


def word_token(w: str) -> int:
    if not (w.startswith("w") and w[1:].isdigit()):
        raise ManifestError(f"not a toy word: {w!r}")
    return int(w[1:])


def _rng(cfg: ToyCorpusConfig, stream: str, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([cfg.seed, _STREAMS[stream], index])
    return np.random.Generator(np.random.Philox(ss))


@lru_cache(maxsize=16)
def bigram_model(cfg: ToyCorpusConfig) -> tuple[np.ndarray, np.ndarray]:
    """(initial distribution [V], transition matrix [V, V]) with a zero diagonal."""
    V = cfg.vocab_size
    rng = _rng(cfg, "bigram")
    trans = np.zeros((V, V))
    for v in range(V):
        others = np.array([u for u in range(V) if u != v])
        succ = rng.choice(others, size=cfg.successors, replace=False)
        w = rng.dirichlet(np.full(cfg.successors, 2.0))
        trans[v, succ] = w
        trans[v, others] = (1 - cfg.bigram_smoothing) * trans[v, others] + cfg.bigram_smoothing / len(others)
    init = np.full(V, 1.0 / V)
    return init, trans


@lru_cache(maxsize=16)
def prototypes(cfg: ToyCorpusConfig) -> np.ndarray:
    """Prototype vectors ``[V, F]``; tokens 2k and 2k+1 share a base vector."""
    V, F = cfg.vocab_size, cfg.feat_dim
    rng = _rng(cfg, "oracle")
    base = rng.standard_normal(((V + 1) // 2, F))
    offs = rng.standard_normal((V, F))
    offs *= cfg.pair_offset / np.linalg.norm(offs, axis=1, keepdims=True)
    return base[np.arange(V) // 2] + offs


def sample_tokens(cfg: ToyCorpusConfig, rng: np.random.Generator) -> list[int]:
    init, trans = bigram_model(cfg)
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    toks = [int(rng.choice(cfg.vocab_size, p=init))]
    for _ in range(n - 1):
        toks.append(int(rng.choice(cfg.vocab_size, p=trans[toks[-1]])))
    return toks


def articulate_with_durations(tokens: Sequence[int], cfg: ToyCorpusConfig,
                              rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    proto = prototypes(cfg)
    q = cfg.frame_quantum
    lo, hi = cfg.frame_range[0] // q, cfg.frame_range[1] // q
    rows, durs = [], []
    for t in tokens:
        if not 0 <= t < cfg.vocab_size:
            raise ValueError(f"token {t} outside vocabulary of size {cfg.vocab_size}")
        d = int(rng.integers(lo, hi + 1)) * q
        rows.append(np.repeat(proto[t][None], d, axis=0))
        durs.append(d)
    feats = np.concatenate(rows, axis=0) if rows else np.zeros((0, cfg.feat_dim))
    if cfg.noise > 0:
        feats = feats + cfg.noise * rng.standard_normal(feats.shape)
    # stored on disk as float32; round here so a save/load round trip is exact
    return feats.astype(np.float32).astype(np.float64), durs


def articulate(tokens: Sequence[int], cfg: ToyCorpusConfig, rng: np.random.Generator) -> np.ndarray:
    """Toy TTS oracle: token sequence -> ``[T, F]`` features."""
    return articulate_with_durations(tokens, cfg, rng)[0]


def tts_features(utt_id: str, index: int, tokens: Sequence[int], cfg: ToyCorpusConfig) -> np.ndarray:
    """Deterministic synthetic speech for a text-only utterance."""
    return articulate(tokens, cfg, _rng(cfg, "tts", index))


def gen_corpus(cfg: ToyCorpusConfig) -> ToyCorpus:
    counts = {"train_paired": cfg.num_paired, "train_text": cfg.num_text_only,
              "dev": cfg.num_dev, "test": cfg.num_test}
    corpus = ToyCorpus(cfg)
    for split in SPLITS:
        utts = []
        for i in range(counts[split]):
            rng = _rng(cfg, split, i)
            toks = sample_tokens(cfg, rng)
            uid = f"{_ID_PREFIX[split]}{i:06d}"
            feats = None
            if split != "train_text":
                feats, durs = articulate_with_durations(toks, cfg, rng)
                corpus.gold[uid] = durs
            utts.append(Utterance(uid, toks, split, feats))
        corpus.splits[split] = utts
    return corpus


# -- files -------------------------------------------------------------------

def write_features(path: str | Path, feats: np.ndarray) -> None:
    T, F = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<HH", T, F))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != FEATURE_MAGIC:
        raise ManifestError(f"{path}: bad feature file header (magic mismatch)")
    T, F = struct.unpack("<HH", blob[4:8])
    need = 8 + 4 * T * F
    if len(blob) != need:
        raise ManifestError(f"{path}: truncated payload ({len(blob)} bytes, expected {need})")
    return np.frombuffer(blob[8:], dtype="<f4").reshape(T, F).astype(np.float64)


def save_manifest(corpus: Corpus, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    meta = {"config": dataclasses.asdict(corpus.config),
            "vocab": [token_word(v) for v in range(corpus.config.vocab_size)]}
    (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    path = out / "manifest.jsonl"
    with open(path, "w") as fh:
        for split in SPLITS:
            for u in corpus.splits.get(split, []):
                ff = None
                if u.features is not None:
                    ff = f"feats/{u.id}.f32"
                    write_features(out / ff, u.features)
                rec = {"id": u.id, "split": split, "tokens": corpus.words(u.tokens), "feature_file": ff}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | Path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    meta = json.loads((root / "corpus.json").read_text())
    cdict = dict(meta["config"])
    cdict["frame_range"] = tuple(cdict["frame_range"])
    corpus = Corpus(ToyCorpusConfig(**cdict), {s: [] for s in SPLITS})
    missing = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            split = rec.get("split")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            feats = None
            ff = rec.get("feature_file")
            if ff is not None:
                fpath = root / ff
                if not fpath.exists():
                    missing.append(rec["id"])
                    continue
                feats = read_features(fpath)
            elif split != "train_text":
                missing.append(rec["id"])
                continue
            toks = [word_token(w) for w in rec["tokens"]]
            corpus.splits[split].append(Utterance(rec["id"], toks, split, feats))
    if missing:
        raise ManifestError(f"{path}: missing feature files for paired utterances: {', '.join(missing)}")
    return corpus
