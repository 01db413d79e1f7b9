"""Joint CTC prefix / attention-decoder beam search and word error rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ctc import ctc_greedy
from .numcore import no_grad

NEG_INF = -np.inf

# prefix -> (log p(prefix, ending in blank), log p(prefix, ending in its last label))
PrefixState = dict[tuple[int, ...], tuple[float, float]]
NextTokenFn = Callable[[list[tuple[int, ...]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    ctc_score: float
    aed_score: float


def _lae(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def _lmax(a: float, b: float) -> float:
    return float(max(a, b))


SCORINGS = {"sum": _lae, "viterbi": _lmax}


def _reducer(scoring: str):
    if scoring not in SCORINGS:
        raise ValueError(f"ctc scoring must be one of {sorted(SCORINGS)}, got {scoring!r}")
    return SCORINGS[scoring]


def ctc_initial_state() -> PrefixState:
    return {(): (0.0, NEG_INF)}


def ctc_prefix_extend(state: PrefixState, frame: np.ndarray, blank: int,
                      tokens: Sequence[int] | None = None, scoring: str = "sum") -> PrefixState:
    """Advance every prefix in ``state`` by one frame of log-probs ``[V+1]``.

    Each prefix may stay (blank, or a repeat of its last label) or grow by
    one label from ``tokens`` (default: every non-blank symbol). ``"sum"``
    scoring adds path probabilities; ``"viterbi"`` keeps the best path only.
    """
    red = _reducer(scoring)
    frame = np.asarray(frame, dtype=float)
    if tokens is None:
        tokens = [k for k in range(frame.shape[0]) if k != blank]
    new: dict[tuple[int, ...], list[float]] = {}

    def add(prefix, pb, pnb):
        cur = new.setdefault(prefix, [NEG_INF, NEG_INF])
        cur[0] = red(cur[0], pb)
        cur[1] = red(cur[1], pnb)

    for prefix, (pb, pnb) in state.items():
        total = red(pb, pnb)
        add(prefix, total + frame[blank], NEG_INF)
        if prefix:
            add(prefix, NEG_INF, pnb + frame[prefix[-1]])
        for c in tokens:
            if prefix and c == prefix[-1]:
                add(prefix + (c,), NEG_INF, pb + frame[c])
            else:
                add(prefix + (c,), NEG_INF, total + frame[c])
    return {k: (v[0], v[1]) for k, v in new.items()}


def prefix_beam_search(grid: np.ndarray, beam: int, blank: int, next_token: NextTokenFn | None = None,
                       eos: int | None = None, lambda_ctc: float = 1.0, lambda_aed: float = 0.0,
                       length_reward: float = 0.0, nbest: int = 1, scoring: str = "sum") -> list[Hypothesis]:
    """Frame-synchronous beam search over CTC prefixes.

    ``next_token(prefixes)`` returns decoder log-probs ``[len(prefixes), V+2]``
    for the next symbol; the score of a prefix is
    ``lambda_ctc * ctc + lambda_aed * aed + length_reward * len``. After the
    last frame every surviving prefix is closed with the decoder's EOS
    log-prob. Ties are broken by the lexicographically smaller token tuple.

    With ``scoring="viterbi"`` and beam 1 the result is the greedy best path.
    """
    red = _reducer(scoring)
    if beam < 1:
        raise ValueError("beam must be >= 1")
    grid = np.asarray(grid, dtype=float)
    use_aed = next_token is not None and lambda_aed > 0
    if use_aed and eos is None:
        raise ValueError("eos id required with a decoder score")
    aed: dict[tuple[int, ...], float] = {(): 0.0}
    dist: dict[tuple[int, ...], np.ndarray] = {}

    def ensure_dist(prefixes):
        todo = [p for p in prefixes if p not in dist]
        if todo:
            out = next_token(todo)
            for p, row in zip(todo, out):
                dist[p] = np.asarray(row, dtype=float)

    def combined(prefix, ctc):
        s = lambda_ctc * ctc + length_reward * len(prefix)
        if use_aed:
            s += lambda_aed * aed[prefix]
        return s

    state = ctc_initial_state()
    for t in range(grid.shape[0]):
        if use_aed:
            ensure_dist(list(state))
        new = ctc_prefix_extend(state, grid[t], blank, scoring=scoring)
        if use_aed:
            for p in new:
                if p not in aed:
                    aed[p] = aed[p[:-1]] + dist[p[:-1]][p[-1]]
        ranked = sorted(new.items(), key=lambda kv: (-combined(kv[0], red(*kv[1])), kv[0]))
        state = dict(ranked[:beam])
    hyps = []
    if use_aed:
        ensure_dist(list(state))
    for p, (pb, pnb) in state.items():
        ctc = red(pb, pnb)
        a = aed[p] + dist[p][eos] if use_aed else 0.0
        score = lambda_ctc * ctc + length_reward * len(p) + (lambda_aed * a if use_aed else 0.0)
        hyps.append(Hypothesis(p, score, ctc, a))
    hyps.sort(key=lambda h: (-h.score, h.tokens))
    return hyps[:nbest]


def beam_search(model, features: np.ndarray, beam: int = 4, lambda_ctc: float = 0.5, lambda_aed: float = 0.5,
                ctc_head: str = "final", length_reward: float = 0.0, nbest: int = 1,
                scoring: str = "sum") -> list[Hypothesis]:
    """Decode one utterance. Models without a decoder ignore ``lambda_aed``."""
    with no_grad():
        out = model.forward_full(features)
    return _search_output(model, out, 0, beam, lambda_ctc, lambda_aed, ctc_head, length_reward, nbest, scoring)


def _search_output(model, out, b, beam, lambda_ctc, lambda_aed, ctc_head, length_reward, nbest, scoring):
    if ctc_head == "final":
        grid = out.final_grid(b)
    elif ctc_head == "speech":
        grid = out.ictc_grid(b)
    else:
        raise ValueError(f"ctc_head must be final or speech, got {ctc_head!r}")
    cfg = model.config
    next_token = None
    if model.decoder and lambda_aed > 0:
        th = out.text_hidden.data[b, :out.text_lengths[b]]

        def next_token(prefixes):
            with no_grad():
                return model.decode_steps(th, [list(p) for p in prefixes])
    return prefix_beam_search(grid, beam, cfg.blank, next_token, cfg.eos, lambda_ctc,
                              lambda_aed if next_token is not None else 0.0, length_reward, nbest, scoring)


def decode_batch(model, feats: Sequence[np.ndarray], beam: int = 4, lambda_ctc: float = 0.5,
                 lambda_aed: float = 0.5, ctc_head: str = "final", length_reward: float = 0.0,
                 nbest: int = 1, scoring: str = "sum") -> list[list[Hypothesis]]:
    """Beam search for several utterances sharing one batched encoder pass."""
    with no_grad():
        out = model.forward_batch(feats=list(feats))
    return [_search_output(model, out, b, beam, lambda_ctc, lambda_aed, ctc_head, length_reward, nbest, scoring)
            for b in range(len(feats))]


def greedy_batch(model, feats: Sequence[np.ndarray], ctc_head: str = "final") -> list[list[int]]:
    """Best-path CTC decoding (argmax, collapse repeats, drop blanks)."""
    with no_grad():
        out = model.forward_batch(feats=list(feats))
    grids = [out.final_grid(b) if ctc_head == "final" else out.ictc_grid(b) for b in range(len(feats))]
    return [ctc_greedy(g) for g in grids]


# -- word error rate ------------------------------------------------------------

def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = np.arange(len(ref) + 1)
    for i, h in enumerate(hyp, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return int(prev[-1])


def wer(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Total edit distance over total reference length."""
    errs = sum(edit_distance(h, r) for h, r in pairs)
    words = sum(len(r) for _, r in pairs)
    if words == 0:
        raise ValueError("WER is undefined for an empty reference")
    return errs / words
