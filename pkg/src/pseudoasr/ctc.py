"""CTC dynamic programming: loss, greedy decoding, forced alignment, durations.

Grids are ``[T, V+1]`` log-posteriors with the blank at the last index ``V``.
All recursions run in log space over the blank-interleaved label sequence
``(blank, y1, blank, y2, ..., yN, blank)`` of length ``S = 2N + 1``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numcore import Function, Tensor, as_tensor

NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The label sequence cannot be emitted in the available frames."""


class AlignmentMismatchError(ValueError):
    """A path does not collapse to the expected labels."""


def min_frames(labels: Sequence[int]) -> int:
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def check_feasible(num_frames: int, labels: Sequence[int], utt_id: str | None = None) -> None:
    need = min_frames(labels)
    if num_frames < need:
        where = f" (utterance {utt_id})" if utt_id is not None else ""
        raise CTCInfeasibleError(
            f"CTC infeasible{where}: {num_frames} frames < {need} required for {len(labels)} labels")


def collapse(path: Sequence[int], blank: int) -> list[int]:
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def _extended(labels: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved labels and the per-state "may skip from s-2" flags."""
    n = len(labels)
    ext = np.full(2 * n + 1, blank, dtype=np.int64)
    ext[1::2] = np.asarray(labels, dtype=np.int64)
    skip = np.zeros(2 * n + 1, dtype=bool)
    for s in range(3, 2 * n + 1, 2):
        skip[s] = ext[s] != ext[s - 2]
    return ext, skip


def _forward_backward(lp: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Return ``(log Z, d logZ / d lp)`` for one grid ``lp [T, V+1]``."""
    T, V1 = lp.shape
    blank = V1 - 1
    ext, skip = _extended(labels, blank)
    S = len(ext)
    emit = lp[:, ext]  # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_z = alpha[T - 1, S - 1]
    if S > 1:
        log_z = np.logaddexp(log_z, alpha[T - 1, S - 2])
    occ = np.exp(alpha + beta - log_z)  # [T, S]
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] += occ[:, s]
    return float(log_z), grad


class _CTCLoss(Function):
    """Per-utterance negative log-likelihood for a padded batch ``[B, T, V+1]``."""

    name = "ctc_loss"

    def forward(self, lp):
        lengths, labels = self.kwargs["lengths"], self.kwargs["labels"]
        ids = self.kwargs.get("ids")
        if lp.ndim != 3 or len(lengths) != lp.shape[0] or len(labels) != lp.shape[0]:
            raise ValueError(f"ctc_loss: grid shape {lp.shape} vs {len(lengths)} lengths")
        self.in_shape = lp.shape
        out = np.zeros(lp.shape[0])
        self.grads = []
        for b, (n, lab) in enumerate(zip(lengths, labels)):
            check_feasible(int(n), lab, None if ids is None else ids[b])
            log_z, g = _forward_backward(lp[b, :n], lab)
            out[b] = -log_z
            self.grads.append(g)
        return out

    def backward(self, g):
        out = np.zeros(self.in_shape)
        for b, gb in enumerate(self.grads):
            out[b, :gb.shape[0]] = -g[b] * gb
        return (out,)


def ctc_loss_batch(log_probs: Tensor, lengths: Sequence[int], labels: Sequence[Sequence[int]],
                   ids: Sequence[str] | None = None) -> Tensor:
    """Vector of per-utterance CTC losses ``[B]``; differentiable w.r.t. ``log_probs``."""
    return _CTCLoss.apply(log_probs, lengths=[int(n) for n in lengths],
                          labels=[list(map(int, lab)) for lab in labels],
                          ids=None if ids is None else list(ids))


def ctc_loss(grid, labels: Sequence[int]) -> Tensor:
    """``-log sum_{paths collapsing to labels} prod_t p_t(path_t)`` for one ``[T, V+1]`` grid."""
    g = as_tensor(grid)
    if g.ndim != 2:
        raise ValueError(f"ctc_loss expects a [T, V+1] grid, got {g.shape}")
    return ctc_loss_batch(g.reshape(1, *g.shape), [g.shape[0]], [labels])[0]


def ctc_greedy(grid) -> list[int]:
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    return collapse(np.argmax(lp, axis=-1), lp.shape[-1] - 1)


def ctc_forced_align(grid, labels: Sequence[int]) -> list[int]:
    """Most probable frame path collapsing to ``labels`` (Viterbi).

    Ties go to the path that emits blank at the earliest differing frame;
    between two non-blank continuations the one that stays on the current
    label wins.
    """
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    T, V1 = lp.shape
    blank = V1 - 1
    labels = list(map(int, labels))
    check_feasible(T, labels)
    ext, skip = _extended(labels, blank)
    S = len(ext)
    emit = lp[:, ext]

    # best[t, s]: best log-prob of a suffix path occupying state s at frame t
    best = np.full((T, S), NEG_INF)
    best[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        best[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = best[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.maximum(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.maximum(acc[:-2], nxt[2:]), acc[:-2])
        best[t] = acc + emit[t]

    def choose(t: int, cands: list[int]) -> int:
        top = max(best[t, c] for c in cands)
        tied = [c for c in cands if best[t, c] == top]
        # blank states are even; prefer them, then the lowest state index
        return min(tied, key=lambda c: (c % 2, c))

    s = choose(0, [0, 1] if S > 1 else [0])
    path = [int(ext[s])]
    for t in range(1, T):
        cands = [s]
        if s + 1 < S:
            cands.append(s + 1)
        if s + 2 < S and skip[s + 2]:
            cands.append(s + 2)
        s = choose(t, cands)
        path.append(int(ext[s]))
    return path


def path_log_prob(grid, path: Sequence[int]) -> float:
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    return float(sum(lp[t, int(k)] for t, k in enumerate(path)))


def durations_from_alignment(path: Sequence[int], labels: Sequence[int], blank: int) -> tuple[list[int], list[int]]:
    """Split a frame path into per-label and per-blank-slot durations.

    ``label_durs[i]`` counts the frames of the i-th label segment and
    ``blank_durs[i]`` the blank frames just before label i (the last entry
    holds trailing blanks).
    """
    labels = list(map(int, labels))
    if collapse(path, blank) != labels:
        raise AlignmentMismatchError(
            f"path collapses to {collapse(path, blank)}, expected {labels}")
    label_durs: list[int] = []
    blank_durs = [0]
    prev = None
    for p in map(int, path):
        if p == blank:
            blank_durs[-1] += 1
        elif p == prev:
            label_durs[-1] += 1
        else:
            label_durs.append(1)
            blank_durs.append(0)
        prev = p
    return label_durs, blank_durs
