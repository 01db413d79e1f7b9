"""Threshold-gated CTC compression: merge confident repeated frames and mean-pool them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import Tensor, as_tensor, ops


@dataclass
class MergePlan:
    mask: np.ndarray   # bool [T]; mask[0] is always False
    index: np.ndarray  # int [T], 1-based segment ids
    segments: int


def merge_mask(grid, tau: float) -> np.ndarray:
    """Frame t merges into t-1 when both argmaxes agree and both are at least ``tau`` likely."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    best = np.argmax(lp, axis=-1)
    conf = np.exp(np.max(lp, axis=-1)) >= tau
    mask = np.zeros(lp.shape[0], dtype=bool)
    mask[1:] = (best[1:] == best[:-1]) & conf[1:] & conf[:-1]
    return mask


def merged_index(mask: Sequence[bool]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ValueError("merged_index needs at least one frame")
    step = (~mask).astype(np.int64)
    step[0] = 1  # i_1 = 1 regardless of mask[0]
    return np.cumsum(step)


def merge_plan(grid, tau: float) -> MergePlan:
    mask = merge_mask(grid, tau)
    index = merged_index(mask)
    return MergePlan(mask=mask, index=index, segments=int(index[-1]))


def identity_plan(num_frames: int) -> MergePlan:
    """A plan that merges nothing."""
    return MergePlan(mask=np.zeros(num_frames, dtype=bool), index=np.arange(1, num_frames + 1),
                     segments=num_frames)


def averaging_matrix(index: Sequence[int], num_frames: int | None = None) -> np.ndarray:
    """``[segments, T]`` matrix whose row i averages the frames with index i+1."""
    index = np.asarray(index, dtype=np.int64)
    T = len(index) if num_frames is None else num_frames
    if len(index) != T:
        raise ValueError(f"index length {len(index)} != {T} frames")
    segs = int(index.max())
    A = np.zeros((segs, T))
    A[index - 1, np.arange(T)] = 1.0
    return A / A.sum(axis=1, keepdims=True)


def compress(hidden, index: Sequence[int]) -> Tensor:
    """Mean of ``hidden`` rows per segment: ``[T, D] -> [segments, D]``."""
    h = as_tensor(hidden)
    if h.ndim != 2 or h.shape[0] != len(index):
        raise ValueError(f"compress: hidden {h.shape} does not match index of length {len(index)}")
    return ops.matmul(Tensor(averaging_matrix(index)), h)


def compress_batch(hidden: Tensor, indices: Sequence[np.ndarray], lengths: Sequence[int]) -> tuple[Tensor, list[int]]:
    """Padded-batch compression ``[B, T, D] -> [B, S_max, D]`` with per-utterance segment counts."""
    B, T = hidden.shape[0], hidden.shape[1]
    segs = [int(np.max(ix)) for ix in indices]
    A = np.zeros((B, max(segs), T))
    for b, (ix, n) in enumerate(zip(indices, lengths)):
        A[b, :segs[b], :n] = averaging_matrix(ix, n)
    return ops.matmul(Tensor(A), hidden), segs
