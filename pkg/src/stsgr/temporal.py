"""Inter-frame aggregation of per-frame graph memories."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, xavier_uniform
from .tensor import Tensor


class AlignmentError(ValueError):
    pass


STAGES = ("raw", "aggregated", "audio", "projected")


@dataclass
class VisualMemorySequence:
    """Frame memories of one video at a given pipeline stage."""

    frames: Tensor
    audio: np.ndarray | None = None
    stage: str = "raw"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.frames.shape[0] < 1:
            raise ValueError("memory sequence with no frames")

    def augmented(self) -> VisualMemorySequence:
        if self.audio is None:
            return self
        return replace(self, frames=audio_augment(self.frames, self.audio), stage="audio")


def window_indices(lengths: Sequence[int], tau: int) -> np.ndarray:
    """(sum(lengths), tau) frame indices of each centered window, clamped to its video.

    Videos are laid out back to back, so indices are global row numbers.
    """
    if tau < 1 or tau % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {tau}")
    half = tau // 2
    rows, start = [], 0
    offsets = np.arange(-half, half + 1)
    for n in lengths:
        if n < 1:
            raise ValueError("video with no frames")
        centers = np.arange(n)[:, None]
        rows.append(start + np.clip(centers + offsets, 0, n - 1))
        start += n
    return np.concatenate(rows, axis=0)


class WindowAttention(Module):
    """beta = softmax(gamma . tanh(W_tau f)) over window columns; v'_c = sum_t beta_t f_t."""

    def __init__(self, d_mem: int, tau: int, rng: np.random.Generator):
        if tau < 1 or tau % 2 == 0:
            raise ValueError(f"window size must be a positive odd integer, got {tau}")
        self.tau = tau
        self.w_window = T.parameter(xavier_uniform(rng, d_mem, d_mem))
        self.gamma = T.parameter(xavier_uniform(rng, 1, d_mem, (d_mem,)))

    def weights(self, windows: Tensor) -> Tensor:
        """Attention over the window axis for ``windows`` of shape (..., tau, d_mem)."""
        hidden = T.tanh(T.matmul(windows, T.transpose(self.w_window)))
        return T.softmax(T.sum_(hidden * self.gamma, axis=-1), axis=-1)

    def aggregate_window(self, F: Tensor) -> Tensor:
        """Center-frame update for one window given as a (d_mem, tau) matrix."""
        if F.ndim != 2 or F.shape[1] != self.tau:
            raise ValueError(f"window matrix must have {self.tau} columns, got shape {F.shape}")
        beta = self.weights(T.transpose(F))
        return T.reshape(T.matmul(F, T.reshape(beta, (self.tau, 1))), (F.shape[0],))

    def __call__(self, memories: Tensor, lengths: Sequence[int]) -> Tensor:
        """Aggregate every frame of back-to-back videos; output keeps the input shape."""
        if self.tau == 1:
            return memories
        idx = window_indices(lengths, self.tau)
        windows = T.take(memories, idx)
        beta = self.weights(windows)
        return T.sum_(windows * T.reshape(beta, beta.shape + (1,)), axis=1)


def aggregate_sequence(memories: Tensor, p: WindowAttention) -> Tensor:
    return p(memories, [memories.shape[0]])


def audio_augment(memories: Tensor, audio: np.ndarray | Tensor | None) -> Tensor:
    """Append the temporally aligned audio vector to each frame memory."""
    if audio is None:
        return memories
    audio = T.as_tensor(audio)
    if audio.shape[0] != memories.shape[0]:
        raise AlignmentError(f"{audio.shape[0]} audio frames for {memories.shape[0]} video frames")
    return T.concat([memories, audio], axis=1)


class MemoryProjection(Module):
    """Single affine layer from (audio-augmented) memories to the model width."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.linear = Linear(d_in, d_h, rng)
        self.d_in = d_in

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"memory width {x.shape[-1]} does not match projection input {self.d_in}")
        return self.linear(x)
