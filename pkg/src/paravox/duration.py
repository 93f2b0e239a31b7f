"""Two-headed duration decoder and its losses.

Predicts a non-zero gate probability and a continuous duration in seconds per
token.  At inference the gate threshold zeroes durations, and seconds become
integer frames via cumulative rounding so the utterance length is preserved
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as pt
from .blocks import LConvBlock
from .errors import DegenerateSynthesisError, ShapeError
from .module import Linear, Module, ModuleList
from .tensor import Tensor

GATE_THRESHOLD = 0.99


@dataclass
class DurationPrediction:
    p_z: Tensor      # [B, N] gate probability in (0, 1)
    logits: Tensor   # [B, N] pre-sigmoid gate logits (kept for a stable loss)
    seconds: Tensor  # [B, N] softplus output, > 0
    hidden: Tensor   # [B, N, d] last block activation, consumed by the upsampler


@dataclass
class DurationTarget:
    frames: np.ndarray   # [B, N] non-negative ints
    seconds: np.ndarray  # frames / frame_rate
    nonzero: np.ndarray  # frames > 0

    @classmethod
    def from_frames(cls, frames: np.ndarray, frame_rate: float) -> "DurationTarget":
        frames = np.asarray(frames, dtype=int)
        if np.any(frames < 0):
            raise ShapeError("duration targets must be non-negative frame counts")
        return cls(frames=frames, seconds=frames / float(frame_rate), nonzero=frames > 0)


class DurationPredictor(Module):
    def __init__(self, d_in: int, heads: int, rng: np.random.Generator,
                 blocks: int = 4, kernel_size: int = 3, dropout: float = 0.1):
        self.blocks = ModuleList(
            LConvBlock(d_in, heads, kernel_size, rng, dropout) for _ in range(blocks))
        self.gate_proj = Linear(d_in, 1, rng)
        self.seconds_proj = Linear(d_in, 1, rng)

    def __call__(self, conditioned: Tensor, token_mask=None,
                 training: bool = False, rng=None) -> DurationPrediction:
        x = conditioned
        for block in self.blocks:
            x = block(x, token_mask, training, rng)
        b, n, _ = x.shape
        logits = pt.reshape(self.gate_proj(x), (b, n))
        seconds = pt.softplus(pt.reshape(self.seconds_proj(x), (b, n)))
        return DurationPrediction(pt.sigmoid(logits), logits, seconds, x)


def finalize_durations(p_z: np.ndarray, seconds: np.ndarray, frame_rate: float,
                       token_mask=None, threshold: float = GATE_THRESHOLD) -> np.ndarray:
    """Gate and quantize predicted seconds to integer frames.

    Seconds are zeroed where the gate probability falls below the threshold,
    then converted with cumulative rounding (round half up), so the total
    frame count equals round(rate * total gated seconds) exactly.
    """
    p_z = np.asarray(p_z, dtype=np.float64)
    seconds = np.asarray(seconds, dtype=np.float64)
    gated = np.where(p_z < threshold, 0.0, seconds)
    if token_mask is not None:
        gated = gated * np.asarray(token_mask, dtype=np.float64)
    cum = np.cumsum(gated, axis=-1) * float(frame_rate)
    rounded = np.floor(cum + 0.5)
    frames = np.diff(rounded, axis=-1, prepend=0.0).astype(int)
    totals = frames.sum(axis=-1)
    if np.any(totals == 0):
        bad = np.argwhere(totals == 0).reshape(-1)
        raise DegenerateSynthesisError(
            f"every token gated to zero duration for utterance index(es) {bad.tolist()}")
    return frames


def duration_loss(pred: DurationPrediction, target: DurationTarget, token_mask=None):
    """(cross-entropy, L1) sums over valid tokens; combine as ce + l1 before 1/N."""
    if pred.seconds.shape != target.frames.shape:
        raise ShapeError(f"prediction {pred.seconds.shape} vs target {target.frames.shape}")
    mask = np.ones(target.frames.shape, dtype=float) if token_mask is None \
        else np.asarray(token_mask, dtype=float)
    m = Tensor(mask)
    ce = (pt.bce_with_logits(pred.logits, Tensor(target.nonzero.astype(float))) * m).sum()
    l1 = (pt.abs_(pred.seconds - Tensor(target.seconds)) * m).sum()
    return ce, l1
