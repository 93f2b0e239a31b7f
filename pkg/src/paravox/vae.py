"""Residual encoders: spectrogram -> latent distributions.

Two variants share the diagonal-Gaussian machinery: an utterance-level
posterior with a per-speaker learned prior mean (unit variance), and a
per-phoneme posterior that aligns frames to tokens with attention, paired
with a recurrent learned prior used at inference.  Latents are 8-d and get
projected up to 32 channels before conditioning the decoder stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as pt
from .blocks import LConvBlock, LayerNorm, apply_mask, conv1d
from .errors import ShapeError
from .module import Linear, Module, ModuleList, glorot
from .tensor import Parameter, Tensor


@dataclass
class LatentPosterior:
    mean: Tensor          # [B, L] or [B, N, L]
    log_variance: Tensor  # same shape

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = Tensor(rng.standard_normal(self.mean.shape))
        return self.mean + pt.exp(self.log_variance * 0.5) * eps


def kl_divergence(post: LatentPosterior, prior_mean, token_mask=None) -> Tensor:
    """Analytic KL(q || p) against a unit-variance diagonal Gaussian, per batch element.

    Summed over latent dims; a [B, N, L] posterior is also summed over valid tokens.
    """
    prior_mean = prior_mean if isinstance(prior_mean, Tensor) else Tensor(prior_mean)
    if post.mean.shape != post.log_variance.shape:
        raise ShapeError(f"posterior mean {post.mean.shape} vs log-variance {post.log_variance.shape}")
    diff = post.mean - prior_mean
    per_dim = 0.5 * (pt.exp(post.log_variance) + diff * diff - 1.0 - post.log_variance)
    per_pos = per_dim.sum(axis=-1)
    if per_pos.ndim == 1:
        return per_pos
    if token_mask is not None:
        per_pos = per_pos * Tensor(np.asarray(token_mask, dtype=pt.active_dtype()))
    return per_pos.sum(axis=-1)


class SpeakerPrior(Module):
    """Learnable per-speaker prior mean; variance fixed at 1."""

    def __init__(self, num_speakers: int, latent_dim: int):
        self.means = Parameter(np.zeros((num_speakers, latent_dim)), "means")

    def __call__(self, speaker_ids: np.ndarray) -> Tensor:
        return pt.gather_rows(self.means, np.asarray(speaker_ids))


def downsampled_length(length: int, stride: int = 2) -> int:
    return -(-length // stride)


class GlobalPosterior(Module):
    """Utterance-level posterior: LConv stack, strided downsampling, masked pooling.

    Frame masks must be contiguous prefixes (padding at the end), which is how
    every batch in this package is laid out.
    """

    def __init__(self, mel_bins: int, heads: int, kernel_size: int, latent_dim: int,
                 rng: np.random.Generator, pre_blocks: int = 3, strided_blocks: int = 5,
                 dropout: float = 0.1):
        self.mel_bins = mel_bins
        self.pre = ModuleList(
            LConvBlock(mel_bins, heads, kernel_size, rng, dropout) for _ in range(pre_blocks))
        self.stride_convs = ModuleList()
        self.strided = ModuleList()
        for _ in range(strided_blocks):
            conv = Module()
            conv.weight = Parameter(glorot(rng, (3, mel_bins, mel_bins), 3 * mel_bins, mel_bins), "weight")
            conv.bias = Parameter(np.zeros(mel_bins), "bias")
            self.stride_convs.append(conv)
            self.strided.append(LConvBlock(mel_bins, heads, kernel_size, rng, dropout))
        self.mean_proj = Linear(mel_bins, latent_dim, rng)
        self.logvar_proj = Linear(mel_bins, latent_dim, rng)

    def __call__(self, mel: Tensor, frame_mask, training: bool = False, rng=None) -> LatentPosterior:
        mask = np.asarray(frame_mask, dtype=float)
        lengths = mask.sum(axis=1).astype(int)
        if mel.shape[1] == 0 or np.any(lengths == 0):
            raise ShapeError("global posterior requires at least one valid frame per utterance")
        x = apply_mask(mel, mask)
        for block in self.pre:
            x = block(x, mask, training, rng)
        for conv, block in zip(self.stride_convs, self.strided):
            x = conv1d(apply_mask(x, mask), conv.weight, conv.bias, stride=2)
            lengths = -(-lengths // 2)
            t = x.shape[1]
            mask = (np.arange(t)[None, :] < lengths[:, None]).astype(float)
            x = block(x, mask, training, rng)
        x = apply_mask(x, mask)
        denom = Tensor(mask.sum(axis=1, keepdims=True))
        pooled = x.sum(axis=1) / denom
        return LatentPosterior(self.mean_proj(pooled), self.logvar_proj(pooled))


class FinePosterior(Module):
    """Per-phoneme posterior.

    Ground-truth frames (with their positional features and the speaker
    embedding) are projected to a working width and run through LConv blocks;
    layer-normalized encoder outputs then attend over the processed frames
    with scaled single-head dot-product attention, and the per-token context
    is projected to mean / log-variance.
    """

    def __init__(self, mel_bins: int, d_model: int, speaker_dim: int, width: int,
                 heads: int, kernel_size: int, latent_dim: int, rng: np.random.Generator,
                 blocks: int = 5, dropout: float = 0.1):
        in_dim = mel_bins + 2 * d_model + 1 + speaker_dim
        self.in_proj = Linear(in_dim, width, rng)
        self.blocks = ModuleList(
            LConvBlock(width, heads, kernel_size, rng, dropout) for _ in range(blocks))
        self.query_norm = LayerNorm(d_model)
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(width, d_model, rng, bias=False)
        self.mean_proj = Linear(width, latent_dim, rng)
        self.logvar_proj = Linear(width, latent_dim, rng)
        self.d_model = d_model

    def __call__(self, mel: Tensor, pos_feats, speaker_emb: Tensor, enc,
                 training: bool = False, rng=None, return_weights: bool = False):
        b, t, _ = mel.shape
        if pos_feats.within.shape[1] != t:
            raise ShapeError(
                f"mel has {t} frames but duration-derived positional features have "
                f"{pos_feats.within.shape[1]}")
        frame_mask = pos_feats.frame_mask
        spk = pt.expand(pt.reshape(speaker_emb, (b, 1, speaker_emb.shape[-1])),
                        (b, t, speaker_emb.shape[-1]))
        x = pt.concat([mel, pos_feats.within, pos_feats.duration, pos_feats.fraction, spk], axis=2)
        x = self.in_proj(apply_mask(x, frame_mask))
        for block in self.blocks:
            x = block(x, frame_mask, training, rng)
        q = self.q_proj(self.query_norm(enc.phonemes))
        k = self.k_proj(x)
        scores = pt.matmul(q, pt.transpose(k, (0, 2, 1))) * (self.d_model ** -0.5)
        neg = (np.asarray(frame_mask, dtype=pt.active_dtype()) - 1.0) * 1e9
        weights = pt.softmax(scores + Tensor(neg[:, None, :]), axis=-1)
        ctx = pt.matmul(weights, x)
        mean = apply_mask(self.mean_proj(ctx), enc.token_mask)
        logvar = apply_mask(self.logvar_proj(ctx), enc.token_mask)
        post = LatentPosterior(mean, logvar)
        if return_weights:
            return post, weights
        return post


class FinePriorLSTM(Module):
    """Single-layer recurrent prior over per-phoneme latents, strictly causal.

    Trained with teacher forcing to match posterior means under squared error;
    the teacher sequence is detached so no gradient reaches the posterior.  At
    inference it feeds back its own predictions and the predicted means are
    used directly as latents.
    """

    def __init__(self, d_model: int, speaker_dim: int, latent_dim: int, hidden: int,
                 rng: np.random.Generator):
        in_dim = speaker_dim + d_model + latent_dim
        self.w_x = Parameter(glorot(rng, (in_dim, 4 * hidden), in_dim, 4 * hidden), "w_x")
        self.w_h = Parameter(glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden), "w_h")
        self.b = Parameter(np.zeros(4 * hidden), "b")
        self.out_proj = Linear(hidden, latent_dim, rng)
        self.hidden = hidden
        self.latent_dim = latent_dim

    def _cell(self, x: Tensor, h: Tensor, c: Tensor):
        z = pt.matmul(x, self.w_x) + pt.matmul(h, self.w_h) + self.b
        n = self.hidden
        i = pt.sigmoid(z[:, 0 * n:1 * n])
        f = pt.sigmoid(z[:, 1 * n:2 * n])
        g = pt.tanh(z[:, 2 * n:3 * n])
        o = pt.sigmoid(z[:, 3 * n:4 * n])
        c = f * c + i * g
        h = o * pt.tanh(c)
        return h, c

    def _roll(self, enc_phonemes: Tensor, speaker_emb: Tensor, next_input):
        b, n_tokens, _ = enc_phonemes.shape
        h = Tensor(np.zeros((b, self.hidden)))
        c = Tensor(np.zeros((b, self.hidden)))
        prev = Tensor(np.zeros((b, self.latent_dim)))
        outputs = []
        for n in range(n_tokens):
            x = pt.concat([speaker_emb, enc_phonemes[:, n, :], prev], axis=1)
            h, c = self._cell(x, h, c)
            pred = self.out_proj(h)
            outputs.append(pt.reshape(pred, (b, 1, self.latent_dim)))
            prev = next_input(n, pred)
        return pt.concat(outputs, axis=1)

    def teacher_forced(self, enc, speaker_emb: Tensor, teacher_means: Tensor):
        """Returns (predicted means [B,N,L], summed squared-error loss over valid tokens)."""
        if teacher_means is None:
            raise ValueError("training the learned prior requires teacher latents (posterior means)")
        teacher = pt.stop_gradient(teacher_means)
        preds = self._roll(enc.phonemes, speaker_emb, lambda n, _pred: teacher[:, n, :])
        err = preds - teacher
        masked = (err * err).sum(axis=-1) * Tensor(enc.token_mask)
        return preds, masked.sum()

    def rollout(self, enc, speaker_emb: Tensor) -> Tensor:
        """Deterministic inference rollout feeding back its own predictions."""
        return self._roll(enc.phonemes, speaker_emb, lambda n, pred: pred)


class LatentProjector(Module):
    """Lift an 8-d latent to the 32 conditioning channels.

    The utterance-level variant projects the latent alone; the per-phoneme
    variant first concatenates the speaker embedding and encoder outputs.
    """

    def __init__(self, latent_dim: int, proj_dim: int, rng: np.random.Generator,
                 d_model: int = 0, speaker_dim: int = 0, fine: bool = False):
        self.fine = fine
        in_dim = latent_dim + (speaker_dim + d_model if fine else 0)
        self.proj = Linear(in_dim, proj_dim, rng)

    def __call__(self, latent: Tensor, speaker_emb: Tensor | None = None, enc=None) -> Tensor:
        if not self.fine:
            return self.proj(latent)
        b, n, _ = latent.shape
        spk = pt.expand(pt.reshape(speaker_emb, (b, 1, speaker_emb.shape[-1])),
                        (b, n, speaker_emb.shape[-1]))
        return self.proj(pt.concat([latent, spk, enc.phonemes], axis=2))
