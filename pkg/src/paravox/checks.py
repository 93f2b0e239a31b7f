"""Registry of gradient-integrity checks, one suite per subsystem.

Every suite builds a deterministic scalar target at tiny shapes (B <= 2,
N <= 5, T <= 12, feature dims <= 16) and runs the central-difference checker
over its parameters.  Large parameter tensors are spot-checked on a seeded
subset of entries so the whole registry stays fast.  Input seeds are fixed:
ReLU-style kinks make finite differences meaningless when a preactivation
sits within the step of zero, so each target was verified clean.
"""

from __future__ import annotations

import numpy as np

from . import blocks, decoder, duration, tensor as pt, upsample, vae
from .encoder import EncoderConfig, EncoderOutput, TextEncoder
from .gradcheck import GradCheckReport, grad_check
from .model import Batch, ModelConfig, SynthesisModel
from .tensor import Tensor
from .training import LossTerms, total_loss


def _weighted(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * Tensor(w)).sum()


def check_tensor_ops() -> GradCheckReport:
    rng = np.random.default_rng(0)
    w = pt.Parameter(rng.normal(size=(6, 6)), "w")
    gain = pt.Parameter(np.ones(6), "gain")
    bias = pt.Parameter(np.zeros(6), "bias")
    x = Tensor(rng.normal(size=(2, 5, 6)))
    mix = Tensor(rng.normal(size=(2, 5, 6)))

    def f():
        h = pt.matmul(x, w)
        h = pt.layer_norm(h, gain, bias)
        h = pt.softmax(h, axis=-1) + pt.sigmoid(h) + pt.softplus(h) + pt.tanh(h)
        return (h * mix).sum()

    return grad_check(f, [w, gain, bias])


def check_blocks() -> GradCheckReport:
    rng_w = np.random.default_rng(1)
    lconv = blocks.LConvBlock(16, 4, 3, rng_w).finalize_names("lconv_block.")
    tf = blocks.TransformerBlock(16, 4, rng_w).finalize_names("transformer_block.")
    conv = blocks.ConvBlock(16, 16, 3, rng_w).finalize_names("conv_block.")
    x = Tensor(np.random.default_rng(30).normal(size=(2, 5, 16)))
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], dtype=float)

    def f():
        out = lconv(x, mask)
        out = tf(out, mask)
        out = conv(out, mask)
        return _weighted(out, 3)

    params = lconv.parameters() + tf.parameters() + conv.parameters()
    return grad_check(f, params, max_entries=24)


def check_encoder() -> GradCheckReport:
    cfg = EncoderConfig(vocab_size=8, d_model=16, conv_blocks=1, conv_kernel=3,
                        transformer_blocks=1, heads=4, num_speakers=2, speaker_dim=8)
    enc = TextEncoder(cfg, np.random.default_rng(4)).finalize_names("encoder.")
    ids = np.array([[0, 1, 2, 3, 4], [5, 6, 7, 1, 0]])
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=float)

    def f():
        return _weighted(enc(ids, mask).phonemes, 5)

    return grad_check(f, enc.parameters(), max_entries=24)


def check_vae() -> GradCheckReport:
    rng = np.random.default_rng(6)
    gp = vae.GlobalPosterior(8, 2, 3, 4, np.random.default_rng(7),
                             pre_blocks=1, strided_blocks=1).finalize_names("global_posterior.")
    fp = vae.FinePosterior(8, 16, 8, 16, 4, 3, 4, np.random.default_rng(8),
                           blocks=1).finalize_names("fine_posterior.")
    prior = vae.FinePriorLSTM(16, 8, 4, 8, np.random.default_rng(9)).finalize_names("prior_lstm.")
    proj_g = vae.LatentProjector(4, 8, np.random.default_rng(10)).finalize_names("latent_proj_global.")
    proj_f = vae.LatentProjector(4, 8, np.random.default_rng(11), d_model=16, speaker_dim=8,
                                 fine=True).finalize_names("latent_proj_fine.")
    mel = Tensor(rng.normal(size=(2, 9, 8)))
    frame_mask = np.ones((2, 9))
    frames = np.array([[3, 2, 4], [2, 4, 3]])
    feats = upsample.positional_features(frames, 16)
    spk = Tensor(rng.normal(size=(2, 8)))
    enc = EncoderOutput(Tensor(rng.normal(size=(2, 3, 16))), np.ones((2, 3)))
    eps_g = Tensor(rng.normal(size=(2, 4)))
    eps_f = Tensor(rng.normal(size=(2, 3, 4)))
    prior_mean = Tensor(rng.normal(size=(2, 4)))
    # the prior teacher is frozen at the unperturbed point: the stop-gradient
    # contract makes the live teacher's value-dependence invisible to backward
    teacher0 = Tensor(fp(mel, feats, spk, enc).mean.data.copy())

    def f():
        post_g = gp(mel, frame_mask)
        z_g = post_g.mean + pt.exp(post_g.log_variance * 0.5) * eps_g
        post_f = fp(mel, feats, spk, enc)
        z_f = post_f.mean + pt.exp(post_f.log_variance * 0.5) * eps_f
        _, prior_loss = prior.teacher_forced(enc, spk, teacher0)
        kl_g = vae.kl_divergence(post_g, prior_mean).sum()
        kl_f = vae.kl_divergence(post_f, Tensor(np.zeros(4)), enc.token_mask).sum()
        out = _weighted(proj_g(z_g), 12) + _weighted(proj_f(z_f, spk, enc), 13)
        return out + kl_g + kl_f + prior_loss

    params = (gp.parameters() + fp.parameters() + prior.parameters()
              + proj_g.parameters() + proj_f.parameters())
    return grad_check(f, params, max_entries=12)


def check_duration() -> GradCheckReport:
    pred = duration.DurationPredictor(16, 4, np.random.default_rng(14), blocks=1) \
        .finalize_names("duration_predictor.")
    x = Tensor(np.random.default_rng(15).normal(size=(2, 5, 16)))
    mask = np.ones((2, 5))
    target = duration.DurationTarget.from_frames(
        np.random.default_rng(16).integers(0, 4, size=(2, 5)), 80.0)

    def f():
        out = pred(x, mask)
        ce, l1 = duration.duration_loss(out, target, mask)
        return ce + l1 + _weighted(out.hidden, 17)

    return grad_check(f, pred.parameters(), max_entries=24)


def check_upsampler() -> GradCheckReport:
    comb = upsample.FeatureCombiner(16, np.random.default_rng(18)).finalize_names("combiner.")
    comb.logits.data[:] = np.random.default_rng(19).normal(size=(3, 16))
    hidden = pt.Parameter(np.random.default_rng(20).normal(size=(2, 4, 16)), "hidden")
    frames = np.array([[2, 0, 3, 1], [1, 2, 2, 2]])
    feats = upsample.positional_features(frames, 16)

    def f():
        up, _, _ = upsample.upsample(hidden, frames)
        return _weighted(comb(up, feats), 21)

    return grad_check(f, [hidden] + comb.parameters(), max_entries=24)


def check_decoder() -> GradCheckReport:
    lc = decoder.SpectrogramDecoder(
        decoder.DecoderConfig("lconv", 2, 4, 3, 16, 8), np.random.default_rng(22)) \
        .finalize_names("lconv_decoder.")
    tf = decoder.SpectrogramDecoder(
        decoder.DecoderConfig("transformer", 2, 4, 3, 16, 8), np.random.default_rng(23)) \
        .finalize_names("transformer_decoder.")
    x = Tensor(np.random.default_rng(24).normal(size=(2, 6, 16)))
    mask = np.ones((2, 6))
    target = Tensor(np.random.default_rng(25).random((2, 6, 8)))

    def f():
        a = decoder.iterative_spec_loss(lc(x, mask), target, mask)
        b = decoder.iterative_spec_loss(tf(x, mask), target, mask)
        return a + b

    return grad_check(f, lc.parameters() + tf.parameters(), max_entries=16)


def _tiny_model_config(variant: str, dec_kind: str = "lconv") -> ModelConfig:
    return ModelConfig(
        vocab_size=8, num_speakers=2, variant=variant, d_model=16, speaker_dim=8,
        latent_dim=4, latent_proj_dim=8, enc_conv_blocks=1, enc_conv_kernel=3,
        enc_transformer_blocks=1, enc_heads=4, dur_blocks=1, dur_kernel=3, dur_heads=4,
        dec_kind=dec_kind, dec_blocks=1, dec_heads=4, dec_kernel=3, mel_bins=8,
        frame_rate=80.0, post_pre_blocks=1, post_strided_blocks=1, post_heads=2,
        post_kernel=3, fine_width=16, fine_blocks=1, fine_heads=4, fine_kernel=3,
        prior_hidden=8)


def _tiny_batch(seed: int = 26) -> Batch:
    rng = np.random.default_rng(seed)
    frames = np.array([[3, 0, 2, 3, 1], [2, 2, 0, 3, 0]])
    t = int(frames.sum(axis=1).max())
    mel = rng.random((2, t, 8))
    frame_mask = (np.arange(t)[None, :] < frames.sum(axis=1)[:, None]).astype(float)
    mel *= frame_mask[:, :, None]
    return Batch(tokens=rng.integers(0, 8, size=(2, 5)), token_mask=np.ones((2, 5)),
                 speakers=np.array([0, 1]), frames=frames,
                 mel=mel.astype(pt.active_dtype()), frame_mask=frame_mask)


def _check_assembled(variant: str, seed: int, batch_seed: int = 26) -> GradCheckReport:
    model = SynthesisModel(_tiny_model_config(variant), np.random.default_rng(seed))
    batch = _tiny_batch(batch_seed)
    beta = 0.5
    teacher0 = None
    if variant == "fine":
        # freeze the teacher sequence: teacher forcing stops gradient by contract,
        # so finite differences must not see the teacher's parameter dependence
        out0 = model.forward_train(batch, rng=np.random.default_rng(99), training=False,
                                   sample=True)
        teacher0 = Tensor(out0.posterior.mean.data.copy())

    def f():
        # reseeding per call fixes the reparameterization noise, keeping f deterministic
        out = model.forward_train(batch, rng=np.random.default_rng(99), training=False,
                                  sample=True, prior_teacher=teacher0)
        terms = LossTerms.from_outputs(out, lambda_dur=1.0, beta=beta)
        return total_loss(variant, terms)

    return grad_check(f, model.parameters(), max_entries=4)


def check_loss_global() -> GradCheckReport:
    return _check_assembled("global", seed=27, batch_seed=40)


def check_loss_fine() -> GradCheckReport:
    return _check_assembled("fine", seed=30, batch_seed=26)


REGISTRY = {
    "tensor": check_tensor_ops,
    "blocks": check_blocks,
    "encoder": check_encoder,
    "vae": check_vae,
    "duration": check_duration,
    "upsampler": check_upsampler,
    "decoder": check_decoder,
    "losses-global": check_loss_global,
    "losses-fine": check_loss_fine,
}


def run_checks(module: str = "all"):
    """Run one registry entry or all of them in high precision; yields (name, report)."""
    names = list(REGISTRY) if module == "all" else [module]
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown check module(s) {unknown}; available: {sorted(REGISTRY)}")
    with pt.precision("high"):
        for name in names:
            yield name, REGISTRY[name]()
