"""Objective assembly, Nesterov optimizer, schedules, and the training loop.

The minimized objective is

    (1 / K*T) * sum_i spec_i  +  (lambda_dur / N) * (ce + l1)
        [+ beta * KL]  [+ (1 / N) * prior]

with T the total valid frames in the batch, K the mel bins, and N the total
valid tokens.  The KL weight beta is constant for the utterance-level VAE and
linearly annealed for the per-phoneme one.  Gradients are clipped by global
norm before the momentum update.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateSynthesisError, TrainingDiverged
from .fileformats import read_arrays, write_arrays, write_mel
from .model import Batch, ForwardOutputs, ModelConfig, SynthesisModel, make_batch
from .module import RandomSource
from .tensor import Parameter, Tensor, backward


@dataclass
class LossTerms:
    spec_losses: list                 # per-block L1 sums over valid frames/bins
    dur_ce: Tensor
    dur_l1: Tensor
    kl: Optional[Tensor]              # [B] per-utterance KL, or None
    prior: Optional[Tensor]           # scalar sum, or None
    lambda_dur: float
    beta: float
    n_frames: float                   # T: total valid frames
    mel_bins: int                     # K
    n_tokens: float                   # N: total valid tokens

    @classmethod
    def from_outputs(cls, out: ForwardOutputs, lambda_dur: float, beta: float) -> "LossTerms":
        return cls(out.spec_block_sums, out.dur_ce, out.dur_l1, out.kl_per_utterance,
                   out.prior_loss, lambda_dur, beta, out.n_frames, out.mel_bins, out.n_tokens)


def total_loss(variant: str, terms: LossTerms) -> Tensor:
    """Assemble the scalar objective for one variant; mismatched terms are rejected."""
    if variant == "fine" and terms.prior is None:
        raise ValueError("fine variant requires a learned-prior loss term")
    if variant != "fine" and terms.prior is not None:
        raise ValueError(f"variant {variant!r} must not carry a prior loss term")
    if variant == "novae" and terms.kl is not None:
        raise ValueError("novae variant must not carry a KL term")
    if variant in ("global", "fine") and terms.kl is None:
        raise ValueError(f"variant {variant!r} requires a KL term")

    spec = terms.spec_losses[0]
    for extra in terms.spec_losses[1:]:
        spec = spec + extra
    out = spec * (1.0 / (terms.mel_bins * terms.n_frames))
    out = out + (terms.dur_ce + terms.dur_l1) * (terms.lambda_dur / terms.n_tokens)
    if terms.kl is not None:
        out = out + terms.kl.mean() * terms.beta
    if terms.prior is not None:
        out = out + terms.prior * (1.0 / terms.n_tokens)
    return out


# -- schedules ------------------------------------------------------------------

def lr_multiplier(step: int, warmup_steps: int, decay_start: int, decay_end: int,
                  floor: float = 0.01) -> float:
    """Linear 0.1 -> 1.0 warmup, flat 1.0, exponential decay to the floor."""
    if step <= warmup_steps:
        return 0.1 + 0.9 * step / warmup_steps
    if step <= decay_start:
        return 1.0
    if step >= decay_end:
        return floor
    frac = (step - decay_start) / (decay_end - decay_start)
    return float(np.exp(np.log(floor) * frac))


def beta_schedule(step: int, start: int, end: int, final: float = 1.0) -> float:
    """Zero before ``start``, linear to ``final`` at ``end``, constant after."""
    if step <= start:
        return 0.0
    if step >= end:
        return final
    return final * (step - start) / (end - start)


# -- optimizer -------------------------------------------------------------------

def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class NesterovMomentum:
    """v <- mu*v + g ; p <- p - lr*(g + mu*v), per trainable parameter."""

    def __init__(self, named_params, momentum: float):
        self.named_params = [(n, p) for n, p in named_params if p.trainable]
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def step(self, lr: float) -> None:
        mu = self.momentum
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[name]
            v *= mu
            v += g
            p.data -= (lr * (g + mu * v)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"velocity/{n}": v for n, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.velocity:
            key = f"velocity/{n}"
            if key not in arrays:
                raise KeyError(f"optimizer state missing {key}")
            self.velocity[n] = np.asarray(arrays[key], dtype=self.velocity[n].dtype).copy()


# -- run configuration --------------------------------------------------------------

_ENUMS = {"variant": ("novae", "global", "fine"), "decoder": ("lconv", "transformer")}


@dataclass
class TrainConfig:
    seed: int = 0
    variant: str = "global"
    decoder: str = "lconv"
    iterative_loss: bool = True
    d_model: int = 64
    speaker_dim: int = 64
    latent_dim: int = 8
    latent_proj_dim: int = 32
    enc_conv_blocks: int = 3
    enc_conv_kernel: int = 5
    enc_transformer_blocks: int = 6
    enc_heads: int = 8
    dur_blocks: int = 4
    dur_kernel: int = 3
    dur_heads: int = 8
    dec_blocks: int = 6
    dec_heads: int = 8
    dec_kernel: int = 17
    post_pre_blocks: int = 3
    post_strided_blocks: int = 5
    post_heads: int = 8
    post_kernel: int = 17
    fine_width: int = 128
    fine_blocks: int = 5
    fine_heads: int = 8
    fine_kernel: int = 17
    prior_hidden: int = 128
    dropout: float = 0.1
    base_lr: float = 0.1
    momentum: float = 0.99
    warmup_steps: int = 100
    decay_start: int = 200
    decay_end: int = 1000
    min_lr_factor: float = 0.01
    clip_norm: float = 0.2
    batch_size: int = 16
    total_steps: int = 1200
    lambda_dur: float = 1.0
    beta: float = 1.0
    kl_beta_start: int = 60
    kl_beta_end: int = 500
    kl_beta_final: float = 1.0
    sample_posterior: bool = True
    checkpoint_every: int = 0

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], overrides: dict | None = None) -> "TrainConfig":
        """Build from string key/values (config file), collecting every problem."""
        problems = []
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in known:
                problems.append(f"unknown config key {key!r}")
                continue
            try:
                values[key] = _coerce(raw, known[key].type)
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        provided = set(values)
        if overrides:
            values.update(overrides)
            provided |= set(overrides)
        cfg = cls(**values) if not problems else None
        if cfg is not None:
            for name, allowed in _ENUMS.items():
                if getattr(cfg, name) not in allowed:
                    problems.append(f"{name} must be one of {allowed}, got {getattr(cfg, name)!r}")
            if not cfg.warmup_steps <= cfg.decay_start < cfg.decay_end:
                problems.append(
                    f"need warmup_steps <= decay_start < decay_end, got "
                    f"{cfg.warmup_steps}/{cfg.decay_start}/{cfg.decay_end}")
            for positive in ("base_lr", "clip_norm", "batch_size", "total_steps", "warmup_steps"):
                if getattr(cfg, positive) <= 0:
                    problems.append(f"{positive} must be positive")
            if cfg.variant == "fine":
                missing = [k for k in ("kl_beta_start", "kl_beta_end") if k not in provided]
                if missing:
                    problems.append(
                        f"fine variant requires explicit KL schedule keys: missing {missing}")
                elif not cfg.kl_beta_start < cfg.kl_beta_end:
                    problems.append("kl_beta_start must be < kl_beta_end")
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        return cls.from_mapping(parse_config_file(path), overrides)

    def to_mapping(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    def model_config(self, vocab_size: int, num_speakers: int, mel_bins: int,
                     frame_rate: float) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, num_speakers=num_speakers, variant=self.variant,
            d_model=self.d_model, speaker_dim=self.speaker_dim, latent_dim=self.latent_dim,
            latent_proj_dim=self.latent_proj_dim, enc_conv_blocks=self.enc_conv_blocks,
            enc_conv_kernel=self.enc_conv_kernel,
            enc_transformer_blocks=self.enc_transformer_blocks, enc_heads=self.enc_heads,
            dur_blocks=self.dur_blocks, dur_kernel=self.dur_kernel, dur_heads=self.dur_heads,
            dec_kind=self.decoder, dec_blocks=self.dec_blocks, dec_heads=self.dec_heads,
            dec_kernel=self.dec_kernel, mel_bins=mel_bins, dropout=self.dropout,
            frame_rate=frame_rate, post_pre_blocks=self.post_pre_blocks,
            post_strided_blocks=self.post_strided_blocks, post_heads=self.post_heads,
            post_kernel=self.post_kernel, fine_width=self.fine_width,
            fine_blocks=self.fine_blocks, fine_heads=self.fine_heads,
            fine_kernel=self.fine_kernel, prior_hidden=self.prior_hidden)

    def beta_at(self, step: int) -> float:
        if self.variant == "novae":
            return 0.0
        if self.variant == "global":
            return self.beta
        return beta_schedule(step, self.kl_beta_start, self.kl_beta_end, self.kl_beta_final)

    def lr_at(self, step: int) -> float:
        return self.base_lr * lr_multiplier(step, self.warmup_steps, self.decay_start,
                                            self.decay_end, self.min_lr_factor)


def _coerce(raw: str, annotation) -> object:
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "on", "1", "yes"):
            return True
        if raw.lower() in ("false", "off", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}")
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}")
    return raw


def parse_config_file(path) -> dict[str, str]:
    """Plain-text ``key = value`` lines; '#' starts a comment."""
    mapping = {}
    problems = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return mapping


# -- training loop -------------------------------------------------------------------

METRIC_COLUMNS = ["step", "lr", "beta", "total", "spec", "dur_ce", "dur_l1", "kl",
                  "prior", "grad_norm"]


def select_batch(utterances, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    if cfg.batch_size >= len(utterances):
        return make_batch(utterances)
    idx = rng.choice(len(utterances), size=cfg.batch_size, replace=False)
    return make_batch(utterances, sorted(int(i) for i in idx))


@dataclass
class TrainState:
    model: SynthesisModel
    optimizer: NesterovMomentum
    step: int = 0


def build_state(cfg: TrainConfig, vocab_size: int, num_speakers: int, mel_bins: int,
                frame_rate: float) -> TrainState:
    model_cfg = cfg.model_config(vocab_size, num_speakers, mel_bins, frame_rate)
    model = SynthesisModel.build(model_cfg, cfg.seed)
    opt = NesterovMomentum(model.named_parameters(), cfg.momentum)
    return TrainState(model, opt)


def save_state(state: TrainState, path) -> None:
    arrays = dict(state.model.state_arrays())
    arrays.update(state.optimizer.state_arrays())
    arrays["meta/step"] = np.array(float(state.step))
    write_arrays(path, arrays)


def load_state(state: TrainState, path) -> None:
    arrays = read_arrays(path)
    step = int(arrays.pop("meta/step"))
    velocities = {k: v for k, v in arrays.items() if k.startswith("velocity/")}
    params = {k: v for k, v in arrays.items() if not k.startswith("velocity/")}
    state.model.load_state_arrays(params)
    state.optimizer.load_state_arrays(velocities)
    state.step = step


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    step = state.step + 1
    beta = cfg.beta_at(step)
    out = state.model.forward_train(batch, rng=rng, training=True,
                                    sample=cfg.sample_posterior)
    terms = LossTerms.from_outputs(out, cfg.lambda_dur, beta)
    if cfg.variant == "novae":
        terms.kl = None
    if not cfg.iterative_loss:
        terms.spec_losses = [out.spec_block_sums[-1]]
    loss = total_loss(cfg.variant, terms)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"non-finite loss {loss.data!r} at step {step}")
    state.model.zero_grad()
    backward(loss)
    params = [p for p in state.model.parameters() if p.trainable]
    grad_norm = clip_global_norm(params, cfg.clip_norm)
    state.optimizer.step(cfg.lr_at(step))
    state.step = step
    spec_total = sum(float(s.data) for s in terms.spec_losses) / (out.mel_bins * out.n_frames)
    return {
        "step": step, "lr": cfg.lr_at(step), "beta": beta, "total": float(loss.data),
        "spec": spec_total, "dur_ce": float(out.dur_ce.data) / out.n_tokens,
        "dur_l1": float(out.dur_l1.data) / out.n_tokens,
        "kl": float(out.kl_per_utterance.data.mean()) if out.kl_per_utterance is not None else 0.0,
        "prior": float(out.prior_loss.data) / out.n_tokens if out.prior_loss is not None else 0.0,
        "grad_norm": grad_norm,
    }


def format_metrics_row(row: dict) -> str:
    return ",".join(repr(row[c]) if c != "step" else str(row[c]) for c in METRIC_COLUMNS)


def train(cfg: TrainConfig, utterances, out_dir, frame_rate: float, mel_bins: int,
          vocab_size: int, num_speakers: int, resume_from=None, log=None,
          stop_check=None) -> dict:
    """Run the loop; writes metrics.csv and state/model checkpoints under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = RandomSource(cfg.seed)
    state = build_state(cfg, vocab_size, num_speakers, mel_bins, frame_rate)
    metrics_path = out_dir / "metrics.csv"
    if resume_from is not None:
        load_state(state, resume_from)
    else:
        metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
    last = {}
    with open(metrics_path, "a") as metrics:
        while state.step < cfg.total_steps:
            rng = source.for_step(state.step + 1)
            batch = select_batch(utterances, cfg, rng)
            last = train_step(state, batch, cfg, rng)
            metrics.write(format_metrics_row(last) + "\n")
            if log is not None and (state.step % 50 == 0 or state.step == cfg.total_steps):
                log(f"step {last['step']:5d}  loss {last['total']:.5f}  spec {last['spec']:.5f}")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, out_dir / "state.ckpt")
            if stop_check is not None and stop_check(state, last):
                break
    save_state(state, out_dir / "state.ckpt")
    write_arrays(out_dir / "model.ckpt", state.model.state_arrays())
    return {"state": state, "final": last}


# -- evaluation ------------------------------------------------------------------------

def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield list(range(lo, min(lo + size, n)))


def evaluate(model: SynthesisModel, utterances, mode: str = "teacher",
             batch_size: int = 16, dump_dir=None) -> dict:
    """Corpus-level metrics.

    teacher mode: ground-truth durations and posterior-mean latents isolate
    spectrogram quality.  free mode: the duration gate decides frame counts,
    and spectrogram L1 is compared on length-matched crops.
    """
    if mode not in ("teacher", "free"):
        raise ValueError(f"mode must be teacher or free, got {mode!r}")
    dump_dir = Path(dump_dir) if dump_dir is not None else None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
    abs_err = 0.0
    n_cells = 0.0
    gate_hits = 0
    frame_err = 0.0
    n_tokens = 0
    length_err = 0.0
    degenerate = 0
    utt_index = 0
    for idx in _chunks(len(utterances), batch_size):
        batch = make_batch(utterances, idx)
        if mode == "teacher":
            out = model.teacher_forward(batch)
            pred = out.predictions[-1].data
            mask = batch.frame_mask[:, :, None]
            abs_err += float((np.abs(pred - batch.mel) * mask).sum())
            n_cells += float(mask.sum()) * batch.mel.shape[2]
            dur = out.duration_pred
        else:
            dur = model.predict_durations_free(batch)
        p_z = dur.p_z.data
        seconds = dur.seconds.data
        valid = batch.token_mask > 0
        gate_hits += int((((p_z > 0.5) == (batch.frames > 0)) & valid).sum())
        n_tokens += int(valid.sum())
        for row, utt_i in enumerate(idx):
            utt = utterances[utt_i]
            n = len(utt.tokens)
            if mode == "teacher" and dump_dir is not None:
                pred_row = out.predictions[-1].data[row][batch.frame_mask[row] > 0]
                write_mel(dump_dir / f"utt_{utt_index:04d}.mel", pred_row)
            try:
                frames = model_finalize(model, p_z[row:row + 1, :n], seconds[row:row + 1, :n])
            except DegenerateSynthesisError:
                degenerate += 1
                frame_err += float(np.abs(utt.durations).sum())
                length_err += float(utt.durations.sum())
                utt_index += 1
                continue
            frame_err += float(np.abs(frames[0] - utt.durations).sum())
            if mode == "free":
                mel, _ = model.synthesize(utt.tokens, utt.speaker)
                t = min(mel.shape[0], utt.mel.shape[0])
                abs_err += float(np.abs(mel[:t] - utt.mel[:t]).sum())
                n_cells += t * utt.mel.shape[1]
                length_err += abs(mel.shape[0] - utt.mel.shape[0])
                if dump_dir is not None:
                    write_mel(dump_dir / f"utt_{utt_index:04d}.mel", mel)
            utt_index += 1
    return {
        "spec_l1": abs_err / max(n_cells, 1.0),
        "gate_accuracy": gate_hits / max(n_tokens, 1),
        "frame_mae": frame_err / max(n_tokens, 1),
        "length_error_mean": length_err / max(len(utterances), 1),
        "degenerate": degenerate,
    }


def model_finalize(model: SynthesisModel, p_z, seconds):
    from .duration import finalize_durations
    return finalize_durations(p_z, seconds, model.cfg.frame_rate)
