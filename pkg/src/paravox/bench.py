"""Decoder throughput comparison: parallel vs frame-by-frame.

Costs are reported two ways: counted multiply-adds (exact, deterministic) and
wall clock (advisory).  The ``ar-sim`` mode emulates an autoregressive decoder
without caching by invoking the same lightweight-conv decoder once per output
frame on the trailing receptive-field window, which is the work a sequential
generator must redo when nothing is reusable across steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as pt
from .decoder import DecoderConfig, SpectrogramDecoder
from .tensor import Tensor

BENCH_KINDS = ("lconv", "transformer", "ar-sim")


@dataclass
class BenchRow:
    decoder: str
    frames: int
    mean_ms: float
    std_ms: float
    madds: int


def bench_decoder_config(kind: str, d_model: int = 64, blocks: int = 2, heads: int = 8,
                         kernel_size: int = 17, mel_bins: int = 32) -> DecoderConfig:
    arch = "lconv" if kind == "ar-sim" else kind
    return DecoderConfig(kind=arch, num_blocks=blocks, heads=heads,
                         kernel_size=kernel_size, d_model=d_model, mel_bins=mel_bins,
                         dropout=0.0)


def receptive_field(cfg: DecoderConfig) -> int:
    return cfg.num_blocks * (cfg.kernel_size - 1) + 1


def parallel_pass(dec: SpectrogramDecoder, frames: int, seed: int = 0):
    """One full-sequence forward; returns (seconds, madds)."""
    x = Tensor(np.random.default_rng(seed).normal(size=(1, frames, dec.cfg.d_model))
               .astype(pt.active_dtype()))
    pt.reset_madds()
    start = time.perf_counter()
    with pt.no_grad():
        dec(x)
    return time.perf_counter() - start, pt.madds()


def ar_sim_pass(dec: SpectrogramDecoder, frames: int, seed: int = 0):
    """Frame-by-frame emulation over the trailing receptive-field window."""
    window = receptive_field(dec.cfg)
    data = np.random.default_rng(seed).normal(size=(1, frames, dec.cfg.d_model)) \
        .astype(pt.active_dtype())
    pt.reset_madds()
    start = time.perf_counter()
    with pt.no_grad():
        for t in range(frames):
            lo = max(0, t - window + 1)
            step_in = Tensor(data[:, lo:t + 1, :])
            dec(step_in)[-1]
    return time.perf_counter() - start, pt.madds()


def decoder_madds(kind: str, frames: int, **config_kw) -> int:
    dec = SpectrogramDecoder(bench_decoder_config(kind, **config_kw), np.random.default_rng(0))
    run = ar_sim_pass if kind == "ar-sim" else parallel_pass
    _, count = run(dec, frames)
    return count


def run_benchmark(kinds, frames_list, repeats: int = 3, **config_kw) -> list[BenchRow]:
    rows = []
    for kind in kinds:
        if kind not in BENCH_KINDS:
            raise ValueError(f"unknown decoder kind {kind!r}; expected one of {BENCH_KINDS}")
        dec = SpectrogramDecoder(bench_decoder_config(kind, **config_kw),
                                 np.random.default_rng(0))
        run = ar_sim_pass if kind == "ar-sim" else parallel_pass
        for frames in frames_list:
            times = []
            madds = 0
            for rep in range(repeats):
                seconds, madds = run(dec, frames, seed=rep)
                times.append(seconds * 1e3)
            rows.append(BenchRow(kind, frames, float(np.mean(times)),
                                 float(np.std(times)), madds))
    return rows


def format_csv(rows: list[BenchRow]) -> str:
    lines = ["decoder,frames,mean_ms,stddev_ms,madds"]
    for r in rows:
        lines.append(f"{r.decoder},{r.frames},{r.mean_ms:.3f},{r.std_ms:.3f},{r.madds}")
    return "\n".join(lines)
