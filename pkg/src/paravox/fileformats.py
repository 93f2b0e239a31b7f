"""Versioned binary containers and text dumps.

All containers start with an 8-byte magic and a one-byte format version;
readers reject unknown magics/versions and raise FormatError on truncation.
Integers are little-endian unsigned; floats are little-endian float64.

Parameter checkpoint (magic ``PVOXCKPT``, version 1)
    magic[8] version[u8] then records until EOF:
        name_len[u32] name[name_len bytes, UTF-8] rank[u8]
        extents[rank x u32] values[prod(extents) x f64]

Mel container (magic ``PVOXMELS``, version 1)
    magic[8] version[u8] frames[u32] bins[u32] values[frames*bins x f64, row-major]

Corpus container (magic ``PVOXCORP``, version 1)
    magic[8] version[u8] frame_rate[f64] mel_bins[u32] vocab_size[u32]
    num_speakers[u32] count[u32] then per utterance:
        speaker[u32] n_tokens[u32] tokens[n x u32] durations[n x u32]
        frames[u32] values[frames*mel_bins x f64]

Duration records (magic ``PVOXDURS``, version 1)
    magic[8] version[u8] count[u32] then per utterance:
        n_tokens[u32] pairs[n x (phoneme_id u32, frames u32)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

CKPT_MAGIC = b"PVOXCKPT"
MEL_MAGIC = b"PVOXMELS"
CORPUS_MAGIC = b"PVOXCORP"
DUR_MAGIC = b"PVOXDURS"
VERSION = 1


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated {self.label}: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, count: int, shape) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8", count=count).reshape(shape).copy()

    def u32_array(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<u4", count=count).astype(int)

    def done(self) -> bool:
        return self.pos >= len(self.data)


def _check_header(r: _Reader, magic: bytes):
    got = r.take(8)
    if got != magic:
        raise FormatError(f"bad magic in {r.label}: {got!r}, expected {magic!r}")
    version = r.u8()
    if version != VERSION:
        raise FormatError(f"unknown {r.label} format version {version}; this build reads {VERSION}")


def _u32(n: int) -> bytes:
    return struct.pack("<I", int(n))


# -- parameter checkpoints -----------------------------------------------------

def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [CKPT_MAGIC, bytes([VERSION])]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        chunks.append(_u32(len(encoded)))
        chunks.append(encoded)
        chunks.append(bytes([arr.ndim]))
        for extent in arr.shape:
            chunks.append(_u32(extent))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), f"checkpoint {path}")
    _check_header(r, CKPT_MAGIC)
    out = {}
    while not r.done():
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        out[name] = r.f64_array(count, shape)
    return out


# -- mel containers ---------------------------------------------------------------

def write_mel(path, mel: np.ndarray) -> None:
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2:
        raise ValueError(f"mel must be [frames, bins], got shape {mel.shape}")
    payload = [MEL_MAGIC, bytes([VERSION]), _u32(mel.shape[0]), _u32(mel.shape[1]),
               mel.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(payload))


def read_mel(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), f"mel container {path}")
    _check_header(r, MEL_MAGIC)
    frames, bins = r.u32(), r.u32()
    return r.f64_array(frames * bins, (frames, bins))


def write_mel_text(path, mel: np.ndarray) -> None:
    """Plain-text dump for plotting: one frame per line, space-separated bins."""
    mel = np.asarray(mel)
    with open(path, "w") as fh:
        fh.write(f"# frames={mel.shape[0]} bins={mel.shape[1]}\n")
        for row in mel:
            fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")


# -- duration records ---------------------------------------------------------------

def write_durations(path, records: list[tuple[np.ndarray, np.ndarray]]) -> None:
    """records: (phoneme_ids, frames) per utterance."""
    chunks = [DUR_MAGIC, bytes([VERSION]), _u32(len(records))]
    for ids, frames in records:
        ids = np.asarray(ids, dtype=int)
        frames = np.asarray(frames, dtype=int)
        chunks.append(_u32(len(ids)))
        pairs = np.empty(2 * len(ids), dtype="<u4")
        pairs[0::2] = ids
        pairs[1::2] = frames
        chunks.append(pairs.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_durations(path) -> list[tuple[np.ndarray, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), f"duration container {path}")
    _check_header(r, DUR_MAGIC)
    out = []
    for _ in range(r.u32()):
        n = r.u32()
        pairs = r.u32_array(2 * n)
        out.append((pairs[0::2], pairs[1::2]))
    return out


def write_durations_text(path, records) -> None:
    """One utterance per line: token count then id:frames pairs."""
    with open(path, "w") as fh:
        for ids, frames in records:
            pairs = " ".join(f"{int(i)}:{int(f)}" for i, f in zip(ids, frames))
            fh.write(f"{len(ids)} {pairs}\n")


def read_durations_text(path) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        n = int(fields[0])
        if len(fields) != n + 1:
            raise FormatError(f"duration text line {lineno}: expected {n} pairs, got {len(fields) - 1}")
        ids, frames = [], []
        for pair in fields[1:]:
            i, f = pair.split(":")
            ids.append(int(i))
            frames.append(int(f))
        out.append((np.array(ids), np.array(frames)))
    return out
