"""μ-law companding to 256 symbols, one-hot coding, and PCM16 WAV files.

WAV format handled here
-----------------------
RIFF little-endian container::

    "RIFF" <u32 size> "WAVE"
    "fmt " <u32 16> <u16 format=1 (PCM)> <u16 channels=1> <u32 sample_rate>
           <u32 byte_rate> <u16 block_align=2> <u16 bits_per_sample=16>
    "data" <u32 n_bytes> <int16 samples...>

Unknown chunks between ``fmt `` and ``data`` are skipped on read. Samples are
scaled by 1/32768 on read and written as ``round(x * 32768)`` clamped to the
int16 range, so a write/read round trip is off by at most 1/32768.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MU = 255
LEVELS = 256
SAMPLE_RATE = 16000
SILENCE_BIN = 128  # encode(0.0)


class WavFormatError(ValueError):
    """The file is not a mono PCM16 RIFF/WAVE file."""


@dataclass
class WaveformBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class QuantizedWaveform:
    bins: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64).reshape(-1)
        if self.bins.size and (self.bins.min() < 0 or self.bins.max() >= LEVELS):
            raise IndexError("μ-law bins must lie in [0, 255]")

    def __len__(self) -> int:
        return self.bins.size


def mulaw_encode(x):
    """Compand and quantize samples in [-1, 1] to bins in [0, 255].

    Accepts a scalar (returns ``int``) or an array (returns ``int64`` array).
    Out-of-range inputs are clamped; NaN raises.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise ArithmeticError("cannot μ-law encode NaN")
    arr = np.clip(arr, -1.0, 1.0)
    f = np.sign(arr) * np.log1p(MU * np.abs(arr)) / math.log1p(MU)
    # values are non-negative so floor(v + 0.5) rounds half away from zero
    bins = np.floor((f + 1.0) / 2.0 * MU + 0.5).astype(np.int64)
    bins = np.clip(bins, 0, MU)
    return int(bins) if bins.ndim == 0 else bins


def mulaw_decode(bins):
    """Inverse companding of bins in [0, 255] back to floats in [-1, 1]."""
    arr = np.asarray(bins)
    if arr.size and (arr.min() < 0 or arr.max() > MU):
        raise IndexError("μ-law bins must lie in [0, 255]")
    y = 2.0 * arr.astype(np.float64) / MU - 1.0
    x = np.sign(y) * (np.power(1.0 + MU, np.abs(y)) - 1.0) / MU
    return float(x) if x.ndim == 0 else x


def quantize(wave: WaveformBuffer) -> QuantizedWaveform:
    return QuantizedWaveform(mulaw_encode(wave.samples), wave.sample_rate)


def dequantize(q: QuantizedWaveform) -> WaveformBuffer:
    return WaveformBuffer(mulaw_decode(q.bins), q.sample_rate)


def one_hot(bins) -> np.ndarray:
    """``[256, T]`` (or ``[256, B, T]`` for 2-D input) indicator array."""
    if isinstance(bins, QuantizedWaveform):
        bins = bins.bins
    b = np.asarray(bins, dtype=np.int64)
    if b.size and (b.min() < 0 or b.max() >= LEVELS):
        raise IndexError("μ-law bins must lie in [0, 255]")
    return np.eye(LEVELS)[:, b]


def peak_normalize(samples: np.ndarray, peak: float = 0.95) -> np.ndarray:
    m = np.abs(samples).max() if samples.size else 0.0
    return samples if m == 0 else samples * (peak / m)


# --- WAV I/O ---------------------------------------------------------------


def wav_write(path, wave: WaveformBuffer) -> None:
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = struct.pack("<4sIHHIIHH", b"fmt ", 16, 1, 1, wave.sample_rate, wave.sample_rate * 2, 2, 16)
    data = b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + fmt + data + payload)


def wav_read(path) -> WaveformBuffer:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise WavFormatError(f"{path}: missing RIFF tag")
    if raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: RIFF form type is not WAVE")
    pos = 12
    fmt = None
    while pos + 8 <= len(raw):
        tag = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if tag == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short ({size} bytes)")
            audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body)
            if audio_format != 1:
                raise WavFormatError(f"{path}: audio_format={audio_format}, only PCM (1) is supported")
            if channels != 1:
                raise WavFormatError(f"{path}: channels={channels}, only mono is supported")
            if bits != 16:
                raise WavFormatError(f"{path}: bits_per_sample={bits}, only 16 is supported")
            fmt = rate
        elif tag == b"data":
            if fmt is None:
                raise WavFormatError(f"{path}: data chunk before fmt chunk")
            if len(body) != size or size % 2:
                raise WavFormatError(f"{path}: data chunk size {size} is truncated or odd")
            pcm = np.frombuffer(body, dtype="<i2").astype(np.float64) / 32768.0
            return WaveformBuffer(pcm, fmt)
        pos += 8 + size + (size & 1)
    raise WavFormatError(f"{path}: no data chunk found")
