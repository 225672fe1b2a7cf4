"""Autoregressive generation with per-block ring buffers.

A block with dilation ``d`` and filter width ``K`` only ever reads its input
at ``t, t - d, ..., t - (K-1) d``, so it keeps the last ``(K-1) d + 1`` input
columns. Each step costs the same regardless of ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .codec import LEVELS, SILENCE_BIN, WaveformBuffer, mulaw_decode
from .model import WaveNet
from .tensor import DimensionError, Tensor, softmax


class CacheStateError(RuntimeError):
    """The generation cache was used before initialization or out of order."""


class SamplerMode(str, Enum):
    SAMPLE = "sample"
    ARGMAX = "argmax"


@dataclass
class SamplerConfig:
    mode: SamplerMode = SamplerMode.SAMPLE
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.mode = SamplerMode(self.mode)
        if self.mode is SamplerMode.SAMPLE and not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


def sample_bin(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator) -> int:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if sampler.mode is SamplerMode.ARGMAX:
        return int(np.argmax(logits))
    if not sampler.temperature > 0:
        raise ValueError(f"temperature must be > 0, got {sampler.temperature}")
    p = softmax(logits / sampler.temperature)
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), logits.size - 1))


class GenerationCache:
    """Ring buffers of block inputs plus fused weights for single-column steps."""

    def __init__(self, model: WaveNet | None = None):
        self.buffers: list[np.ndarray] | None = None
        self.t = 0
        self.cond_proj: list[np.ndarray] | None = None
        if model is not None:
            self.reset(model)

    def reset(self, model: WaveNet) -> None:
        cfg = model.cfg
        k = cfg.filter_width
        self.filter_width = k
        self.dilations = [b.dilation for b in model.blocks]
        self.capacities = [(k - 1) * d + 1 for d in self.dilations]
        self.buffers = [np.zeros((cap, cfg.residual_channels)) for cap in self.capacities]
        self.t = 0
        self.cond_proj = None
        # tap j of the kernel reads the input (K-1-j)*d steps back
        self.gate_w = [np.concatenate([b.W_f.data, b.W_g.data], axis=0) for b in model.blocks]
        self.gate_b = [np.concatenate([b.b_f.data, b.b_g.data]) for b in model.blocks]
        self.cond_w = [np.concatenate([b.V_f.data, b.V_g.data], axis=0) for b in model.blocks]
        self.out_w = [np.concatenate([b.W_res.data, b.W_skip.data], axis=0) for b in model.blocks]
        self.out_b = [np.concatenate([b.b_res.data, b.b_skip.data]) for b in model.blocks]
        self.residual_channels = cfg.residual_channels
        self.gate_channels = cfg.gate_channels

    def set_condition(self, c_samples: np.ndarray, c_repeat: int = 1) -> None:
        """Precompute every block's condition projection for a whole utterance.

        ``c_samples`` may be at frame rate with ``c_repeat`` samples per column.
        """
        self._require()
        self.cond_proj = [w @ c_samples for w in self.cond_w]
        self.cond_repeat = c_repeat
        self.cond_steps = c_samples.shape[-1] * c_repeat

    def footprint(self) -> int:
        """Number of cached activation values across all ring buffers."""
        self._require()
        return sum(buf.size for buf in self.buffers)

    def _require(self) -> None:
        if self.buffers is None:
            raise CacheStateError("generation cache is not initialized; call reset(model) first")


def expected_footprint(model: WaveNet) -> int:
    cfg = model.cfg
    return sum(((cfg.filter_width - 1) * b.dilation + 1) * cfg.residual_channels for b in model.blocks)


def incremental_step(cache: GenerationCache, model: WaveNet, x_t, c_t=None) -> np.ndarray:
    """Logits for the next sample given the previous sample ``x_t``.

    ``x_t`` is a bin index or a one-hot column. ``c_t`` is this step's
    condition column; omit it when :meth:`GenerationCache.set_condition` was
    called.
    """
    cache._require()
    x = np.asarray(x_t)
    if x.ndim == 0:
        bin_ = int(x)
    else:
        col = x.reshape(-1)
        if col.size != LEVELS or col.sum() != 1 or not np.all((col == 0) | (col == 1)):
            raise ValueError("x_t must be a bin index or a one-hot column")
        bin_ = int(col.argmax())
    if not 0 <= bin_ < LEVELS:
        raise IndexError(f"bin {bin_} outside [0, {LEVELS - 1}]")
    t = cache.t
    if c_t is None:
        if cache.cond_proj is None:
            raise CacheStateError("no condition column given and no condition set on the cache")
        if t >= cache.cond_steps:
            raise DimensionError(f"step {t} is beyond the {cache.cond_steps}-step condition")
        col = t // cache.cond_repeat
        projections = [p[:, col] for p in cache.cond_proj]
    else:
        c = np.asarray(c_t.data if isinstance(c_t, Tensor) else c_t, dtype=np.float64).reshape(-1)
        if c.size != model.cfg.condition_dim:
            raise DimensionError(f"condition column has {c.size} values, model expects {model.cfg.condition_dim}")
        projections = [w @ c for w in cache.cond_w]

    k = cache.filter_width
    g = cache.gate_channels
    r = cache.residual_channels
    h = model.embed_w.data[:, bin_] + model.embed_b.data
    skips = None
    for i in range(len(model.blocks)):
        buf, cap, d = cache.buffers[i], cache.capacities[i], cache.dilations[i]
        buf[t % cap] = h
        w = cache.gate_w[i]
        pre = cache.gate_b[i] + projections[i]
        for j in range(k):
            pre = pre + w[:, :, j] @ buf[(t - (k - 1 - j) * d) % cap]
        z = np.tanh(pre[:g]) * (0.5 * (1.0 + np.tanh(0.5 * pre[g:])))
        rs = cache.out_w[i] @ z + cache.out_b[i]
        h = h + rs[:r]
        skips = rs[r:] if skips is None else skips + rs[r:]
    out = np.maximum(skips, 0.0)
    out = np.maximum(model.out1_w.data @ out + model.out1_b.data, 0.0)
    cache.t = t + 1
    return model.out2_w.data @ out + model.out2_b.data


def generate(
    model: WaveNet,
    c_samples,
    sampler: SamplerConfig | None = None,
    n_samples: int | None = None,
    c_repeat: int = 1,
    trace=None,
    return_bins: bool = False,
):
    """Sample a waveform one step at a time, seeded with the silence bin.

    ``c_samples`` is ``[D_enc, T]`` at sample rate, or at frame rate with
    ``c_repeat`` samples per column. ``trace``, if given, receives one
    ``"t bin"`` line per step.
    """
    sampler = sampler or SamplerConfig()
    c = np.asarray(c_samples.data if isinstance(c_samples, Tensor) else c_samples, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != model.cfg.condition_dim:
        raise DimensionError(f"condition must be [{model.cfg.condition_dim}, T], got {c.shape}")
    available = c.shape[1] * c_repeat
    steps = available if n_samples is None else int(n_samples)
    if steps < 0:
        raise ValueError(f"sample count must be >= 0, got {steps}")
    if steps > available:
        raise DimensionError(f"{steps} samples requested but the condition covers {available}")
    rng = np.random.default_rng(sampler.seed)
    cache = GenerationCache(model)
    cache.set_condition(c, c_repeat)
    bins = np.empty(steps, dtype=np.int64)
    prev = SILENCE_BIN
    for t in range(steps):
        logits = incremental_step(cache, model, prev)
        prev = sample_bin(logits, sampler, rng)
        bins[t] = prev
        if trace is not None:
            trace.write(f"{t} {prev}\n")
    wave = WaveformBuffer(mulaw_decode(bins) if steps else np.zeros(0))
    return (wave, bins) if return_bins else wave


def synthesize_utterance(model, utt, mode, stats, sampler: SamplerConfig | None = None, trace=None) -> WaveformBuffer:
    """Generate audio for ``utt`` from its conditions; the secondary head is never run.

    Only LINGUISTIC_PLUS_F0 reads the utterance's oracle F0.
    """
    from .training import condition_features

    features = condition_features(utt, mode, stats)
    if features.shape[0] != model.cfg.linguistic_dim:
        raise DimensionError(f"{utt.utt_id}: {features.shape[0]} condition features, model expects {model.cfg.linguistic_dim}")
    encoding = model.conditioner.encode(Tensor(features))
    wave = generate(model.wavenet, encoding, sampler, n_samples=len(utt.waveform), c_repeat=utt.frame_shift, trace=trace)
    wave.sample_rate = utt.waveform.sample_rate
    return wave
