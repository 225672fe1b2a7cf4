"""Dilated causal WaveNet with conditioned gated units and a frame-level MTL head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codec import LEVELS, SILENCE_BIN
from .conditioner import Conditioner
from .tensor import (
    DimensionError,
    Tensor,
    add,
    add_bias,
    conv1d_causal,
    conv1x1,
    embed,
    multiply,
    relu,
    repeat_time,
    sigmoid,
    slice_channels,
    tanh,
)


class ConfigError(ValueError):
    pass


@dataclass
class WaveNetConfig:
    num_stacks: int = 2
    layers_per_stack: int = 6
    filter_width: int = 2
    residual_channels: int = 32
    gate_channels: int = 32
    skip_channels: int = 64
    quantization_levels: int = LEVELS
    # conditional network; its output width is the residual blocks' condition dim
    linguistic_dim: int = 11
    cond_channels: int = 64
    cond_layers: int = 2
    cond_filter_width: int = 2
    # secondary task
    n_cepstra: int = 25
    predict_logf0: bool = True
    predict_vuv: bool = True
    loss_weights: dict = field(default_factory=lambda: {"cep": 1.0, "f0": 1.0, "vuv": 1.0})

    def __post_init__(self):
        self.validate()

    @property
    def condition_dim(self) -> int:
        return 2 * self.cond_channels

    @property
    def head_dim(self) -> int:
        return self.n_cepstra + int(self.predict_logf0) + int(self.predict_vuv)

    def dilations(self) -> list[int]:
        return [2**j for _ in range(self.num_stacks) for j in range(self.layers_per_stack)]

    def validate(self) -> None:
        if self.quantization_levels != LEVELS:
            raise ConfigError(f"quantization_levels must be {LEVELS}")
        for name in (
            "num_stacks",
            "layers_per_stack",
            "filter_width",
            "residual_channels",
            "gate_channels",
            "skip_channels",
            "linguistic_dim",
            "cond_channels",
            "cond_layers",
            "cond_filter_width",
        ):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_cepstra < 0:
            raise ConfigError("n_cepstra must be >= 0")
        unknown = set(self.loss_weights) - {"cep", "f0", "vuv"}
        if unknown:
            raise ConfigError(f"unknown loss weight key(s): {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WaveNetConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown model config key(s): {sorted(extra)}")
        return cls(**data)


def receptive_field(config: WaveNetConfig) -> int:
    return 1 + (config.filter_width - 1) * sum(config.dilations())


def _param(shape, std, rng, name):
    data = np.zeros(shape) if std == 0 else rng.normal(0.0, std, shape)
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class ResidualBlock:
    W_f: Tensor  # [G, R, K]
    W_g: Tensor
    b_f: Tensor
    b_g: Tensor
    V_f: Tensor  # [G, D]
    V_g: Tensor
    W_res: Tensor  # [R, G]
    b_res: Tensor
    W_skip: Tensor  # [S, G]
    b_skip: Tensor
    dilation: int

    @classmethod
    def init(cls, cfg: WaveNetConfig, dilation: int, rng, prefix: str) -> "ResidualBlock":
        r, g, s, d, k = (
            cfg.residual_channels,
            cfg.gate_channels,
            cfg.skip_channels,
            cfg.condition_dim,
            cfg.filter_width,
        )
        conv_std = 1.0 / np.sqrt(r * k)
        return cls(
            W_f=_param((g, r, k), conv_std, rng, prefix + "W_f"),
            W_g=_param((g, r, k), conv_std, rng, prefix + "W_g"),
            b_f=_param((g,), 0, rng, prefix + "b_f"),
            b_g=_param((g,), 0, rng, prefix + "b_g"),
            V_f=_param((g, d), 1.0 / np.sqrt(d), rng, prefix + "V_f"),
            V_g=_param((g, d), 1.0 / np.sqrt(d), rng, prefix + "V_g"),
            W_res=_param((r, g), 1.0 / np.sqrt(g), rng, prefix + "W_res"),
            b_res=_param((r,), 0, rng, prefix + "b_res"),
            W_skip=_param((s, g), 1.0 / np.sqrt(g), rng, prefix + "W_skip"),
            b_skip=_param((s,), 0, rng, prefix + "b_skip"),
            dilation=dilation,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "dilation"}


def residual_block_forward(
    block: ResidualBlock, h: Tensor, c: Tensor, c_repeat: int = 1
) -> tuple[Tensor, Tensor]:
    """Gated unit ``tanh(W_f*h + V_f c) * sigmoid(W_g*h + V_g c)`` plus residual/skip 1x1s.

    With ``c_repeat > 1``, ``c`` is at frame rate and its projections are
    repeated to sample rate (cheaper, identical result).
    """
    if h.shape[-1] != c.shape[-1] * c_repeat:
        raise DimensionError(f"h has {h.shape[-1]} steps, condition covers {c.shape[-1] * c_repeat}")
    cond_f = conv1x1(c, block.V_f, None)
    cond_g = conv1x1(c, block.V_g, None)
    if c_repeat > 1:
        cond_f = repeat_time(cond_f, c_repeat)
        cond_g = repeat_time(cond_g, c_repeat)
    filt = add(conv1d_causal(h, block.W_f, block.b_f, block.dilation), cond_f)
    gate = add(conv1d_causal(h, block.W_g, block.b_g, block.dilation), cond_g)
    g = multiply(tanh(filt), sigmoid(gate))
    residual = add(h, conv1x1(g, block.W_res, block.b_res))
    skip = conv1x1(g, block.W_skip, block.b_skip)
    return residual, skip


@dataclass
class SecondaryPrediction:
    cepstra: Tensor | None
    logf0: Tensor | None
    vuv: Tensor | None


class MTLHead:
    """Per-frame linear map from the conditioner output to cepstra, log F0, V/UV."""

    def __init__(self, cfg: WaveNetConfig, weight: Tensor, bias: Tensor):
        self.cfg = cfg
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, cfg: WaveNetConfig, rng) -> "MTLHead":
        d = cfg.condition_dim
        return cls(
            cfg,
            _param((cfg.head_dim, d), 1.0 / np.sqrt(d), rng, "head.weight"),
            _param((cfg.head_dim,), 0, rng, "head.bias"),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def mtl_head_forward(head: MTLHead, frame_encoding: Tensor) -> SecondaryPrediction:
    cfg = head.cfg
    out = conv1x1(frame_encoding, head.weight, head.bias)
    row = 0
    cep = logf0 = vuv = None
    if cfg.n_cepstra:
        cep = slice_channels(out, 0, cfg.n_cepstra)
        row = cfg.n_cepstra
    if cfg.predict_logf0:
        logf0 = slice_channels(out, row, row + 1)
        row += 1
    if cfg.predict_vuv:
        vuv = sigmoid(slice_channels(out, row, row + 1))
    return SecondaryPrediction(cep, logf0, vuv)


class WaveNet:
    """Input embedding, residual stack, and the relu/1x1/relu/1x1 output stack."""

    def __init__(self, cfg: WaveNetConfig, params: dict[str, Tensor], blocks: list[ResidualBlock]):
        self.cfg = cfg
        self.embed_w = params["embed.weight"]
        self.embed_b = params["embed.bias"]
        self.out1_w = params["out1.weight"]
        self.out1_b = params["out1.bias"]
        self.out2_w = params["out2.weight"]
        self.out2_b = params["out2.bias"]
        self.blocks = blocks

    @classmethod
    def init(cls, cfg: WaveNetConfig, rng) -> "WaveNet":
        r, s = cfg.residual_channels, cfg.skip_channels
        params = {
            "embed.weight": _param((r, LEVELS), 1.0, rng, "embed.weight"),
            "embed.bias": _param((r,), 0, rng, "embed.bias"),
        }
        blocks = [ResidualBlock.init(cfg, d, rng, f"block.{i}.") for i, d in enumerate(cfg.dilations())]
        params["out1.weight"] = _param((s, s), 1.0 / np.sqrt(s), rng, "out1.weight")
        params["out1.bias"] = _param((s,), 0, rng, "out1.bias")
        # zero final layer: uniform logits at step 0
        params["out2.weight"] = _param((LEVELS, s), 0, rng, "out2.weight")
        params["out2.bias"] = _param((LEVELS,), 0, rng, "out2.bias")
        return cls(cfg, params, blocks)

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "embed.weight": self.embed_w,
            "embed.bias": self.embed_b,
        }
        for i, b in enumerate(self.blocks):
            for k, v in b.parameters().items():
                out[f"block.{i}.{k}"] = v
        out.update(
            {
                "out1.weight": self.out1_w,
                "out1.bias": self.out1_b,
                "out2.weight": self.out2_w,
                "out2.bias": self.out2_b,
            }
        )
        return out

    def forward_inputs(self, input_bins, c: Tensor, c_repeat: int = 1) -> Tensor:
        """Logits from already-shifted input bins ``[T]`` or ``[B, T]``."""
        input_bins = np.asarray(input_bins, dtype=np.int64)
        if c.shape[0] != self.cfg.condition_dim:
            raise DimensionError(f"condition dim {c.shape[0]} != {self.cfg.condition_dim}")
        h = add_bias(embed(self.embed_w, input_bins), self.embed_b)
        skips = None
        for block in self.blocks:
            h, skip = residual_block_forward(block, h, c, c_repeat)
            skips = skip if skips is None else add(skips, skip)
        out = relu(skips)
        out = relu(conv1x1(out, self.out1_w, self.out1_b))
        return conv1x1(out, self.out2_w, self.out2_b)


def shift_right(bins) -> np.ndarray:
    """Prepend the silence bin and drop the last sample, along the last axis."""
    bins = np.asarray(bins, dtype=np.int64)
    pad = np.full(bins.shape[:-1] + (1,), SILENCE_BIN, dtype=np.int64)
    return np.concatenate([pad, bins[..., :-1]], axis=-1)


def onehot_to_bins(x_onehot) -> np.ndarray:
    x = x_onehot.data if isinstance(x_onehot, Tensor) else np.asarray(x_onehot)
    if x.shape[0] != LEVELS:
        raise DimensionError(f"one-hot input must have {LEVELS} rows, got {x.shape}")
    if not (np.all((x == 0) | (x == 1)) and np.all(x.sum(axis=0) == 1)):
        raise ValueError("input columns are not one-hot")
    return x.argmax(axis=0)


def wavenet_forward(model: WaveNet, x_onehot, c_samples: Tensor) -> Tensor:
    """Teacher-forced logits; column t is the prediction for sample t given samples < t."""
    bins = onehot_to_bins(x_onehot)
    if c_samples.shape[-1] != bins.shape[-1]:
        raise DimensionError("waveform and condition lengths differ")
    return model.forward_inputs(shift_right(bins), c_samples)


class MultiTaskWaveNet:
    """Conditioner, sample-level WaveNet and secondary head sharing one parameter set."""

    def __init__(self, cfg: WaveNetConfig, conditioner: Conditioner, wavenet: WaveNet, head: MTLHead):
        self.cfg = cfg
        self.conditioner = conditioner
        self.wavenet = wavenet
        self.head = head

    @classmethod
    def init(cls, cfg: WaveNetConfig, seed: int = 0) -> "MultiTaskWaveNet":
        rng = np.random.default_rng(seed)
        cond = Conditioner.init(cfg.linguistic_dim, cfg.cond_channels, cfg.cond_layers, cfg.cond_filter_width, rng)
        return cls(cfg, cond, WaveNet.init(cfg, rng), MTLHead.init(cfg, rng))

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.conditioner.parameters())
        out.update(self.wavenet.parameters())
        out.update(self.head.parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks parameter(s): {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"parameter {k}: checkpoint shape {state[k].shape} != model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
