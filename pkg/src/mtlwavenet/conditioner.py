"""Shared conditional network: stacked bidirectional QRNN layers with fo-pooling.

Each direction is a causal QRNN; the backward direction runs the same
machinery over the time-reversed sequence. The top layer's output is used at
frame rate by the multi-task head and, repeated ``frame_shift`` times, at
sample rate by every residual block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    _record,
    concat,
    conv1d_causal,
    repeat_time,
    sigmoid,
    take_time,
    tanh,
)


@dataclass
class ConditionSequence:
    features: np.ndarray  # [D_lin, F]
    frame_shift: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise DimensionError(f"condition features must be [D, F>=1], got {self.features.shape}")


@dataclass
class QRNNLayer:
    W_h: Tensor
    W_o: Tensor
    W_f: Tensor
    B_h: Tensor
    B_o: Tensor
    B_f: Tensor

    @property
    def filter_width(self) -> int:
        return self.W_h.shape[2]

    @property
    def out_channels(self) -> int:
        return self.W_h.shape[0]

    @classmethod
    def init(cls, c_in: int, c_out: int, width: int, rng: np.random.Generator, prefix: str = "") -> "QRNNLayer":
        std = 1.0 / np.sqrt(c_in * width)

        def w(tag):
            return Tensor(rng.normal(0.0, std, (c_out, c_in, width)), requires_grad=True, name=prefix + tag)

        def b(tag):
            return Tensor(np.zeros(c_out), requires_grad=True, name=prefix + tag)

        return cls(w("W_h"), w("W_o"), w("W_f"), b("B_h"), b("B_o"), b("B_f"))

    def parameters(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("W_h", "W_o", "W_f", "B_h", "B_o", "B_f")}


def fo_pool(h_hat: Tensor, o: Tensor, f: Tensor, h0: Tensor | None = None) -> Tensor:
    """Run ``h_t = f_t h_{t-1} + (1 - f_t) h_hat_t`` and return ``z_t = o_t h_t``.

    Vectorized over channels (and batch); sequential over time.
    """
    if not (h_hat.shape == o.shape == f.shape):
        raise DimensionError(f"fo_pool shapes differ: {h_hat.shape}, {o.shape}, {f.shape}")
    hh, od, fd = h_hat.data, o.data, f.data
    state_shape = hh.shape[:-1]
    if h0 is None:
        h0 = Tensor(np.zeros(state_shape))
    if h0.shape != state_shape:
        raise DimensionError(f"h0 shape {h0.shape} != {state_shape}")
    steps = hh.shape[-1]
    h = np.empty(state_shape + (steps + 1,))
    h[..., 0] = h0.data
    for t in range(steps):
        ft = fd[..., t]
        h[..., t + 1] = ft * h[..., t] + (1.0 - ft) * hh[..., t]
    states = h[..., 1:]
    z = od * states

    def back(g):
        g_o = g * states
        g_hh = np.empty_like(hh)
        g_f = np.empty_like(fd)
        carry = np.zeros(state_shape)
        for t in range(steps - 1, -1, -1):
            gh = g[..., t] * od[..., t] + carry
            ft = fd[..., t]
            g_f[..., t] = gh * (h[..., t] - hh[..., t])
            g_hh[..., t] = gh * (1.0 - ft)
            carry = gh * ft
        return (g_hh, g_o, g_f, carry)

    return _record(z, (h_hat, o, f, h0), back)


def qrnn_forward(layer: QRNNLayer, x: Tensor) -> Tensor:
    h_hat = tanh(conv1d_causal(x, layer.W_h, layer.B_h))
    o = sigmoid(conv1d_causal(x, layer.W_o, layer.B_o))
    f = sigmoid(conv1d_causal(x, layer.W_f, layer.B_f))
    return fo_pool(h_hat, o, f)


def reverse_index(steps: int, lengths=None) -> np.ndarray:
    """Time-reversal gather index; with ``lengths`` each row flips only its valid prefix."""
    t = np.arange(steps)
    if lengths is None:
        return steps - 1 - t
    lengths = np.asarray(lengths, dtype=np.int64)[:, None]
    return np.where(t[None, :] < lengths, lengths - 1 - t[None, :], -1)


def bidirectional_qrnn(fwd: QRNNLayer, bwd: QRNNLayer, x: Tensor, lengths=None) -> Tensor:
    """Concatenate a forward QRNN with a QRNN run over the reversed input.

    For right-padded batches pass ``lengths``; padding never leaks into valid
    positions because both directions are causal over their own ordering.
    """
    if fwd.out_channels != bwd.out_channels:
        raise DimensionError("forward and backward QRNN widths differ")
    if lengths is not None and x.ndim != 3:
        raise DimensionError("lengths need a batched [C, B, T] input")
    idx = reverse_index(x.shape[-1], lengths)
    forward = qrnn_forward(fwd, x)
    backward = take_time(qrnn_forward(bwd, take_time(x, idx)), idx)
    return concat([forward, backward])


def upsample_repeat(frames: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    return repeat_time(frames, factor)


class Conditioner:
    """Stack of bidirectional QRNN layers; output width is ``2 * channels``."""

    def __init__(self, layers: list[tuple[QRNNLayer, QRNNLayer]]):
        if not layers:
            raise ValueError("conditioner needs at least one layer")
        self.layers = layers

    @classmethod
    def init(cls, input_dim: int, channels: int, n_layers: int, width: int, rng: np.random.Generator) -> "Conditioner":
        layers = []
        c_in = input_dim
        for i in range(n_layers):
            layers.append(
                (
                    QRNNLayer.init(c_in, channels, width, rng, prefix=f"cond.{i}.fwd."),
                    QRNNLayer.init(c_in, channels, width, rng, prefix=f"cond.{i}.bwd."),
                )
            )
            c_in = 2 * channels
        return cls(layers)

    @property
    def output_dim(self) -> int:
        return 2 * self.layers[-1][0].out_channels

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].W_h.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (f, b) in enumerate(self.layers):
            for k, v in f.parameters().items():
                out[f"cond.{i}.fwd.{k}"] = v
            for k, v in b.parameters().items():
                out[f"cond.{i}.bwd.{k}"] = v
        return out

    def encode(self, features: Tensor, lengths=None) -> Tensor:
        h = features
        for fwd, bwd in self.layers:
            h = bidirectional_qrnn(fwd, bwd, h, lengths)
        return h


def conditioner_forward(stack: Conditioner, cond: ConditionSequence) -> tuple[Tensor, Tensor]:
    """Frame-rate encoding for the secondary head and its sample-rate repetition."""
    frames = stack.encode(Tensor(cond.features))
    return frames, upsample_repeat(frames, cond.frame_shift)
