"""Dense float64 tensors with a reverse-mode gradient tape.

Arrays are channels-first: ``[C, T]`` or batched ``[C, B, T]``, so every
convolution collapses to a single 2-D matrix product. Ops only
record onto a tape when one is active (``with GradTape() as tape:``) and at
least one input requires a gradient; outside a tape everything is plain
numpy evaluation, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeUsageError(RuntimeError):
    """Backward called on something the tape did not produce."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.name = None
        out._tape = None
        return out

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.float64(value), like.shape))


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._tape = None
    return out


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` and, if needed, register ``backward`` on the active tape.

    ``backward(grad_out)`` returns one gradient (or None) per input.
    """
    out = _wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._push(out, tuple(inputs), backward)
    return out


class GradTape:
    """Ordered record of executed ops, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def _push(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        out._tape = self
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` for every leaf tensor that requires one.

        Leaves that fed the graph but received no signal map to zeros.
        """
        if loss.data.size != 1:
            raise TapeUsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            if loss.requires_grad and loss._tape is None:
                return {loss: np.ones_like(loss.data)}
            raise TapeUsageError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, backward in reversed(self._records):
            g_out = grads.pop(id(out), None)
            for t in inputs:
                if t.requires_grad and t._tape is None:
                    leaves.setdefault(id(t), t)
            if g_out is None:
                continue
            for t, g in zip(inputs, backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    raise DimensionError(
                        f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
                    )
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run the backward pass on whichever tape produced ``loss``."""
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            return {loss: np.ones_like(loss.data)}
        raise TapeUsageError("tensor is not on any gradient tape")
    return tape.backward(loss)


# --- elementwise -----------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "multiply")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    return _record(a.data * k, (a,), lambda g: (g * k,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"multiply": multiply, "add": add}


def elementwise(a: Tensor, fn: str, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: tanh, sigmoid, relu, multiply, add."""
    if fn in _UNARY:
        return _UNARY[fn](a)
    if fn in _BINARY:
        if b is None:
            raise DimensionError(f"{fn} needs a second operand")
        return _BINARY[fn](a, b)
    raise ValueError(f"unknown elementwise function {fn!r}")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


# --- structural -------------------------------------------------------------


def _as2d(x: np.ndarray) -> np.ndarray:
    """``[C, ...]`` viewed as ``[C, N]`` (copies only if non-contiguous)."""
    return x.reshape(x.shape[0], -1)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along the channel axis by default."""
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(data, tuple(tensors), back)


def take_time(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather time columns. ``index`` is ``[T']`` or ``[B, T']``; -1 yields zeros."""
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    x = a.data
    if index.ndim == 1:
        out = x[..., safe] * valid
    else:
        if x.ndim != 3 or index.shape[0] != x.shape[1]:
            raise DimensionError(f"batched index {index.shape} does not fit tensor {x.shape}")
        out = np.take_along_axis(x, safe[None], axis=-1) * valid[None]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        if index.ndim == 1:
            np.add.at(gx, (Ellipsis, safe), g * valid)
        else:
            c = np.arange(shape[0])[:, None, None]
            b = np.arange(shape[1])[None, :, None]
            np.add.at(gx, (c, b, safe[None]), g * valid[None])
        return (gx,)

    return _record(out, (a,), back)


def repeat_time(a: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"repeat factor must be >= 1, got {factor}")
    out = np.repeat(a.data, factor, axis=-1)
    shape = a.shape

    def back(g):
        return (g.reshape(*shape, factor).sum(axis=-1),)

    return _record(out, (a,), back)


def embed(weight: Tensor, bins: np.ndarray) -> Tensor:
    """Columns of ``weight [C, V]`` picked by integer ``bins`` (``[T]`` or ``[B, T]``).

    Equal to ``conv1x1(one_hot(bins), weight)`` without the bias, at the cost
    of a gather instead of a dense product.
    """
    bins = np.asarray(bins, dtype=np.int64)
    w = weight.data
    out = w[:, bins]

    def back(g):
        gw = np.zeros_like(w)
        np.add.at(gw.T, bins.reshape(-1), _as2d(g).T)
        return (gw,)

    return _record(out, (weight,), back)


# --- convolutions -----------------------------------------------------------


def _check_conv_input(xd: np.ndarray, c_in: int) -> None:
    if xd.ndim not in (2, 3) or xd.shape[0] != c_in:
        raise DimensionError(f"input shape {xd.shape} does not match weight C_in={c_in}")


def conv1d_causal(x: Tensor, weight: Tensor, bias: Tensor | None, dilation: int = 1) -> Tensor:
    """Causal dilated convolution, left zero-padded so output length == input length.

    ``out[o, t] = bias[o] + sum_{i,k} weight[o, i, k] * x[i, t - (K-1-k) * dilation]``
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    w = weight.data
    if w.ndim != 3:
        raise DimensionError(f"conv weight must be [C_out, C_in, K], got {w.shape}")
    c_out, c_in, k = w.shape
    xd = x.data
    _check_conv_input(xd, c_in)
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
    t = xd.shape[-1]
    lead = xd.shape[1:-1]
    # im2col, tap-major rows: [K * C_in, ..., T]
    cols = np.zeros((k, c_in) + lead + (t,))
    for j in range(k):
        shift = (k - 1 - j) * dilation
        if shift < t:
            cols[j, ..., shift:] = xd[..., : t - shift]
    cols2 = cols.reshape(k * c_in, -1)
    w2 = w.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = w2 @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((c_out,) + lead + (t,))

    def back(g):
        g2 = _as2d(g)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape((k, c_in) + lead + (t,))
            gx = np.zeros_like(xd)
            for j in range(k):
                shift = (k - 1 - j) * dilation
                if shift < t:
                    gx[..., : t - shift] += gcols[j, ..., shift:]
        if weight.requires_grad:
            gw = (g2 @ cols2.T).reshape(c_out, k, c_in).transpose(0, 2, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gw, gb)

    inputs = (x, weight, bias if bias is not None else _wrap(np.zeros(c_out)))
    return _record(out, inputs, back)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Per-timestep affine map with ``weight [C_out, C_in]``."""
    w = weight.data
    if w.ndim != 2:
        raise DimensionError(f"1x1 weight must be [C_out, C_in], got {w.shape}")
    c_out, c_in = w.shape
    xd = x.data
    _check_conv_input(xd, c_in)
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
    x2 = _as2d(xd)
    out = w @ x2
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((c_out,) + xd.shape[1:])

    def back(g):
        g2 = _as2d(g)
        gx = (w.T @ g2).reshape(xd.shape) if x.requires_grad else None
        gw = g2 @ x2.T if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, weight, bias if bias is not None else _wrap(np.zeros(c_out)))
    return _record(out, inputs, back)


# --- losses ----------------------------------------------------------------


def log_softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under column softmaxes.

    ``logits`` is ``[V, T]`` (targets ``[T]``) or ``[V, B, T]`` (targets ``[B, T]``).
    """
    z = logits.data
    tgt = np.asarray(targets, dtype=np.int64)
    v = z.shape[0]
    if tgt.shape != z.shape[1:]:
        raise DimensionError(f"targets {tgt.shape} do not match logits {z.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target bins must lie in [0, {v - 1}]")
    logp = log_softmax(z)
    picked = np.take_along_axis(logp, tgt[None], axis=0)
    n = max(tgt.size, 1)
    loss = -picked.sum() / n

    def back(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, tgt[None], np.exp(picked) - 1.0, axis=0)
        return (grad * (float(g) / n),)

    return _record(np.asarray(loss), (logits,), back)


def mse(pred: Tensor, target: Tensor, mask=None) -> Tensor:
    """Mean squared error over the entries where ``mask`` is true (0 if none)."""
    _check_same(pred, target, "mse")
    diff = pred.data - target.data
    if mask is None:
        m = np.ones_like(diff)
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
        if m.shape != diff.shape:
            raise DimensionError(f"mask shape {m.shape} != {diff.shape}")
    count = m.sum()
    if count == 0:
        return _record(np.asarray(0.0), (pred, target), lambda g: (np.zeros_like(diff), np.zeros_like(diff)))
    loss = float((m * diff * diff).sum() / count)

    def back(g):
        gp = (2.0 * float(g) / count) * m * diff
        return (gp, -gp)

    return _record(np.asarray(loss), (pred, target), back)


# --- verification ----------------------------------------------------------


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Largest relative disagreement between tape and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``params``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    with GradTape() as tape:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("function value is not finite")
    grads = tape.backward(loss) if loss.requires_grad else {}
    worst = 0.0
    for p in params:
        g_ad = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        g_ad = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(fn().data)
            flat[i] = orig - epsilon
            down = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite value while perturbing {p.name or 'parameter'}[{i}]")
            g_fd = (up - down) / (2 * epsilon)
            denom = max(abs(g_ad[i]), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
    return worst


def slice_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` of the channel axis."""
    shape = a.shape
    if not 0 <= lo < hi <= shape[0]:
        raise DimensionError(f"channel slice {lo}:{hi} out of range for {shape}")

    def back(g):
        gx = np.zeros(shape)
        gx[lo:hi] = g
        return (gx,)

    return _record(a.data[lo:hi], (a,), back)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[..., c, t] + bias[c]``."""
    if bias.shape != (x.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match channels of {x.shape}")
    b = bias.data.reshape((-1,) + (1,) * (x.ndim - 1))
    return _record(x.data + b, (x, bias), lambda g: (g, _as2d(g).sum(axis=1)))


def crop_time(a: Tensor, lo: int, hi: int | None = None) -> Tensor:
    """Time steps ``lo:hi`` along the last axis."""
    shape = a.shape
    hi = shape[-1] if hi is None else hi
    if not 0 <= lo <= hi <= shape[-1]:
        raise DimensionError(f"time crop {lo}:{hi} out of range for {shape}")

    def back(g):
        gx = np.zeros(shape)
        gx[..., lo:hi] = g
        return (gx,)

    return _record(a.data[..., lo:hi], (a,), back)
