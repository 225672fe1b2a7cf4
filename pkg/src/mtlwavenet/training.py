"""Teacher-forced training under the three condition modes.

Each step draws its batch from ``default_rng([seed, step])``, so a run is a
pure function of (corpus, configs, seed) and resuming from a checkpoint only
needs the step counter and the optimizer moments.
"""

from __future__ import annotations

import configparser
import json
import math
import queue
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .codec import SILENCE_BIN
from .container import read_container, write_container
from .corpus import Utterance
from .model import ConfigError, MultiTaskWaveNet, SecondaryPrediction, WaveNetConfig, mtl_head_forward, receptive_field
from .tensor import (
    DimensionError,
    GradTape,
    NumericError,
    Tensor,
    add,
    crop_time,
    mse,
    scale,
    softmax_cross_entropy,
    take_time,
)


class ConditionMode(str, Enum):
    LINGUISTIC_ONLY = "linguistic"
    LINGUISTIC_PLUS_F0 = "linguistic+f0"
    MTL = "mtl"

    @property
    def uses_head(self) -> bool:
        return self is ConditionMode.MTL

    @property
    def needs_f0(self) -> bool:
        return self is ConditionMode.LINGUISTIC_PLUS_F0

    @classmethod
    def parse(cls, name: str) -> "ConditionMode":
        for m in cls:
            if m.value == name or m.name == name:
                return m
        raise ConfigError(f"unknown condition mode {name!r}; choose from {[m.value for m in cls]}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    window_samples: int = 0  # 0: twice the receptive field, rounded up to whole frames
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    lambda_cep: float = 1.0
    lambda_f0: float = 1.0
    lambda_vuv: float = 1.0
    checkpoint_every: int = 500
    prefetch: bool = True

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        for name in ("batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0 or self.window_samples < 0:
            raise ConfigError("steps and window_samples must be >= 0")
        for name in ("lambda_cep", "lambda_f0", "lambda_vuv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def loss_weights(self) -> dict[str, float]:
        return {"cep": self.lambda_cep, "f0": self.lambda_f0, "vuv": self.lambda_vuv}

    def resolved_window(self, model_cfg: WaveNetConfig, frame_shift: int) -> int:
        """Window length in samples, checked against the receptive field."""
        n = receptive_field(model_cfg)
        window = self.window_samples or math.ceil(2 * n / frame_shift) * frame_shift
        if window % frame_shift:
            raise ConfigError(f"window_samples={window} is not a multiple of frame_shift={frame_shift}")
        if window <= n:
            raise ConfigError(f"window_samples={window} must exceed the receptive field {n}")
        return window


_SECTIONS = {
    "optimizer": ("learning_rate", "beta1", "beta2", "epsilon"),
    "batch": ("window_samples", "batch_size", "prefetch"),
    "training": ("steps", "seed", "checkpoint_every"),
    "loss_weights": ("lambda_cep", "lambda_f0", "lambda_vuv"),
}


def _coerce(raw: str, kind, key: str):
    try:
        if kind is bool or isinstance(kind, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def parse_config(text: str, source: str = "<config>") -> tuple[TrainConfig, WaveNetConfig]:
    """Read training and model settings from INI text; unknown keys are errors.

    Sections: [optimizer], [batch], [training], [loss_weights] and [model]
    (any :class:`WaveNetConfig` field except ``loss_weights``).
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    train_types = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}
    model_defaults = WaveNetConfig()
    model_types = {f.name: type(getattr(model_defaults, f.name)) for f in fields(WaveNetConfig) if f.name != "loss_weights"}
    train_values, model_values = {}, {}
    for section in parser.sections():
        items = parser[section]
        if section == "model":
            for key, raw in items.items():
                if key not in model_types:
                    raise ConfigError(f"{source}: unknown key {key!r} in [model]")
                model_values[key] = _coerce(raw, model_types[key], key)
        elif section in _SECTIONS:
            for key, raw in items.items():
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                train_values[key] = _coerce(raw, train_types[key], key)
        else:
            raise ConfigError(f"{source}: unknown section [{section}]")
    train_cfg = TrainConfig(**train_values)
    train_cfg.validate()
    model_cfg = WaveNetConfig(**model_values)
    model_cfg.loss_weights = train_cfg.loss_weights
    return train_cfg, model_cfg


def load_config(path) -> tuple[TrainConfig, WaveNetConfig]:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def format_config(train_cfg: TrainConfig, model_cfg: WaveNetConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {getattr(train_cfg, k)}" for k in keys]
        lines.append("")
    lines.append("[model]")
    lines += [f"{f.name} = {getattr(model_cfg, f.name)}" for f in fields(WaveNetConfig) if f.name != "loss_weights"]
    return "\n".join(lines) + "\n"


# --- target normalization and condition features ---------------------------


@dataclass
class TargetStats:
    """Training-corpus statistics that put secondary targets on a unit scale."""

    cep_mean: np.ndarray
    cep_std: np.ndarray
    logf0_mean: float
    logf0_std: float

    @classmethod
    def from_corpus(cls, utterances: list[Utterance]) -> "TargetStats":
        cep = np.concatenate([u.cepstra for u in utterances], axis=1)
        logf0 = np.concatenate([u.logf0[0][u.vuv[0] > 0.5] for u in utterances])
        cep_std = cep.std(axis=1)
        lf_mean = float(logf0.mean()) if logf0.size else 0.0
        lf_std = float(logf0.std()) if logf0.size > 1 else 1.0
        return cls(cep.mean(axis=1), np.where(cep_std > 1e-8, cep_std, 1.0), lf_mean, lf_std if lf_std > 1e-8 else 1.0)

    def cepstra(self, cep: np.ndarray) -> np.ndarray:
        return (cep - self.cep_mean[:, None]) / self.cep_std[:, None]

    def logf0(self, logf0: np.ndarray, vuv: np.ndarray) -> np.ndarray:
        return np.where(vuv > 0.5, (logf0 - self.logf0_mean) / self.logf0_std, 0.0)

    def to_dict(self) -> dict:
        return {
            "cep_mean": self.cep_mean.tolist(),
            "cep_std": self.cep_std.tolist(),
            "logf0_mean": self.logf0_mean,
            "logf0_std": self.logf0_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetStats":
        return cls(np.asarray(d["cep_mean"]), np.asarray(d["cep_std"]), float(d["logf0_mean"]), float(d["logf0_std"]))


class ModeError(ValueError):
    """Conditioning inputs do not fit the checkpoint's condition mode."""


def condition_features(utt: Utterance, mode: ConditionMode, stats: TargetStats) -> np.ndarray:
    """Per-frame conditioner input for ``mode``: linguistic, plus oracle F0 when asked."""
    if not mode.needs_f0:
        return utt.linguistic
    if utt.logf0 is None or utt.vuv is None:
        raise ModeError(f"{utt.utt_id}: mode {mode.value} needs an F0 source but the utterance has none")
    return np.concatenate([utt.linguistic, stats.logf0(utt.logf0, utt.vuv), utt.vuv], axis=0)


def input_dim(linguistic_dim: int, mode: ConditionMode) -> int:
    return linguistic_dim + (2 if mode.needs_f0 else 0)


# --- batching --------------------------------------------------------------


@dataclass
class Batch:
    """One training batch of ``B`` windows.

    ``inputs`` covers ``context + window`` samples; only the final ``window``
    positions are scored. Frame indices of -1 mark positions before the
    utterance start (silence input, zero condition, no secondary target).
    """

    utt_index: np.ndarray  # [B]
    start_frame: np.ndarray  # [B], may be negative for short utterances
    targets: np.ndarray  # [B, W] bins
    inputs: np.ndarray  # [B, L + W] shifted bins
    frame_index: np.ndarray  # [B, Lf + Wf]
    features: np.ndarray  # [D, B, F_max] right-padded
    lengths: np.ndarray  # [B]
    cepstra: np.ndarray  # [n_cep, B, Wf]
    logf0: np.ndarray  # [1, B, Wf]
    vuv: np.ndarray  # [1, B, Wf]
    frame_valid: np.ndarray  # [1, B, Wf]
    frame_shift: int
    context_frames: int

    @property
    def window_frames(self) -> int:
        return self.cepstra.shape[-1]


@dataclass
class BatchSource:
    """Precomputed per-utterance arrays that every batch slices from."""

    bins: list[np.ndarray]
    features: list[np.ndarray]
    cepstra: list[np.ndarray]
    logf0: list[np.ndarray]
    vuv: list[np.ndarray]
    frame_shift: int

    @classmethod
    def build(cls, utterances: list[Utterance], mode: ConditionMode, stats: TargetStats) -> "BatchSource":
        if not utterances:
            raise ValueError("training corpus is empty")
        shifts = {u.frame_shift for u in utterances}
        if len(shifts) != 1:
            raise ValueError(f"mixed frame shifts in corpus: {sorted(shifts)}")
        return cls(
            bins=[u.bins for u in utterances],
            features=[condition_features(u, mode, stats) for u in utterances],
            cepstra=[stats.cepstra(u.cepstra) for u in utterances],
            logf0=[stats.logf0(u.logf0, u.vuv) for u in utterances],
            vuv=[np.asarray(u.vuv, dtype=np.float64) for u in utterances],
            frame_shift=shifts.pop(),
        )

    def __len__(self) -> int:
        return len(self.bins)


def window_start_range(n_frames: int, window_frames: int) -> tuple[int, int]:
    """Inclusive range of window start frames.

    A short utterance gets one negative start, which left-pads it so the
    window ends on its final frame.
    """
    last = n_frames - window_frames
    return (last, last) if last < 0 else (0, last)


def draw_batch(source: BatchSource, window_samples: int, batch_size: int, rng, context_samples: int = 0) -> Batch:
    shift = source.frame_shift
    if window_samples < 1 or window_samples % shift:
        raise ValueError(f"window_samples={window_samples} must be a positive multiple of {shift}")
    if context_samples % shift:
        raise ValueError(f"context_samples={context_samples} must be a multiple of {shift}")
    wf, lf = window_samples // shift, context_samples // shift
    utt_index = rng.integers(0, len(source), size=batch_size)
    starts = np.empty(batch_size, dtype=np.int64)
    for b, u in enumerate(utt_index):
        lo, hi = window_start_range(source.features[u].shape[1], wf)
        starts[b] = rng.integers(lo, hi + 1)

    total = context_samples + window_samples
    lengths = np.array([source.features[u].shape[1] for u in utt_index])
    f_max = int(lengths.max())
    dim = source.features[0].shape[0]
    features = np.zeros((dim, batch_size, f_max))
    inputs = np.full((batch_size, total), SILENCE_BIN, dtype=np.int64)
    targets = np.full((batch_size, window_samples), SILENCE_BIN, dtype=np.int64)
    frame_index = np.full((batch_size, lf + wf), -1, dtype=np.int64)
    n_cep = source.cepstra[0].shape[0]
    cep = np.zeros((n_cep, batch_size, wf))
    logf0 = np.zeros((1, batch_size, wf))
    vuv = np.zeros((1, batch_size, wf))
    valid = np.zeros((1, batch_size, wf))
    for b, u in enumerate(utt_index):
        n = lengths[b]
        features[:, b, :n] = source.features[u]
        bins = source.bins[u]
        s0 = starts[b] * shift
        # input at absolute sample p is the bin at p - 1 (silence before the start)
        absolute = np.arange(s0 - context_samples, s0 + window_samples)
        prev = absolute - 1
        ok = prev >= 0
        inputs[b, ok] = bins[prev[ok]]
        tgt = absolute[context_samples:]
        ok_t = tgt >= 0
        targets[b, ok_t] = bins[tgt[ok_t]]
        frames = np.arange(starts[b] - lf, starts[b] + wf)
        frame_index[b] = np.where(frames >= 0, frames, -1)
        win = frames[lf:]
        ok_f = win >= 0
        cep[:, b, ok_f] = source.cepstra[u][:, win[ok_f]]
        logf0[:, b, ok_f] = source.logf0[u][:, win[ok_f]]
        vuv[:, b, ok_f] = source.vuv[u][:, win[ok_f]]
        valid[:, b, ok_f] = 1.0
    return Batch(utt_index, starts, targets, inputs, frame_index, features, lengths, cep, logf0, vuv, valid, shift, lf)


def make_batches(source: BatchSource, window_samples: int, batch_size: int, rng, context_samples: int = 0):
    """Endless stream of batches drawn from ``rng``."""
    while True:
        yield draw_batch(source, window_samples, batch_size, rng, context_samples)


def step_batch(source: BatchSource, config: TrainConfig, window: int, context: int, step: int) -> Batch:
    return draw_batch(source, window, config.batch_size, np.random.default_rng([config.seed, step]), context)


def context_samples_for(model_cfg: WaveNetConfig, frame_shift: int) -> int:
    """History prepended to each window so every scored sample sees its full receptive field."""
    return math.ceil((receptive_field(model_cfg) - 1) / frame_shift) * frame_shift


# --- loss ------------------------------------------------------------------


@dataclass
class SecondaryTarget:
    cepstra: np.ndarray
    logf0: np.ndarray
    vuv: np.ndarray
    frame_mask: np.ndarray | None = None  # frames that exist (all if None)


def composite_loss(
    logits: Tensor,
    target_bins,
    secondary_pred: SecondaryPrediction | None = None,
    secondary_target: SecondaryTarget | None = None,
    vuv_mask=None,
    weights: dict[str, float] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Cross-entropy plus weighted secondary MSEs; log F0 is scored on voiced frames only.

    Without a secondary prediction the total is the cross-entropy alone.
    """
    ce = softmax_cross_entropy(logits, target_bins)
    parts = {"ce": float(ce.data)}
    if secondary_pred is None:
        parts["total"] = parts["ce"]
        return ce, parts
    if secondary_target is None:
        raise ValueError("secondary prediction given without targets")
    weights = {"cep": 1.0, "f0": 1.0, "vuv": 1.0, **(weights or {})}
    frame_mask = secondary_target.frame_mask
    voiced = np.asarray(secondary_target.vuv if vuv_mask is None else vuv_mask, dtype=np.float64) > 0.5
    if frame_mask is not None:
        voiced = voiced & (np.asarray(frame_mask) > 0.5)
    total = ce
    for key, pred, target, mask in (
        ("cep", secondary_pred.cepstra, secondary_target.cepstra, frame_mask),
        ("f0", secondary_pred.logf0, secondary_target.logf0, voiced),
        ("vuv", secondary_pred.vuv, secondary_target.vuv, frame_mask),
    ):
        if pred is None:
            continue
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise DimensionError(f"{key}: prediction {pred.shape} vs target {target.shape}")
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), target.shape)
        term = mse(pred, Tensor(target), mask)
        parts[key] = float(term.data)
        if weights[key]:
            total = add(total, scale(term, float(weights[key])))
    parts["total"] = float(total.data)
    return total, parts


def batch_forward(model: MultiTaskWaveNet, batch: Batch, mode: ConditionMode, weights: dict[str, float]):
    """Conditioner, windowed WaveNet and (in MTL mode) the secondary head on one batch."""
    encoding = model.conditioner.encode(Tensor(batch.features), batch.lengths)
    window_cond = take_time(encoding, batch.frame_index)
    logits = model.wavenet.forward_inputs(batch.inputs, window_cond, c_repeat=batch.frame_shift)
    scored = crop_time(logits, batch.context_frames * batch.frame_shift)
    if not mode.uses_head:
        return composite_loss(scored, batch.targets)
    pred = mtl_head_forward(model.head, crop_time(window_cond, batch.context_frames))
    target = SecondaryTarget(batch.cepstra, batch.logf0, batch.vuv, batch.frame_valid)
    return composite_loss(scored, batch.targets, pred, target, weights=weights)


# --- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])
        self.t = t


def trainable_parameters(model: MultiTaskWaveNet, mode: ConditionMode) -> dict[str, Tensor]:
    """Everything except the secondary head, which only MTL mode trains."""
    params = model.parameters()
    if not mode.uses_head:
        params = {k: v for k, v in params.items() if not k.startswith("head.")}
    return params


# --- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    run_id: str
    mode: ConditionMode
    seed: int
    model_config: WaveNetConfig
    train_config: TrainConfig
    stats: TargetStats
    params: dict[str, np.ndarray]
    adam_state: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    corpus_checksum: str = ""

    def build_model(self) -> MultiTaskWaveNet:
        model = MultiTaskWaveNet.init(self.model_config, self.seed)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "kind": "checkpoint",
        "run_id": ckpt.run_id,
        "step": ckpt.step,
        "mode": ckpt.mode.value,
        "seed": ckpt.seed,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": asdict(ckpt.train_config),
        "stats": ckpt.stats.to_dict(),
        "adam_t": ckpt.adam_t,
        "corpus_checksum": ckpt.corpus_checksum,
    }
    arrays = {f"param.{k}": v for k, v in ckpt.params.items()}
    arrays.update(ckpt.adam_state)
    write_container(path, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ConfigError(f"{path}: not a checkpoint (kind={header.get('kind')!r})")
    return Checkpoint(
        step=int(header["step"]),
        run_id=header["run_id"],
        mode=ConditionMode.parse(header["mode"]),
        seed=int(header["seed"]),
        model_config=WaveNetConfig.from_dict(header["model_config"]),
        train_config=TrainConfig(**header["train_config"]),
        stats=TargetStats.from_dict(header["stats"]),
        params={k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")},
        adam_state={k: v for k, v in arrays.items() if k.startswith("adam.")},
        adam_t=int(header["adam_t"]),
        corpus_checksum=header.get("corpus_checksum", ""),
    )


# --- loss log ------------------------------------------------------------------


def log_columns(mode: ConditionMode) -> list[str]:
    cols = ["step", "ce"]
    if mode.uses_head:
        cols += ["cep", "f0", "vuv"]
    return cols + ["total", "wall_time"]


def read_loss_log(path) -> tuple[dict, list[dict]]:
    """Header record and per-step records of a JSON-lines loss log."""
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or "run_id" not in lines[0]:
        raise ValueError(f"{path}: loss log has no header line")
    return lines[0], lines[1:]


# --- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    step: int
    run_id: str
    log: list[dict]
    checkpoints: list[Path]
    stats: TargetStats


def _prefetch(make, steps: range, stop: threading.Event, capacity: int = 2):
    """Yield ``make(step)`` for each step, built on a producer thread one queue ahead."""
    q: queue.Queue = queue.Queue(maxsize=capacity)

    def produce():
        try:
            for s in steps:
                item = make(s)
                while not stop.is_set():
                    try:
                        q.put((s, item, None), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except Exception as exc:  # handed to the consumer
            q.put((None, None, exc))

    worker = threading.Thread(target=produce, name="prefetch", daemon=True)
    worker.start()
    try:
        for _ in steps:
            s, item, exc = q.get()
            if exc is not None:
                raise exc
            yield s, item
    finally:
        stop.set()
        worker.join(timeout=5)


def _first_nonfinite(grads: dict[str, np.ndarray]) -> str | None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            return k
    return None


def train(
    model: MultiTaskWaveNet,
    corpus: list[Utterance],
    config: TrainConfig,
    mode: ConditionMode,
    out_dir=None,
    run_id: str | None = None,
    resume: Checkpoint | None = None,
    stats: TargetStats | None = None,
    corpus_checksum: str = "",
) -> TrainResult:
    """Adam on the composite loss for ``config.steps`` steps (resuming if asked).

    With ``out_dir`` the loss log (``loss.jsonl``) and checkpoints are written
    there. A non-finite loss or gradient raises :class:`NumericError` naming
    the first offending parameter.
    """
    config.validate()
    mode = ConditionMode(mode)
    cfg = model.cfg
    if stats is None:
        stats = resume.stats if resume is not None else TargetStats.from_corpus(corpus)
    source = BatchSource.build(corpus, mode, stats)
    expected_dim = source.features[0].shape[0]
    if cfg.linguistic_dim != expected_dim:
        raise ConfigError(f"model linguistic_dim={cfg.linguistic_dim} but mode {mode.value} gives {expected_dim} input features")
    if mode.uses_head and cfg.n_cepstra != source.cepstra[0].shape[0]:
        raise ConfigError(f"model n_cepstra={cfg.n_cepstra} but corpus has {source.cepstra[0].shape[0]}")
    window = config.resolved_window(cfg, source.frame_shift)
    context = context_samples_for(cfg, source.frame_shift)
    weights = config.loss_weights

    params = trainable_parameters(model, mode)
    adam = Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    start = 0
    if resume is not None:
        if resume.mode != mode:
            raise ModeError(f"checkpoint was trained in mode {resume.mode.value}, not {mode.value}")
        model.load_state_dict(resume.params)
        adam.load_arrays(resume.adam_state, resume.adam_t)
        start = resume.step
        run_id = run_id or resume.run_id
    run_id = run_id or uuid.uuid4().hex[:12]

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_records: list[dict] = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "loss.jsonl"
        header = {"run_id": run_id, "mode": mode.value, "columns": log_columns(mode)}
        if start and log_path.exists():
            _, old = read_loss_log(log_path)
            log_records = [r for r in old if r["step"] < start]
        with open(log_path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for r in log_records:
                fh.write(json.dumps(r) + "\n")

    def checkpoint(step: int) -> Checkpoint:
        return Checkpoint(
            step=step,
            run_id=run_id,
            mode=mode,
            seed=config.seed,
            model_config=cfg,
            train_config=config,
            stats=stats,
            params=model.state_dict(),
            adam_state={k: v.copy() for k, v in adam.state_arrays().items()},
            adam_t=adam.t,
            corpus_checksum=corpus_checksum,
        )

    saved: list[Path] = []
    steps = range(start, config.steps)

    def make(s):
        return step_batch(source, config, window, context, s)

    stop = threading.Event()
    stream = _prefetch(make, steps, stop) if config.prefetch else ((s, make(s)) for s in steps)
    t0 = time.perf_counter()
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        for s, batch in stream:
            with GradTape() as tape:
                total, parts = batch_forward(model, batch, mode, weights)
            grads_by_tensor = tape.backward(total)
            grads = {k: grads_by_tensor.get(p, np.zeros_like(p.data)) for k, p in params.items()}
            bad = _first_nonfinite(grads)
            if not math.isfinite(parts["total"]) or bad is not None:
                where = f"first non-finite gradient in parameter {bad}" if bad else "all gradients finite"
                raise NumericError(f"step {s}: loss {parts['total']}; {where}")
            adam.step(grads)
            record = {"step": s, "ce": parts["ce"]}
            if mode.uses_head:
                record.update({k: parts.get(k) for k in ("cep", "f0", "vuv")})
            record["total"] = parts["total"]
            record["wall_time"] = round(time.perf_counter() - t0, 3)
            log_records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            done = s + 1
            if out is not None and (done % config.checkpoint_every == 0 or done == config.steps):
                path = out / "checkpoints" / f"step_{done:07d}.ckpt"
                save_checkpoint(path, checkpoint(done))
                saved.append(path)
    finally:
        stop.set()
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(out / "model.ckpt", checkpoint(max(start, config.steps)))
        saved.append(out / "model.ckpt")
    return TrainResult(max(start, config.steps), run_id, log_records, saved, stats)


def fit_fixed_batch(
    model: MultiTaskWaveNet, batch: Batch, mode: ConditionMode, config: TrainConfig, steps: int
) -> list[dict]:
    """Repeated Adam steps on one batch; the per-step loss parts, in order."""
    mode = ConditionMode(mode)
    params = trainable_parameters(model, mode)
    adam = Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    history = []
    for _ in range(steps):
        with GradTape() as tape:
            total, parts = batch_forward(model, batch, mode, config.loss_weights)
        grads = tape.backward(total)
        adam.step({k: grads.get(p, np.zeros_like(p.data)) for k, p in params.items()})
        history.append(parts)
    return history


def build_model(model_cfg: WaveNetConfig, corpus_linguistic_dim: int, mode: ConditionMode, seed: int) -> MultiTaskWaveNet:
    """Fresh model whose conditioner input width matches ``mode``."""
    cfg = replace(model_cfg, linguistic_dim=input_dim(corpus_linguistic_dim, mode))
    return MultiTaskWaveNet.init(cfg, seed)
