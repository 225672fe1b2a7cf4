"""Deterministic synthetic speech-like corpus with oracle F0 and V/UV.

Each "phoneme" symbol is either voiced, rendered as a harmonic complex with a
fixed per-symbol timbre whose pitch follows a per-symbol tone contour plus
utterance-level declination, or unvoiced, rendered as high-passed noise.
Pitch is therefore predictable from the linguistic context but never appears
in the linguistic features themselves.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import butter, lfilter

from .codec import SAMPLE_RATE, WaveformBuffer, mulaw_encode, peak_normalize, wav_read, wav_write
from .container import read_container, write_container

F0_LIMITS = (60.0, 400.0)
LOG_FLOOR = 1e-8


class CorpusSpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class CorpusSpec:
    n_symbols: int = 8
    n_voiced: int = 5
    n_utterances: int = 20
    min_frames: int = 40
    max_frames: int = 80
    min_segment_frames: int = 6
    max_segment_frames: int = 16
    f0_low: float = 120.0
    f0_high: float = 280.0
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    frame_shift: int = 80
    frame_length: int = 320
    n_cepstra: int = 25
    crossfade_ms: float = 5.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise CorpusSpecError(name, msg)

        need(self.n_symbols >= 2, "n_symbols", "need at least 2 symbols")
        need(1 <= self.n_voiced < self.n_symbols, "n_voiced", "must be in [1, n_symbols)")
        need(self.n_utterances >= 1, "n_utterances", "must be >= 1")
        need(1 <= self.min_frames <= self.max_frames, "min_frames", "need 1 <= min_frames <= max_frames")
        need(
            1 <= self.min_segment_frames <= self.max_segment_frames,
            "min_segment_frames",
            "need 1 <= min_segment_frames <= max_segment_frames",
        )
        need(F0_LIMITS[0] <= self.f0_low <= F0_LIMITS[1], "f0_low", f"must lie in {list(F0_LIMITS)} Hz")
        need(F0_LIMITS[0] <= self.f0_high <= F0_LIMITS[1], "f0_high", f"must lie in {list(F0_LIMITS)} Hz")
        need(self.f0_low < self.f0_high, "f0_high", "must exceed f0_low")
        need(self.sample_rate > 0, "sample_rate", "must be positive")
        need(self.frame_shift >= 1, "frame_shift", "must be >= 1")
        need(self.frame_length >= self.frame_shift, "frame_length", "must be >= frame_shift")
        need(1 <= self.n_cepstra <= self.frame_length // 2 + 1, "n_cepstra", "must fit the spectrum")
        need(self.crossfade_ms >= 0, "crossfade_ms", "must be >= 0")

    @property
    def linguistic_dim(self) -> int:
        return self.n_symbols + 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise CorpusSpecError(key, "unknown corpus spec key")
        return cls(**data)

    @classmethod
    def from_ini(cls, text: str, source: str = "<spec>") -> "CorpusSpec":
        """Parse a ``[corpus]`` section; any other section or key is rejected by name."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise CorpusSpecError("<file>", str(exc)) from exc
        for section in parser.sections():
            if section != "corpus":
                raise CorpusSpecError(f"[{section}]", "unknown section")
        values = {}
        if parser.has_section("corpus"):
            types = {f.name: type(f.default) for f in fields(cls)}
            for key, raw in parser["corpus"].items():
                if key not in types:
                    raise CorpusSpecError(key, "unknown corpus spec key")
                try:
                    values[key] = types[key](raw)
                except ValueError as exc:
                    raise CorpusSpecError(key, f"cannot parse {raw!r}") from exc
        return cls(**values)


@dataclass
class SegmentSpec:
    symbol_id: int
    duration_frames: int
    voiced: bool
    f0_start: float = 0.0
    f0_end: float = 0.0
    amplitude: float = 1.0
    harmonics: tuple[float, ...] | None = None  # overrides the symbol timbre

    def __post_init__(self):
        if self.duration_frames < 1:
            raise ValueError("duration_frames must be >= 1")
        if self.voiced:
            for name in ("f0_start", "f0_end"):
                v = getattr(self, name)
                if not F0_LIMITS[0] <= v <= F0_LIMITS[1]:
                    raise ValueError(f"{name}={v} outside {F0_LIMITS} Hz")


@dataclass
class Utterance:
    utt_id: str
    waveform: WaveformBuffer
    linguistic: np.ndarray  # [D_lin, F]
    cepstra: np.ndarray  # [n_cepstra, F]
    logf0: np.ndarray  # [1, F], 0 where unvoiced
    vuv: np.ndarray  # [1, F] of {0, 1}
    frame_shift: int = 80
    segments: list[SegmentSpec] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.linguistic.shape[1]

    @property
    def bins(self) -> np.ndarray:
        return mulaw_encode(self.waveform.samples)

    def f0_hz(self) -> np.ndarray:
        return np.where(self.vuv[0] > 0.5, np.exp(self.logf0[0]), 0.0)


# --- symbol inventory ---------------------------------------------------------

_TONE_RATIOS = (1.0, 1.3, 0.78, 1.15, 0.88, 1.22, 0.82)
_NOISE_CUTOFFS = (1000.0, 2500.0, 4000.0, 1800.0, 3200.0)


def symbol_base_f0(spec: CorpusSpec, symbol: int) -> float:
    """Geometric spacing of voiced-symbol base pitches inside [f0_low, f0_high]."""
    frac = (symbol + 0.5) / spec.n_voiced
    lo, hi = spec.f0_low * 1.1, spec.f0_high / 1.1
    return lo * (hi / lo) ** frac


def symbol_tone_ratio(symbol: int) -> float:
    return _TONE_RATIOS[symbol % len(_TONE_RATIOS)]


def symbol_harmonics(symbol: int, n: int = 6) -> tuple[float, ...]:
    """Decaying harmonic profile with one symbol-specific emphasized partial.

    The fundamental always carries the largest amplitude.
    """
    decay = 0.35 + 0.08 * (symbol % 5)
    amps = [decay ** h for h in range(n)]
    peak = 1 + (symbol % (n - 1))
    amps[peak] = min(0.9, amps[peak] + 0.45)
    return tuple(amps)


def noise_cutoff(spec: CorpusSpec, symbol: int) -> float:
    """High-pass corner of an unvoiced symbol's noise; broadband keeps it aperiodic."""
    cut = _NOISE_CUTOFFS[(symbol - spec.n_voiced) % len(_NOISE_CUTOFFS)]
    return min(cut, 0.5 * spec.sample_rate / 2)


# --- synthesis ----------------------------------------------------------------


def _glide(seg: SegmentSpec, n: int) -> np.ndarray:
    t = np.arange(n)
    return seg.f0_start + (seg.f0_end - seg.f0_start) * t / max(n, 1)


def _render_segment(seg: SegmentSpec, n_core: int, n_total: int, spec: CorpusSpec, rng, phase0: float = 0.0):
    """Render one segment; returns the samples and the phase (cycles) at the end of the core."""
    sr = spec.sample_rate
    if seg.voiced:
        f0 = np.concatenate([_glide(seg, n_core), np.full(n_total - n_core, seg.f0_end)])
        phase = phase0 + np.cumsum(f0) / sr
        harmonics = seg.harmonics if seg.harmonics is not None else symbol_harmonics(seg.symbol_id)
        out = np.zeros(n_total)
        for h, a in enumerate(harmonics, start=1):
            if a == 0:
                continue
            alias = h * f0 >= 0.48 * sr
            out += np.where(alias, 0.0, a * np.sin(2 * np.pi * h * phase))
        return seg.amplitude * out / max(sum(harmonics), 1e-12), float(phase[n_core - 1] % 1.0)
    b, a = butter(2, noise_cutoff(spec, seg.symbol_id) / (sr / 2), btype="high")
    noise = lfilter(b, a, rng.standard_normal(n_total))
    return seg.amplitude * noise / 0.5, 0.0


def synthesize(segments: list[SegmentSpec], spec: CorpusSpec, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Waveform (peak-normalized, PCM16 grid) and per-frame oracle F0 (0 = unvoiced)."""
    if not segments:
        raise ValueError("need at least one segment")
    rng = rng if rng is not None else np.random.default_rng(0)
    shift = spec.frame_shift
    fade = int(round(spec.sample_rate * spec.crossfade_ms / 1000.0))
    n_frames = sum(s.duration_frames for s in segments)
    n = n_frames * shift
    wave = np.zeros(n + fade)
    f0_frames = np.zeros(n_frames)
    start = 0
    frame = 0
    phase = 0.0
    for i, seg in enumerate(segments):
        core = seg.duration_frames * shift
        last = i == len(segments) - 1
        total = core if last else core + fade
        # phase carries across adjacent voiced segments, as in continuous phonation
        piece, phase = _render_segment(seg, core, total, spec, rng, phase)
        if fade:
            env = np.ones(total)
            if i > 0:
                env[:fade] = np.linspace(0.0, 1.0, fade, endpoint=False)
            if not last:
                env[core:] = np.linspace(1.0, 0.0, fade, endpoint=False)
            piece = piece * env
        wave[start:start + total] += piece
        if seg.voiced:
            centers = np.arange(seg.duration_frames) * shift + shift // 2
            f0_frames[frame:frame + seg.duration_frames] = _glide(seg, core)[centers]
        start += core
        frame += seg.duration_frames
    wave = peak_normalize(wave[:n], 0.95)
    # snap to the PCM16 grid so WAV storage is lossless
    wave = np.round(wave * 32768.0) / 32768.0
    return wave, f0_frames


def build_linguistic_features(segments: list[SegmentSpec], n_symbols: int, max_segment_frames: int = 16) -> np.ndarray:
    """One-hot symbol, position in segment, normalized duration, position in utterance.

    Voicing is deliberately absent: the model has to infer it from the symbol.
    """
    if not segments:
        raise ValueError("need at least one segment")
    n_frames = sum(s.duration_frames for s in segments)
    feats = np.zeros((n_symbols + 3, n_frames))
    f = 0
    for seg in segments:
        d = seg.duration_frames
        feats[seg.symbol_id, f:f + d] = 1.0
        feats[n_symbols, f:f + d] = np.arange(d) / d
        feats[n_symbols + 1, f:f + d] = d / max_segment_frames
        f += d
    feats[n_symbols + 2] = np.arange(n_frames) / n_frames
    return feats


def sample_segments(spec: CorpusSpec, rng: np.random.Generator) -> list[SegmentSpec]:
    n_frames = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    segments = []
    used = 0
    while used < n_frames:
        dur = int(rng.integers(spec.min_segment_frames, spec.max_segment_frames + 1))
        dur = min(dur, n_frames - used)
        symbol = int(rng.integers(0, spec.n_symbols))
        voiced = symbol < spec.n_voiced
        if voiced:
            base = symbol_base_f0(spec, symbol)
            start_pos = used / n_frames
            end_pos = (used + dur) / n_frames
            jitter = float(np.exp(rng.normal(0.0, 0.02)))
            f0_start = base * (1.0 - 0.1 * start_pos) * jitter
            f0_end = base * symbol_tone_ratio(symbol) * (1.0 - 0.1 * end_pos) * jitter
            f0_start = float(np.clip(f0_start, spec.f0_low, spec.f0_high))
            f0_end = float(np.clip(f0_end, spec.f0_low, spec.f0_high))
            amp = float(rng.uniform(0.6, 1.0))
            segments.append(SegmentSpec(symbol, dur, True, f0_start, f0_end, amp))
        else:
            segments.append(SegmentSpec(symbol, dur, False, amplitude=float(rng.uniform(0.15, 0.3))))
        used += dur
    return segments


def utterance_from_segments(spec: CorpusSpec, segments: list[SegmentSpec], utt_id: str, rng) -> Utterance:
    wave, f0 = synthesize(segments, spec, rng)
    voiced = f0 > 0
    logf0 = np.where(voiced, np.log(np.where(voiced, f0, 1.0)), 0.0)[None, :]
    cep = extract_cepstra(WaveformBuffer(wave, spec.sample_rate), spec.frame_shift, spec.frame_length, spec.n_cepstra)
    return Utterance(
        utt_id=utt_id,
        waveform=WaveformBuffer(wave, spec.sample_rate),
        linguistic=build_linguistic_features(segments, spec.n_symbols, spec.max_segment_frames),
        cepstra=cep,
        logf0=logf0,
        vuv=voiced.astype(np.float64)[None, :],
        frame_shift=spec.frame_shift,
        segments=segments,
    )


def generate_utterance(spec: CorpusSpec, index: int) -> Utterance:
    rng = np.random.default_rng([spec.seed, index])
    segments = sample_segments(spec, rng)
    return utterance_from_segments(spec, segments, f"utt{index:04d}", rng)


def generate_corpus(spec: CorpusSpec) -> list[Utterance]:
    return [generate_utterance(spec, i) for i in range(spec.n_utterances)]


# --- analysis -----------------------------------------------------------------


def frame_signal(samples: np.ndarray, frame_shift: int, frame_length: int) -> np.ndarray:
    """``[F, frame_length]`` frames centred on ``f * shift + shift // 2``, zero-padded."""
    n = samples.size
    n_frames = -(-n // frame_shift)
    if n_frames == 0:
        return np.zeros((0, frame_length))
    left = frame_length // 2 - frame_shift // 2
    total = (n_frames - 1) * frame_shift + frame_length
    padded = np.zeros(total)
    take = samples[: total - left]
    padded[left:left + take.size] = take
    idx = np.arange(n_frames)[:, None] * frame_shift + np.arange(frame_length)[None, :]
    return padded[idx]


def extract_cepstra(waveform: WaveformBuffer, frame_shift: int = 80, frame_length: int = 320, n_coeffs: int = 25) -> np.ndarray:
    """Hann window, |FFT|, log with 1e-8 floor, orthonormal DCT-II, first ``n_coeffs``."""
    if frame_length < frame_shift:
        raise ValueError("frame_length must be >= frame_shift")
    samples = waveform.samples if isinstance(waveform, WaveformBuffer) else np.asarray(waveform, float)
    frames = frame_signal(samples, frame_shift, frame_length) * np.hanning(frame_length + 2)[1:-1]
    logmag = np.log(np.abs(rfft(frames, axis=1)) + LOG_FLOOR)
    return dct(logmag, type=2, norm="ortho", axis=1)[:, :n_coeffs].T.copy()


# --- persistence ------------------------------------------------------------------


def utterance_checksum(utt: Utterance, h=None):
    h = h if h is not None else hashlib.sha256()
    h.update(utt.utt_id.encode())
    for arr in (utt.waveform.samples, utt.linguistic, utt.cepstra, utt.logf0, utt.vuv):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h


def corpus_checksum(utterances: list[Utterance]) -> str:
    h = hashlib.sha256()
    for u in utterances:
        utterance_checksum(u, h)
    return h.hexdigest()


def write_corpus(utterances: list[Utterance], spec: CorpusSpec, out_dir, run_id: str = "") -> Path:
    """WAV + feature container per utterance and a JSON-lines manifest."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    lines = []
    for u in utterances:
        wav_path = Path("wav") / f"{u.utt_id}.wav"
        feat_path = Path("features") / f"{u.utt_id}.feat"
        wav_write(out / wav_path, u.waveform)
        header = {
            "kind": "features",
            "run_id": run_id,
            "utt_id": u.utt_id,
            "frame_shift": u.frame_shift,
            "sample_rate": u.waveform.sample_rate,
            "segments": [asdict(s) for s in u.segments],
        }
        write_container(
            out / feat_path,
            header,
            {"linguistic": u.linguistic, "cepstra": u.cepstra, "logf0": u.logf0, "vuv": u.vuv},
        )
        lines.append(
            json.dumps(
                {
                    "utt_id": u.utt_id,
                    "wav": str(wav_path),
                    "features": str(feat_path),
                    "n_frames": u.n_frames,
                    "n_samples": len(u.waveform),
                }
            )
        )
    manifest.write_text("\n".join(lines) + "\n")
    meta = {"run_id": run_id, "spec": spec.to_dict(), "checksum": corpus_checksum(utterances), "n_utterances": len(utterances)}
    (out / "corpus.json").write_text(json.dumps(meta, indent=2) + "\n")
    return manifest


def read_manifest(manifest) -> list[dict]:
    path = Path(manifest)
    records = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("utt_id", "wav", "features"):
            if key not in rec:
                raise ValueError(f"{path}:{n}: manifest record lacks {key!r}")
        records.append(rec)
    return records


def load_utterance(manifest, record: dict) -> Utterance:
    base = Path(manifest).parent
    wave = wav_read(base / record["wav"])
    header, arrays = read_container(base / record["features"])
    segments = [SegmentSpec(**{**s, "harmonics": tuple(s["harmonics"]) if s.get("harmonics") else None}) for s in header.get("segments", [])]
    return Utterance(
        utt_id=record["utt_id"],
        waveform=wave,
        linguistic=arrays["linguistic"],
        cepstra=arrays["cepstra"],
        logf0=arrays["logf0"],
        vuv=arrays["vuv"],
        frame_shift=int(header["frame_shift"]),
        segments=segments,
    )


def load_corpus(manifest) -> list[Utterance]:
    return [load_utterance(manifest, r) for r in read_manifest(manifest)]
