"""Objective evaluation: MCD, F0 RMSE, F0 correlation and V/UV error.

Both sides of every comparison go through the same analysis
(:func:`~mtlwavenet.corpus.extract_cepstra` and :func:`estimate_f0`), so
comparing a waveform with itself gives exactly zero distortion.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import SAMPLE_RATE, WaveformBuffer
from .corpus import Utterance, extract_cepstra, frame_signal

_PEAK_RATIO = 0.9
MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
COLUMNS = ("MCD (dB)", "F0 RMSE (Hz)", "F0 Corr.", "V/UV (%)")


@dataclass
class F0Track:
    f0_hz: np.ndarray
    vuv: np.ndarray

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64).reshape(-1)
        self.vuv = np.asarray(self.vuv).reshape(-1).astype(np.int64)
        if self.f0_hz.shape != self.vuv.shape:
            raise ValueError("f0 and vuv lengths differ")
        if np.any((self.f0_hz > 0) != (self.vuv == 1)):
            raise ValueError("f0 > 0 must coincide with vuv == 1")

    def __len__(self) -> int:
        return self.f0_hz.size

    @classmethod
    def from_utterance(cls, utt: Utterance) -> "F0Track":
        return cls(utt.f0_hz(), (utt.vuv[0] > 0.5).astype(np.int64))


def _nccf(frames: np.ndarray, window: int, lags: np.ndarray) -> np.ndarray:
    """Normalized correlation between two ``window``-long slices ``lag`` apart.

    The slice pair is centred in the frame buffer for every lag, so the
    estimate refers to the frame centre regardless of the period.
    """
    span = frames.shape[1]
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames * frames, axis=1)], axis=1)
    out = np.zeros((frames.shape[0], lags.size))
    for j, lag in enumerate(lags):
        a = (span - window - lag) // 2
        b = a + lag
        num = (frames[:, a:a + window] * frames[:, b:b + window]).sum(axis=1)
        e0 = sq[:, a + window] - sq[:, a]
        e1 = sq[:, b + window] - sq[:, b]
        denom = np.sqrt(np.maximum(e0 * e1, 0.0))
        out[:, j] = np.divide(num, denom, out=np.zeros_like(num), where=denom > 1e-12)
    return out


def estimate_f0(
    waveform,
    frame_shift: int = 80,
    frame_length: int = 240,
    f0_range: tuple[float, float] = (60.0, 400.0),
    sample_rate: int | None = None,
    threshold: float = 0.3,
) -> F0Track:
    """Normalized-correlation pitch tracker with parabolic lag refinement.

    Each frame compares a ``frame_length``-sample window centred on the frame
    with the same-length window ``lag`` samples later, for every lag in the
    band implied by ``f0_range``. A frame is voiced when the best peak exceeds
    ``threshold``; among peaks within 90% of the best, the shortest lag wins,
    which suppresses octave-down errors.
    """
    if isinstance(waveform, WaveformBuffer):
        sr = sample_rate or waveform.sample_rate
        samples = waveform.samples
    else:
        sr = sample_rate or SAMPLE_RATE
        samples = np.asarray(waveform, dtype=np.float64)
    lag_lo = max(2, int(np.floor(sr / f0_range[1])))
    lag_hi = int(np.ceil(sr / f0_range[0]))
    span = frame_length + lag_hi + 1
    frames = frame_signal(samples, frame_shift, span)
    n_frames = frames.shape[0]
    f0 = np.zeros(n_frames)
    vuv = np.zeros(n_frames, dtype=np.int64)
    if n_frames == 0:
        return F0Track(f0, vuv)
    frames = frames - frames.mean(axis=1, keepdims=True)
    lags = np.arange(lag_lo - 1, lag_hi + 1)
    r = _nccf(frames, frame_length, lags)
    mid = (span - frame_length) // 2
    energy = (frames[:, mid:mid + frame_length] ** 2).sum(axis=1)
    for i in range(n_frames):
        if energy[i] < 1e-10 * frame_length:
            continue
        ri = r[i]
        inner = np.arange(1, lags.size - 1)
        peaks = inner[(ri[inner] >= ri[inner - 1]) & (ri[inner] >= ri[inner + 1])]
        if peaks.size == 0:
            continue
        best = ri[peaks].max()
        if best <= threshold:
            continue
        k = int(peaks[ri[peaks] >= max(threshold, _PEAK_RATIO * best)][0])
        a, b, c = ri[k - 1], ri[k], ri[k + 1]
        curv = a - 2 * b + c
        delta = 0.5 * (a - c) / curv if curv < 0 else 0.0
        f0[i] = sr / (lags[k] + float(np.clip(delta, -0.5, 0.5)))
        vuv[i] = 1
    return F0Track(f0, vuv)


def _common_voiced(a: F0Track, b: F0Track) -> np.ndarray:
    if len(a) != len(b):
        raise ValueError(f"track lengths differ: {len(a)} vs {len(b)}")
    return (a.vuv == 1) & (b.vuv == 1)


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson coefficient clipped to [-1, 1]; None when undefined."""
    if x.size < 2:
        return None
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0:
        return None
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def f0_rmse_and_corr(a: F0Track, b: F0Track) -> tuple[float | None, float | None]:
    """RMSE (Hz, linear scale) and Pearson correlation over frames voiced in both."""
    both = _common_voiced(a, b)
    if both.sum() < 2:
        return None, None
    x, y = a.f0_hz[both], b.f0_hz[both]
    rmse = float(np.sqrt(np.mean((x - y) ** 2)))
    return rmse, pearson(x, y)


def vuv_error(a: F0Track, b: F0Track) -> float:
    if len(a) != len(b):
        raise ValueError(f"track lengths differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        return 0.0
    return 100.0 * float(np.mean(a.vuv != b.vuv))


def mcd_per_frame(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cepstra shapes differ: {a.shape} vs {b.shape}")
    d = a[1:] - b[1:]
    return MCD_CONST * np.sqrt((d * d).sum(axis=0))


def mcd(a: np.ndarray, b: np.ndarray) -> float:
    """Mel-cepstral distortion in dB, energy coefficient excluded."""
    per = mcd_per_frame(a, b)
    return float(per.mean()) if per.size else 0.0


# --- system-level evaluation -------------------------------------------------


@dataclass
class UtteranceStats:
    utt_id: str
    mcd_frames: np.ndarray
    f0_ref: np.ndarray  # common-voiced frames only
    f0_gen: np.ndarray
    vuv_mismatch: int
    n_frames: int


@dataclass
class EvalRow:
    system: str
    mcd_db: float
    f0_rmse_hz: float | None
    f0_corr: float | None
    vuv_err_pct: float
    n_frames_compared: int
    n_utterances: int
    excluded: dict = field(default_factory=dict)

    def values(self) -> tuple:
        return (self.mcd_db, self.f0_rmse_hz, self.f0_corr, self.vuv_err_pct)


def evaluate_utterance(
    generated: WaveformBuffer,
    oracle: Utterance,
    cepstrum_frame_length: int = 320,
    f0_frame_length: int = 240,
) -> UtteranceStats:
    if len(generated) != len(oracle.waveform):
        raise ValueError(f"{oracle.utt_id}: {len(generated)} samples, oracle has {len(oracle.waveform)}")
    shift = oracle.frame_shift
    cep_gen = extract_cepstra(generated, shift, cepstrum_frame_length, oracle.cepstra.shape[0])
    ref_track = estimate_f0(oracle.waveform, shift, f0_frame_length)
    gen_track = estimate_f0(generated, shift, f0_frame_length)
    both = _common_voiced(ref_track, gen_track)
    return UtteranceStats(
        utt_id=oracle.utt_id,
        mcd_frames=mcd_per_frame(oracle.cepstra, cep_gen),
        f0_ref=ref_track.f0_hz[both],
        f0_gen=gen_track.f0_hz[both],
        vuv_mismatch=int((ref_track.vuv != gen_track.vuv).sum()),
        n_frames=len(ref_track),
    )


def aggregate(system: str, stats: list[UtteranceStats], excluded: dict | None = None) -> EvalRow:
    """Frame-weighted pooling over all compared utterances."""
    excluded = dict(excluded or {})
    n_frames = sum(s.n_frames for s in stats)
    mcd_all = np.concatenate([s.mcd_frames for s in stats]) if stats else np.zeros(0)
    ref = np.concatenate([s.f0_ref for s in stats]) if stats else np.zeros(0)
    gen = np.concatenate([s.f0_gen for s in stats]) if stats else np.zeros(0)
    rmse = float(np.sqrt(np.mean((ref - gen) ** 2))) if ref.size >= 2 else None
    corr = pearson(ref, gen) if ref.size >= 2 else None
    return EvalRow(
        system=system,
        mcd_db=float(mcd_all.mean()) if mcd_all.size else float("nan"),
        f0_rmse_hz=rmse,
        f0_corr=corr,
        vuv_err_pct=100.0 * sum(s.vuv_mismatch for s in stats) / n_frames if n_frames else float("nan"),
        n_frames_compared=n_frames,
        n_utterances=len(stats),
        excluded=excluded,
    )


def evaluate_system(system: str, generated: dict, oracle: list[Utterance], jobs: int = 1, **analysis) -> EvalRow:
    """Compare generated waveforms (keyed by utterance id) against oracle utterances.

    Missing or length-mismatched utterances are excluded and listed in the row.
    """
    excluded = {u.utt_id: "missing" for u in oracle if u.utt_id not in generated}
    present = [u for u in oracle if u.utt_id in generated]

    def one(utt):
        try:
            return evaluate_utterance(generated[utt.utt_id], utt, **analysis), None
        except ValueError as exc:
            return None, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, present))
    else:
        results = [one(u) for u in present]
    stats = []
    for utt, (st, err) in zip(present, results):
        if err is not None:
            excluded[utt.utt_id] = err
        else:
            stats.append(st)
    return aggregate(system, stats, excluded)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def row(self, system: str) -> EvalRow:
        for r in self.rows:
            if r.system == system:
                return r
        raise KeyError(system)

    def to_table(self) -> str:
        def fmt(v, digits):
            return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"

        header = ["System", *COLUMNS, "Frames"]
        body = [
            [r.system, fmt(r.mcd_db, 3), fmt(r.f0_rmse_hz, 3), fmt(r.f0_corr, 3), fmt(r.vuv_err_pct, 3), str(r.n_frames_compared)]
            for r in self.rows
        ]
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))) for line in [header] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        notes = [f"# {r.system}: excluded {uid} ({why})" for r in self.rows for uid, why in r.excluded.items()]
        return "\n".join(lines + notes) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.rows)

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        return cls([EvalRow(**json.loads(line)) for line in text.splitlines() if line.strip()])
