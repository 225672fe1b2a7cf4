"""Toy-scale comparison of condition modes: train, synthesize held-out utterances, evaluate.

Every (mode, seed) run lives in its own directory and is skipped when its
report already exists, so an interrupted comparison picks up where it stopped.
"""

from __future__ import annotations

import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .codec import wav_write
from .corpus import CorpusSpec, generate_corpus
from .inference import SamplerConfig, synthesize_utterance
from .metrics import EvalReport, EvalRow, evaluate_system
from .model import WaveNetConfig
from .plotting import plot_loss, plot_report
from .training import ConditionMode, TrainConfig, build_model, load_checkpoint, train


def small_model_config() -> WaveNetConfig:
    """One stack of eight dilations (receptive field 256, longer than any pitch period in the corpus)."""
    return WaveNetConfig(
        num_stacks=1,
        layers_per_stack=8,
        residual_channels=16,
        gate_channels=16,
        skip_channels=32,
        cond_channels=32,
    )


@dataclass
class ComparisonSettings:
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[ConditionMode, ...] = (ConditionMode.LINGUISTIC_ONLY, ConditionMode.MTL)
    steps: int = 20000
    n_train: int = 50
    n_test: int = 10
    batch_size: int = 4
    window_samples: int = 320
    corpus_seed: int = 0
    temperature: float = 1.0
    jobs: int = 1
    model: WaveNetConfig = field(default_factory=small_model_config)


@dataclass
class ComparisonResult:
    rows: dict[str, list[EvalRow]]  # mode -> one row per seed
    median_rmse: dict[str, float | None]
    median_corr: dict[str, float | None]

    def mtl_beats_linguistic(self) -> bool:
        lin, mtl = ConditionMode.LINGUISTIC_ONLY.value, ConditionMode.MTL.value
        r_lin, r_mtl = self.median_rmse.get(lin), self.median_rmse.get(mtl)
        c_lin, c_mtl = self.median_corr.get(lin), self.median_corr.get(mtl)
        if None in (r_lin, r_mtl, c_lin, c_mtl):
            return False
        return r_mtl < r_lin and c_mtl > c_lin


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else None


def run_single(out: Path, mode: ConditionMode, seed: int, train_set, test_set, settings: ComparisonSettings) -> EvalRow:
    report_path = out / "report.jsonl"
    if report_path.exists():
        return EvalReport.from_jsonl(report_path.read_text()).rows[0]
    out.mkdir(parents=True, exist_ok=True)
    final = out / "model.ckpt"
    if final.exists() and load_checkpoint(final).step >= settings.steps:
        ckpt = load_checkpoint(final)
        model, stats = ckpt.build_model(), ckpt.stats
    else:
        cfg = TrainConfig(
            steps=settings.steps,
            seed=seed,
            batch_size=settings.batch_size,
            window_samples=settings.window_samples,
            checkpoint_every=max(1, settings.steps // 4),
        )
        resume = None
        ckpts = sorted((out / "checkpoints").glob("step_*.ckpt")) if (out / "checkpoints").exists() else []
        if ckpts:
            resume = load_checkpoint(ckpts[-1])
        model = build_model(settings.model, train_set[0].linguistic.shape[0], mode, seed)
        result = train(model, train_set, cfg, mode, out_dir=out, resume=resume, run_id=f"{mode.value}-s{seed}")
        stats = result.stats
        plot_loss(result.log, out / "loss.png")
    wav_dir = out / "wav"
    wav_dir.mkdir(exist_ok=True)
    sampler = SamplerConfig(temperature=settings.temperature, seed=seed)

    def synth(utt):
        wave = synthesize_utterance(model, utt, mode, stats, sampler)
        wav_write(wav_dir / f"{utt.utt_id}.wav", wave)
        return utt.utt_id, wave

    with ThreadPoolExecutor(max_workers=max(1, settings.jobs)) as pool:
        generated = dict(pool.map(synth, test_set))
    row = evaluate_system(f"{mode.value}/seed{seed}", generated, test_set)
    report_path.write_text(EvalReport([row]).to_jsonl())
    return row


def run_comparison(out_dir, settings: ComparisonSettings | None = None, progress=None) -> ComparisonResult:
    settings = settings or ComparisonSettings()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = CorpusSpec(n_utterances=settings.n_train + settings.n_test, seed=settings.corpus_seed)
    utts = generate_corpus(spec)
    train_set, test_set = utts[: settings.n_train], utts[settings.n_train:]
    rows: dict[str, list[EvalRow]] = {}
    for seed in settings.seeds:
        for mode in settings.modes:
            row = run_single(out / f"{mode.value}-seed{seed}", mode, seed, train_set, test_set, settings)
            rows.setdefault(mode.value, []).append(row)
            if progress is not None:
                progress(mode, seed, row)
    result = ComparisonResult(
        rows=rows,
        median_rmse={m: _median(r.f0_rmse_hz for r in rs) for m, rs in rows.items()},
        median_corr={m: _median(r.f0_corr for r in rs) for m, rs in rows.items()},
    )
    report = EvalReport([r for rs in rows.values() for r in rs])
    (out / "report.txt").write_text(report.to_table())
    (out / "report.jsonl").write_text(report.to_jsonl())
    plot_report(report, out / "report.png")
    summary = {
        "settings": {**asdict(settings), "modes": [m.value for m in settings.modes]},
        "median_f0_rmse_hz": result.median_rmse,
        "median_f0_corr": result.median_corr,
        "mtl_beats_linguistic": result.mtl_beats_linguistic(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return result
