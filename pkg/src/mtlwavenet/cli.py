"""``mtlwavenet`` command line: corpus, train, synth, eval, compare.

Exit codes: 0 success, 2 invalid input, 3 runtime or numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

from .codec import WavFormatError, wav_read, wav_write
from .container import ContainerFormatError
from .corpus import CorpusSpec, CorpusSpecError, corpus_checksum, generate_corpus, load_corpus, write_corpus
from .inference import SamplerConfig, SamplerMode, synthesize_utterance
from .metrics import EvalReport, evaluate_system
from .model import ConfigError
from .plotting import plot_loss, plot_report
from .tensor import NumericError
from .training import ConditionMode, ModeError, build_model, load_checkpoint, load_config, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def version_string() -> str:
    try:
        base = "v" + metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "v0+unknown"
    try:
        here = Path(__file__).resolve().parent
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}-g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


@dataclass
class RunManifest:
    run_id: str
    command: str
    version: str
    mode: str | None = None
    corpus_manifest: str | None = None
    config_paths: list[str] = field(default_factory=list)
    checkpoint_paths: list[str] = field(default_factory=list)
    argv: list[str] = field(default_factory=list)
    args: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _args_dict(args) -> dict:
    skip = ("func", "argv")
    return {k: ([str(x) for x in v] if isinstance(v, list) else str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items() if k not in skip}


def _jobs(value: int | None) -> int:
    return value or os.cpu_count() or 1


# --- commands ------------------------------------------------------------------


def cmd_corpus(args) -> int:
    spec = CorpusSpec.from_ini(Path(args.spec).read_text(), str(args.spec)) if args.spec else CorpusSpec()
    if args.seed is not None:
        spec = CorpusSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    run_id = args.run_id or f"corpus-{uuid.uuid4().hex[:8]}"
    utts = generate_corpus(spec)
    manifest = write_corpus(utts, spec, args.out, run_id)
    checksum = corpus_checksum(utts)
    RunManifest(
        run_id, "corpus", version_string(), corpus_manifest=str(manifest),
        config_paths=[str(args.spec)] if args.spec else [], argv=args.argv, args=_args_dict(args),
    ).write(Path(args.out) / "run.json")
    print(f"manifest {manifest}")
    print(f"utterances {len(utts)}")
    print(f"checksum {checksum}")
    return EXIT_OK


def cmd_train(args) -> int:
    mode = ConditionMode.parse(args.mode)
    train_cfg, model_cfg = load_config(args.config)
    if args.steps is not None:
        train_cfg.steps = args.steps
    if args.seed is not None:
        train_cfg.seed = args.seed
    train_cfg.validate()
    utts = load_corpus(args.corpus)
    if not utts:
        raise UsageError(f"{args.corpus}: manifest lists no utterances")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        model = resume.build_model()
    else:
        model = build_model(model_cfg, utts[0].linguistic.shape[0], mode, train_cfg.seed)
    # fail on config/corpus mismatches before the first step
    train_cfg.resolved_window(model.cfg, utts[0].frame_shift)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_id = args.run_id or (resume.run_id if resume else f"train-{uuid.uuid4().hex[:8]}")
    result = train(
        model, utts, train_cfg, mode, out_dir=out, run_id=run_id, resume=resume,
        corpus_checksum=corpus_checksum(utts),
    )
    if result.log:
        plot_loss(result.log, out / "loss.png")
    RunManifest(
        run_id, "train", version_string(), mode=mode.value, corpus_manifest=str(args.corpus),
        config_paths=[str(args.config)], checkpoint_paths=[str(p) for p in result.checkpoints],
        argv=args.argv, args=_args_dict(args),
    ).write(out / "run.json")
    last = result.log[-1] if result.log else {}
    print(f"run_id {run_id}")
    print(f"steps {result.step}")
    if last:
        print(f"final_ce {last['ce']:.6f}")
    print(f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    utts = load_corpus(args.corpus)
    if args.utterances:
        wanted = [u for part in args.utterances for u in part.split(",") if u]
        by_id = {u.utt_id: u for u in utts}
        unknown = [w for w in wanted if w not in by_id]
        if unknown:
            raise UsageError(f"unknown utterance id(s): {', '.join(unknown)}")
        utts = [by_id[w] for w in wanted]
    if args.f0_source == "none":
        for u in utts:
            u.logf0 = None
            u.vuv = None
        if ckpt.mode.needs_f0:
            raise ModeError(f"checkpoint mode {ckpt.mode.value} needs an F0 source; --f0-source none gives it none")
    sampler = SamplerConfig(
        SamplerMode.ARGMAX if args.argmax else SamplerMode.SAMPLE,
        temperature=args.temperature,
        seed=args.seed,
    )
    model = ckpt.build_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.trace:
        (out / "trace").mkdir(exist_ok=True)

    def one(utt):
        # each utterance gets its own stream so results do not depend on --jobs
        s = SamplerConfig(sampler.mode, sampler.temperature, seed=_utt_seed(args.seed, utt.utt_id))
        if args.trace:
            with open(out / "trace" / f"{utt.utt_id}.txt", "w") as fh:
                wave = synthesize_utterance(model, utt, ckpt.mode, ckpt.stats, s, trace=fh)
        else:
            wave = synthesize_utterance(model, utt, ckpt.mode, ckpt.stats, s)
        wav_write(out / f"{utt.utt_id}.wav", wave)
        return utt.utt_id, len(wave)

    with ThreadPoolExecutor(max_workers=_jobs(args.jobs)) as pool:
        for uid, n in pool.map(one, utts):
            print(f"{uid} {n}")
    RunManifest(
        ckpt.run_id, "synth", version_string(), mode=ckpt.mode.value, corpus_manifest=str(args.corpus),
        checkpoint_paths=[str(args.checkpoint)], argv=args.argv, args=_args_dict(args),
    ).write(out / "run.json")
    return EXIT_OK


def _utt_seed(seed: int, utt_id: str) -> list[int]:
    return [seed, *utt_id.encode("utf-8")]


def cmd_eval(args) -> int:
    utts = load_corpus(args.corpus)
    rows = []
    for gen_dir in args.generated:
        gen_dir = Path(gen_dir)
        if not gen_dir.is_dir():
            raise FileNotFoundError(f"{gen_dir}: not a directory")
        wavs = {p.stem: p for p in sorted(gen_dir.glob("*.wav"))}
        expected = [u.utt_id for u in utts]
        if not any(uid in wavs for uid in expected):
            raise UsageError(f"{gen_dir}: no generated WAVs; expected {', '.join(expected)}")
        generated = {uid: wav_read(p) for uid, p in wavs.items() if uid in expected}
        name = args.names[len(rows)] if args.names and len(args.names) > len(rows) else gen_dir.name
        rows.append(evaluate_system(name, generated, utts, jobs=_jobs(args.jobs)))
    report = EvalReport(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = report.to_table()
    out.write_text(table)
    out.with_suffix(".jsonl").write_text(report.to_jsonl())
    if not args.no_plot:
        plot_report(report, out.with_suffix(".png"))
    sys.stdout.write(table)
    for r in rows:
        for uid, why in r.excluded.items():
            print(f"warning: {r.system}: {uid} excluded ({why})", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import ComparisonSettings, run_comparison

    settings = ComparisonSettings(
        seeds=tuple(args.seeds), steps=args.steps, n_train=args.n_train, n_test=args.n_test, jobs=_jobs(args.jobs)
    )
    t0 = time.time()

    def progress(mode, seed, row):
        print(f"[{time.time() - t0:7.0f}s] {mode.value} seed {seed}: rmse={row.f0_rmse_hz} corr={row.f0_corr}", flush=True)

    result = run_comparison(args.out, settings, progress)
    sys.stdout.write((Path(args.out) / "report.txt").read_text())
    print(f"median F0 RMSE {result.median_rmse}")
    print(f"median F0 corr {result.median_corr}")
    print(f"mtl beats linguistic: {result.mtl_beats_linguistic()}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlwavenet", description="Multi-task WaveNet toolkit on a synthetic speech corpus.")
    p.add_argument("--version", action="version", version=f"%(prog)s {version_string()}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="generate the synthetic corpus")
    c.add_argument("--spec", type=Path, help="INI file with a [corpus] section (defaults if omitted)")
    c.add_argument("--out", type=Path, required=True, help="output directory")
    c.add_argument("--seed", type=int, help="override the spec's seed")
    c.add_argument("--run-id", help="run id recorded in feature headers")
    c.set_defaults(func=cmd_corpus)

    t = sub.add_parser("train", help="train a model under one condition mode")
    t.add_argument("--corpus", type=Path, required=True, help="corpus manifest (manifest.jsonl)")
    t.add_argument("--config", type=Path, required=True, help="INI training/model config")
    t.add_argument("--mode", required=True, choices=[m.value for m in ConditionMode], help="condition mode")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--resume", type=Path, help="checkpoint to resume from")
    t.add_argument("--steps", type=int, help="override the config's step count")
    t.add_argument("--seed", type=int, help="override the config's seed")
    t.add_argument("--run-id", help="run id (default: random, or the resumed run's)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="generate waveforms from a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    s.add_argument("--corpus", type=Path, required=True, help="corpus manifest supplying conditions")
    s.add_argument("--utterances", nargs="*", help="utterance ids (space or comma separated; default all)")
    s.add_argument("--out", type=Path, required=True, help="output directory for WAVs")
    s.add_argument("--argmax", action="store_true", help="pick the most likely bin instead of sampling")
    s.add_argument("--temperature", type=float, default=1.0, help="sampling temperature (default 1.0)")
    s.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    s.add_argument("--f0-source", choices=["corpus", "none"], default="corpus", help="where F0-conditioned models read F0")
    s.add_argument("--trace", action="store_true", help="write per-step bin traces under OUT/trace/")
    s.add_argument("--jobs", type=int, default=None, help="parallel utterances (default: available cores)")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="objective evaluation against the corpus")
    e.add_argument("--generated", type=Path, nargs="+", required=True, help="one directory of WAVs per system")
    e.add_argument("--corpus", type=Path, required=True, help="corpus manifest with oracle audio")
    e.add_argument("--out", type=Path, required=True, help="report path; .jsonl and .png written alongside")
    e.add_argument("--names", nargs="*", help="system names (default: directory names)")
    e.add_argument("--no-plot", action="store_true", help="skip the report figure")
    e.add_argument("--jobs", type=int, default=None, help="parallel utterances (default: available cores)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("compare", help="train/synthesize/evaluate linguistic vs mtl over several seeds")
    m.add_argument("--out", type=Path, required=True, help="experiment directory (resumable)")
    m.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="training seeds")
    m.add_argument("--steps", type=int, default=20000, help="training steps per run")
    m.add_argument("--n-train", type=int, default=50, help="training utterances")
    m.add_argument("--n-test", type=int, default=10, help="held-out utterances")
    m.add_argument("--jobs", type=int, default=None, help="parallel synthesis (default: available cores)")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (WavFormatError, ContainerFormatError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, CorpusSpecError, ModeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
