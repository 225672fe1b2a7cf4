import math
import threading
import warnings

import numpy as np
import pytest

import mtlwavenet.training as training
from mtlwavenet.codec import SILENCE_BIN
from mtlwavenet.container import write_container
from mtlwavenet.corpus import CorpusSpec, SegmentSpec, generate_corpus, utterance_from_segments
from mtlwavenet.model import ConfigError, SecondaryPrediction, mtl_head_forward, receptive_field, shift_right
from mtlwavenet.tensor import GradTape, NumericError, Tensor, crop_time, mse, take_time
from mtlwavenet.training import (
    Adam,
    BatchSource,
    Checkpoint,
    ConditionMode,
    ModeError,
    SecondaryTarget,
    TargetStats,
    TrainConfig,
    batch_forward,
    build_model,
    composite_loss,
    condition_features,
    context_samples_for,
    draw_batch,
    fit_fixed_batch,
    load_checkpoint,
    log_columns,
    make_batches,
    parse_config,
    read_loss_log,
    save_checkpoint,
    train,
    trainable_parameters,
    window_start_range,
)

from conftest import tiny_config

SPEC = CorpusSpec(n_utterances=6, min_frames=20, max_frames=30, n_cepstra=3)
LN256 = math.log(256)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SPEC)


@pytest.fixture(scope="module")
def stats(corpus):
    return TargetStats.from_corpus(corpus)


def tiny_model(mode, seed=0):
    return build_model(tiny_config(), SPEC.linguistic_dim, mode, seed)


def strip_time(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


# --- composite loss ---------------------------------------------------------------------


def _secondary(rng, frames=4, n_cep=3):
    pred = SecondaryPrediction(
        Tensor(rng.normal(size=(n_cep, frames))),
        Tensor(rng.normal(size=(1, frames))),
        Tensor(rng.uniform(0.1, 0.9, (1, frames))),
    )
    vuv = (rng.uniform(size=(1, frames)) > 0.5).astype(float)
    target = SecondaryTarget(rng.normal(size=(n_cep, frames)), rng.normal(size=(1, frames)) * vuv, vuv)
    return pred, target


def test_zero_weights_reduce_to_cross_entropy(rng):
    logits = Tensor(rng.normal(size=(256, 8)))
    bins = rng.integers(0, 256, 8)
    pred, target = _secondary(rng)
    total, parts = composite_loss(logits, bins, pred, target, weights={"cep": 0, "f0": 0, "vuv": 0})
    ce, _ = composite_loss(logits, bins)
    assert float(total.data) == float(ce.data) == parts["ce"]
    assert parts["cep"] > 0


def test_perfect_secondary_predictions(rng):
    logits = Tensor(rng.normal(size=(256, 8)))
    bins = rng.integers(0, 256, 8)
    _, target = _secondary(rng)
    pred = SecondaryPrediction(Tensor(target.cepstra), Tensor(target.logf0), Tensor(target.vuv))
    total, parts = composite_loss(logits, bins, pred, target)
    assert float(total.data) == parts["ce"]
    assert parts["cep"] == parts["f0"] == parts["vuv"] == 0.0


def test_two_frame_hand_fixture():
    logits = Tensor(np.zeros((256, 2)))
    pred = SecondaryPrediction(Tensor([[1.0, 2.0]]), Tensor([[0.5, 9.0]]), Tensor([[0.5, 0.5]]))
    target = SecondaryTarget(np.array([[0.0, 0.0]]), np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))
    total, parts = composite_loss(logits, [3, 250], pred, target)
    # cepstra (1 + 4) / 2; log F0 only on the voiced first frame: 0.25; V/UV (0.25 + 0.25) / 2
    assert parts["ce"] == pytest.approx(LN256, abs=1e-12)
    assert (parts["cep"], parts["f0"], parts["vuv"]) == (2.5, 0.25, 0.25)
    assert float(total.data) == pytest.approx(LN256 + 3.0, abs=1e-12)
    weighted, _ = composite_loss(logits, [3, 250], pred, target, weights={"cep": 2.0, "f0": 4.0, "vuv": 0.5})
    assert float(weighted.data) == pytest.approx(LN256 + 5.0 + 1.0 + 0.125, abs=1e-12)


def test_composite_loss_shape_errors(rng):
    pred, target = _secondary(rng, frames=4)
    with pytest.raises(ValueError):
        composite_loss(Tensor(np.zeros((256, 4))), np.zeros(4, int), pred, SecondaryTarget(target.cepstra[:, :3], target.logf0, target.vuv))
    with pytest.raises(ValueError):
        composite_loss(Tensor(np.zeros((256, 4))), np.zeros(4, int), pred, None)


# --- batching ---------------------------------------------------------------------------


def test_window_of_one_frame(corpus, stats):
    src = BatchSource.build(corpus, ConditionMode.MTL, stats)
    batch = draw_batch(src, 80, 3, np.random.default_rng(0))
    assert batch.window_frames == 1 and batch.targets.shape == (3, 80)
    assert batch.frame_index.shape == (3, 1)


def test_window_must_be_whole_frames(corpus, stats):
    src = BatchSource.build(corpus, ConditionMode.MTL, stats)
    with pytest.raises(ValueError):
        draw_batch(src, 100, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        draw_batch(src, 160, 1, np.random.default_rng(0), context_samples=30)


def test_seeded_batches_repeat(corpus, stats):
    src = BatchSource.build(corpus, ConditionMode.MTL, stats)
    a = make_batches(src, 320, 4, np.random.default_rng(5), 80)
    b = make_batches(src, 320, 4, np.random.default_rng(5), 80)
    for _ in range(5):
        x, y = next(a), next(b)
        np.testing.assert_array_equal(x.inputs, y.inputs)
        np.testing.assert_array_equal(x.cepstra, y.cepstra)
        np.testing.assert_array_equal(x.start_frame, y.start_frame)


def _audit(batch, src, window, context):
    shift = src.frame_shift
    pad = context + window + shift
    for b, u in enumerate(batch.utt_index):
        bins = src.bins[u]
        padded = np.concatenate([np.full(pad, SILENCE_BIN), bins])
        s0 = batch.start_frame[b] * shift + pad
        np.testing.assert_array_equal(batch.targets[b], padded[s0:s0 + window])
        np.testing.assert_array_equal(batch.inputs[b], shift_right(padded)[s0 - context:s0 + window])
        assert batch.targets.shape[1] == batch.window_frames * shift
        wf = window // shift
        frames = np.arange(batch.start_frame[b], batch.start_frame[b] + wf)
        valid = frames >= 0
        np.testing.assert_array_equal(batch.frame_valid[0, b], valid)
        np.testing.assert_array_equal(batch.cepstra[:, b, valid], src.cepstra[u][:, frames[valid]])
        np.testing.assert_array_equal(batch.vuv[:, b, valid], src.vuv[u][:, frames[valid]])
        np.testing.assert_array_equal(batch.logf0[:, b, valid], src.logf0[u][:, frames[valid]])
        n = batch.lengths[b]
        np.testing.assert_array_equal(batch.features[:, b, :n], src.features[u])
        np.testing.assert_array_equal(batch.features[:, b, n:], 0.0)
        lf = context // shift
        expect_index = np.arange(batch.start_frame[b] - lf, batch.start_frame[b] + wf)
        np.testing.assert_array_equal(batch.frame_index[b], np.where(expect_index >= 0, expect_index, -1))


def test_alignment_reslice_audit(corpus, stats):
    src = BatchSource.build(corpus, ConditionMode.MTL, stats)
    rng = np.random.default_rng(11)
    for window, context in ((80, 0), (320, 160), (960, 80)):
        for _ in range(10):
            _audit(draw_batch(src, window, 3, rng, context), src, window, context)


def test_short_utterance_is_left_padded(stats):
    spec = SPEC
    short = utterance_from_segments(spec, [SegmentSpec(0, 3, True, 150.0, 150.0)], "short", np.random.default_rng(0))
    src = BatchSource.build([short], ConditionMode.MTL, stats)
    assert window_start_range(3, 5) == (-2, -2) and window_start_range(9, 5) == (0, 4)
    batch = draw_batch(src, 400, 4, np.random.default_rng(3))
    _audit(batch, src, 400, 0)
    for b in range(4):
        pad = -batch.start_frame[b]
        np.testing.assert_array_equal(batch.targets[b, : pad * 80], SILENCE_BIN)
        np.testing.assert_array_equal(batch.frame_valid[0, b, :pad], 0.0)
    np.testing.assert_array_equal(batch.start_frame, -2)


def test_context_covers_receptive_field():
    cfg = tiny_config()
    ctx = context_samples_for(cfg, 80)
    assert ctx % 80 == 0 and ctx >= receptive_field(cfg) - 1
    assert context_samples_for(tiny_config(num_stacks=3, layers_per_stack=6), 80) == 240


# --- configuration ----------------------------------------------------------------------

CONFIG_TEXT = """
[optimizer]
learning_rate = 0.002
beta2 = 0.99

[batch]
window_samples = 320
batch_size = 3
prefetch = no

[training]
steps = 40
seed = 9

[loss_weights]
lambda_f0 = 2.5

[model]
num_stacks = 1
layers_per_stack = 4
residual_channels = 8
"""


def test_parse_config_reads_every_section():
    train_cfg, model_cfg = parse_config(CONFIG_TEXT)
    assert train_cfg.learning_rate == 0.002 and train_cfg.beta2 == 0.99
    assert (train_cfg.window_samples, train_cfg.batch_size, train_cfg.prefetch) == (320, 3, False)
    assert (train_cfg.steps, train_cfg.seed) == (40, 9)
    assert train_cfg.loss_weights == {"cep": 1.0, "f0": 2.5, "vuv": 1.0}
    assert (model_cfg.num_stacks, model_cfg.layers_per_stack, model_cfg.residual_channels) == (1, 4, 8)
    assert model_cfg.loss_weights == train_cfg.loss_weights


def test_format_config_round_trips():
    train_cfg, model_cfg = parse_config(CONFIG_TEXT)
    assert parse_config(training.format_config(train_cfg, model_cfg)) == (train_cfg, model_cfg)


@pytest.mark.parametrize(
    "text, needle",
    [
        ("[optimizer]\nlearnin_rate = 0.1\n", "learnin_rate"),
        ("[model]\nwidth = 3\n", "width"),
        ("[schedule]\nwarmup = 3\n", "schedule"),
        ("[training]\nsteps = lots\n", "steps"),
        ("[optimizer]\nlearning_rate = -1\n", "learning_rate"),
        ("[batch]\nbatch_size = 0\n", "batch_size"),
    ],
)
def test_config_errors_name_the_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_window_must_exceed_receptive_field():
    cfg = tiny_config()
    n = receptive_field(cfg)
    assert TrainConfig().resolved_window(cfg, 80) == math.ceil(2 * n / 80) * 80
    with pytest.raises(ConfigError, match="receptive field"):
        TrainConfig(window_samples=80).resolved_window(tiny_config(num_stacks=2, layers_per_stack=6), 80)
    with pytest.raises(ConfigError, match="multiple"):
        TrainConfig(window_samples=90).resolved_window(cfg, 80)


# --- modes and targets ------------------------------------------------------------------


def test_target_normalization(corpus, stats):
    cep = np.concatenate([stats.cepstra(u.cepstra) for u in corpus], axis=1)
    np.testing.assert_allclose(cep.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(cep.std(axis=1), 1.0, atol=1e-10)
    lf = np.concatenate([stats.logf0(u.logf0, u.vuv)[u.vuv > 0.5] for u in corpus])
    assert abs(lf.mean()) < 1e-10 and lf.std() == pytest.approx(1.0)
    for u in corpus:
        np.testing.assert_array_equal(stats.logf0(u.logf0, u.vuv)[u.vuv < 0.5], 0.0)
    assert TargetStats.from_dict(stats.to_dict()).logf0_std == stats.logf0_std


def test_condition_features_per_mode(corpus, stats):
    u = corpus[0]
    assert condition_features(u, ConditionMode.LINGUISTIC_ONLY, stats) is u.linguistic
    assert condition_features(u, ConditionMode.MTL, stats) is u.linguistic
    plus = condition_features(u, ConditionMode.LINGUISTIC_PLUS_F0, stats)
    assert plus.shape == (SPEC.linguistic_dim + 2, u.n_frames)
    np.testing.assert_array_equal(plus[-1], u.vuv[0])
    blind = type(u)(u.utt_id, u.waveform, u.linguistic, u.cepstra, None, None, u.frame_shift)
    with pytest.raises(ModeError, match="F0"):
        condition_features(blind, ConditionMode.LINGUISTIC_PLUS_F0, stats)


def test_mode_parsing_and_flags():
    assert ConditionMode.parse("mtl") is ConditionMode.MTL
    assert ConditionMode.parse("linguistic+f0").needs_f0
    assert not ConditionMode.LINGUISTIC_ONLY.uses_head
    with pytest.raises(ValueError):
        ConditionMode.parse("wavenet")


def test_head_is_trained_only_in_mtl_mode():
    for mode in ConditionMode:
        names = trainable_parameters(tiny_model(mode), mode)
        assert any(k.startswith("head.") for k in names) == (mode is ConditionMode.MTL)


def test_log_columns():
    assert log_columns(ConditionMode.LINGUISTIC_ONLY) == ["step", "ce", "total", "wall_time"]
    assert log_columns(ConditionMode.MTL) == ["step", "ce", "cep", "f0", "vuv", "total", "wall_time"]


# --- gradient routing -------------------------------------------------------------------


def _batch(corpus, stats, mode, seed=0, size=2):
    model = tiny_model(mode, seed)
    src = BatchSource.build(corpus, mode, stats)
    window = TrainConfig().resolved_window(model.cfg, 80)
    return model, draw_batch(src, window, size, np.random.default_rng(seed), context_samples_for(model.cfg, 80))


def _randomize_output(model, rng):
    model.wavenet.out2_w.data = rng.normal(0, 0.3, model.wavenet.out2_w.shape)


def test_zero_weights_route_only_cross_entropy(corpus, stats, rng):
    model, batch = _batch(corpus, stats, ConditionMode.MTL)
    _randomize_output(model, rng)
    params = model.parameters()
    with GradTape() as tape:
        total, _ = batch_forward(model, batch, ConditionMode.MTL, {"cep": 0.0, "f0": 0.0, "vuv": 0.0})
    g_zero = tape.backward(total)
    with GradTape() as tape:
        ce, _ = batch_forward(model, batch, ConditionMode.LINGUISTIC_ONLY, {})
    g_ce = tape.backward(ce)
    for name, p in params.items():
        if name.startswith("cond."):
            np.testing.assert_array_equal(g_zero[p], g_ce[p])
            assert np.any(g_ce[p])
    assert model.head.weight not in g_zero or not np.any(g_zero[model.head.weight])


def test_secondary_loss_reaches_only_conditioner_and_head(corpus, stats, rng):
    model, batch = _batch(corpus, stats, ConditionMode.MTL)
    _randomize_output(model, rng)
    with GradTape() as tape:
        enc = model.conditioner.encode(Tensor(batch.features), batch.lengths)
        window = crop_time(take_time(enc, batch.frame_index), batch.context_frames)
        pred = mtl_head_forward(model.head, window)
        loss = mse(pred.cepstra, Tensor(batch.cepstra), np.broadcast_to(batch.frame_valid, batch.cepstra.shape))
    grads = tape.backward(loss)
    for name, p in model.parameters().items():
        touched = p in grads and np.any(grads[p])
        assert touched == (name.startswith("cond.") or name == "head.weight" or name == "head.bias"), name


# --- training loop ----------------------------------------------------------------------


def test_step_zero_cross_entropy_is_uniform(corpus, stats):
    for mode in ConditionMode:
        model, batch = _batch(corpus, stats, mode)
        _, parts = batch_forward(model, batch, mode, TrainConfig().loss_weights)
        assert parts["ce"] == pytest.approx(LN256, abs=1e-9)


def test_training_is_deterministic(corpus, tmp_path):
    cfg = TrainConfig(steps=8, batch_size=2, seed=4, checkpoint_every=4)
    a = train(tiny_model(ConditionMode.MTL, 4), corpus, cfg, ConditionMode.MTL, tmp_path / "a", run_id="r")
    b = train(tiny_model(ConditionMode.MTL, 4), corpus, cfg, ConditionMode.MTL, tmp_path / "b", run_id="r")
    assert strip_time(a.log) == strip_time(b.log)
    ha, la = read_loss_log(tmp_path / "a" / "loss.jsonl")
    hb, lb = read_loss_log(tmp_path / "b" / "loss.jsonl")
    assert ha == hb == {"run_id": "r", "mode": "mtl", "columns": log_columns(ConditionMode.MTL)}
    assert strip_time(la) == strip_time(lb) == strip_time(a.log)
    assert all(set(r) == set(ha["columns"]) for r in la)
    ca, cb = load_checkpoint(tmp_path / "a" / "model.ckpt"), load_checkpoint(tmp_path / "b" / "model.ckpt")
    assert all(np.array_equal(ca.params[k], cb.params[k]) for k in ca.params)


def test_prefetch_matches_inline(corpus):
    logs = []
    for prefetch in (True, False):
        cfg = TrainConfig(steps=5, batch_size=2, seed=1, prefetch=prefetch)
        logs.append(strip_time(train(tiny_model(ConditionMode.LINGUISTIC_ONLY), corpus, cfg, ConditionMode.LINGUISTIC_ONLY).log))
    assert logs[0] == logs[1]


def test_resume_reproduces_trajectory(corpus, tmp_path):
    mode = ConditionMode.MTL
    cfg = TrainConfig(steps=12, batch_size=2, seed=2, checkpoint_every=5)
    full = train(tiny_model(mode), corpus, cfg, mode, tmp_path / "full", run_id="x")
    assert [p.name for p in full.checkpoints] == ["step_0000005.ckpt", "step_0000010.ckpt", "step_0000012.ckpt", "model.ckpt"]
    ckpt = load_checkpoint(tmp_path / "full" / "checkpoints" / "step_0000005.ckpt")
    assert ckpt.step == 5 and ckpt.adam_t == 5 and ckpt.run_id == "x"
    # a truncated copy of the log, as left behind by an interrupted run
    part = tmp_path / "part"
    (part / "checkpoints").mkdir(parents=True)
    lines = (tmp_path / "full" / "loss.jsonl").read_text().splitlines()
    (part / "loss.jsonl").write_text("\n".join(lines[:8]) + "\n")
    resumed = train(ckpt.build_model(), corpus, cfg, mode, part, resume=ckpt)
    _, full_log = read_loss_log(tmp_path / "full" / "loss.jsonl")
    _, resumed_log = read_loss_log(part / "loss.jsonl")
    assert strip_time(resumed_log) == strip_time(full_log)
    assert strip_time(resumed.log[-7:]) == strip_time(full.log[5:])
    a, b = load_checkpoint(tmp_path / "full" / "model.ckpt"), load_checkpoint(part / "model.ckpt")
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert all(np.array_equal(a.adam_state[k], b.adam_state[k]) for k in a.adam_state)


def test_resume_rejects_other_mode(corpus, tmp_path):
    cfg = TrainConfig(steps=2, batch_size=1)
    train(tiny_model(ConditionMode.MTL), corpus, cfg, ConditionMode.MTL, tmp_path)
    ckpt = load_checkpoint(tmp_path / "model.ckpt")
    with pytest.raises(ModeError):
        train(tiny_model(ConditionMode.LINGUISTIC_ONLY), corpus, TrainConfig(steps=4, batch_size=1), ConditionMode.LINGUISTIC_ONLY, resume=ckpt)


def test_checkpoint_round_trip(corpus, stats, tmp_path):
    model = tiny_model(ConditionMode.MTL, 3)
    adam = Adam(model.parameters())
    adam.step({k: np.ones_like(p.data) for k, p in model.parameters().items()})
    ckpt = Checkpoint(7, "run", ConditionMode.MTL, 3, model.cfg, TrainConfig(steps=9), stats, model.state_dict(), adam.state_arrays(), adam.t, "abc")
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert (back.step, back.run_id, back.mode, back.seed, back.adam_t, back.corpus_checksum) == (7, "run", ConditionMode.MTL, 3, 1, "abc")
    assert back.model_config == model.cfg and back.train_config == TrainConfig(steps=9)
    rebuilt = back.build_model().state_dict()
    assert all(np.array_equal(rebuilt[k], v) for k, v in model.state_dict().items())
    write_container(tmp_path / "f.bin", {"kind": "features"}, {})
    with pytest.raises(ConfigError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "f.bin")


def test_mismatched_model_is_rejected(corpus):
    model = tiny_model(ConditionMode.LINGUISTIC_ONLY)
    with pytest.raises(ConfigError, match="linguistic_dim"):
        train(model, corpus, TrainConfig(steps=1, batch_size=1), ConditionMode.LINGUISTIC_PLUS_F0)


def test_nan_aborts_naming_the_parameter(corpus):
    model = tiny_model(ConditionMode.MTL)
    model.wavenet.blocks[1].W_f.data[0, 0, 0] = np.nan
    with pytest.raises(NumericError, match=r"non-finite gradient in parameter (cond|block)\."):
        train(model, corpus, TrainConfig(steps=3, batch_size=1), ConditionMode.MTL)


def test_checkpoint_write_failure_halts_cleanly(corpus, tmp_path, monkeypatch):
    def full_disk(path, ckpt):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(training, "save_checkpoint", full_disk)
    with pytest.raises(OSError, match="No space"):
        train(tiny_model(ConditionMode.MTL), corpus, TrainConfig(steps=6, batch_size=1, checkpoint_every=3), ConditionMode.MTL, tmp_path)
    header, records = read_loss_log(tmp_path / "loss.jsonl")
    assert header["mode"] == "mtl" and [r["step"] for r in records] == [0, 1, 2]
    assert not any(t.name == "prefetch" for t in threading.enumerate())


def test_prefetch_propagates_producer_errors():
    def make(step):
        if step == 2:
            raise RuntimeError("bad batch")
        return step

    stream = training._prefetch(make, range(5), threading.Event())
    assert [next(stream), next(stream)] == [(0, 0), (1, 1)]
    with pytest.raises(RuntimeError, match="bad batch"):
        next(stream)


def test_fixed_batch_fit_lowers_cross_entropy(corpus, stats):
    model, batch = _batch(corpus, stats, ConditionMode.MTL, size=1)
    history = fit_fixed_batch(model, batch, ConditionMode.MTL, TrainConfig(), 200)
    assert history[0]["ce"] == pytest.approx(LN256, abs=1e-9)
    assert history[-1]["ce"] < history[0]["ce"] - 1.0


def moving_average(values, width):
    return np.convolve(values, np.ones(width) / width, mode="valid")


def test_cross_entropy_moving_average_falls(corpus):
    cfg = TrainConfig(steps=5000, batch_size=4, seed=0)
    log = train(tiny_model(ConditionMode.MTL), corpus, cfg, ConditionMode.MTL).log
    ce = np.array([r["ce"] for r in log])
    ma = moving_average(ce, 500)
    # ma[k] averages steps k .. k + 499, so index s - 500 ends at step s
    assert ma[5000 - 500] < ma[500 - 500]


def _steps_to_threshold(mode, seed, corpus, threshold=5.1, steps=600, width=100):
    log = train(tiny_model(mode, seed), corpus, TrainConfig(steps=steps, batch_size=4, seed=seed), mode).log
    ma = moving_average(np.array([r["ce"] for r in log]), width)
    hit = np.nonzero(ma <= threshold)[0]
    return int(hit[0]) + width if hit.size else steps + 1


def test_secondary_task_convergence_soft(corpus):
    lin = [_steps_to_threshold(ConditionMode.LINGUISTIC_ONLY, s, corpus) for s in range(5)]
    mtl = [_steps_to_threshold(ConditionMode.MTL, s, corpus) for s in range(5)]
    print(f"steps to CE<=5.1: linguistic median {np.median(lin)} {lin}, mtl median {np.median(mtl)} {mtl}")
    if np.median(mtl) > np.median(lin):
        warnings.warn(f"MTL converged slower than linguistic-only (median {np.median(mtl)} vs {np.median(lin)})")
