import io
import time

import numpy as np
import pytest

from mtlwavenet.codec import SILENCE_BIN, mulaw_decode, one_hot
from mtlwavenet.corpus import CorpusSpec, generate_utterance
from mtlwavenet.inference import (
    CacheStateError,
    GenerationCache,
    SamplerConfig,
    SamplerMode,
    expected_footprint,
    generate,
    incremental_step,
    sample_bin,
    synthesize_utterance,
)
from mtlwavenet.model import MultiTaskWaveNet, WaveNet, WaveNetConfig, shift_right
from mtlwavenet.tensor import DimensionError, Tensor
from mtlwavenet.training import ConditionMode, ModeError, TargetStats, build_model

from conftest import randomize, tiny_config

ARGMAX = SamplerConfig(SamplerMode.ARGMAX)

CONFIGS = {
    "tiny": tiny_config(),
    "width3": tiny_config(num_stacks=2, layers_per_stack=4, filter_width=3, residual_channels=6, gate_channels=5, skip_channels=7),
    "paper-shape": WaveNetConfig(
        num_stacks=4, layers_per_stack=10, residual_channels=4, gate_channels=4, skip_channels=4, cond_channels=2
    ),
}


def random_net(cfg, seed=0, std=0.4):
    rng = np.random.default_rng(seed)
    net = WaveNet.init(cfg, rng)
    randomize(net.parameters(), rng, std)
    return net


@pytest.mark.parametrize("name", list(CONFIGS))
@pytest.mark.parametrize("steps", [200, 500])
def test_incremental_matches_full_forward(name, steps):
    cfg = CONFIGS[name]
    net = random_net(cfg, seed=steps)
    rng = np.random.default_rng(steps)
    bins = rng.integers(0, 256, steps)
    c = rng.normal(size=(cfg.condition_dim, steps))
    full = net.forward_inputs(shift_right(bins), Tensor(c)).data
    cache = GenerationCache(net)
    prev = SILENCE_BIN
    worst = 0.0
    for t in range(steps):
        logits = incremental_step(cache, net, prev, c[:, t])
        worst = max(worst, float(np.abs(logits - full[:, t]).max()))
        prev = bins[t]
    assert worst < 1e-6


def test_frame_rate_condition_matches_repeated(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    frames = rng.normal(size=(cfg.condition_dim, 6))
    a = generate(net, frames, SamplerConfig(seed=3), c_repeat=10, return_bins=True)[1]
    b = generate(net, np.repeat(frames, 10, axis=1), SamplerConfig(seed=3), return_bins=True)[1]
    np.testing.assert_array_equal(a, b)


def test_one_hot_input_equals_bin_input(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    c = rng.normal(size=cfg.condition_dim)
    a = incremental_step(GenerationCache(net), net, 17, c)
    b = incremental_step(GenerationCache(net), net, one_hot([17])[:, 0], c)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        incremental_step(GenerationCache(net), net, np.ones(256), c)


def test_zero_weight_model_gives_uniform_logits():
    cfg = tiny_config()
    net = WaveNet.init(cfg, np.random.default_rng(0))
    for p in net.parameters().values():
        p.data = np.zeros(p.shape)
    logits = incremental_step(GenerationCache(net), net, SILENCE_BIN, np.zeros(cfg.condition_dim))
    np.testing.assert_array_equal(logits, 0.0)


def test_reset_then_replay_is_identical(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    bins = rng.integers(0, 256, 60)
    c = rng.normal(size=(cfg.condition_dim, 60))
    cache = GenerationCache(net)
    first = [incremental_step(cache, net, b, c[:, t]) for t, b in enumerate(bins)]
    cache.reset(net)
    second = [incremental_step(cache, net, b, c[:, t]) for t, b in enumerate(bins)]
    np.testing.assert_array_equal(np.array(first), np.array(second))


def test_argmax_generation_matches_teacher_forced_replay(rng):
    cfg = tiny_config()
    net = random_net(cfg, std=0.8)
    c = rng.normal(size=(cfg.condition_dim, 300))
    wave, bins = generate(net, c, ARGMAX, return_bins=True)
    logits = net.forward_inputs(shift_right(bins), Tensor(c)).data
    np.testing.assert_array_equal(logits.argmax(axis=0), bins)
    np.testing.assert_array_equal(wave.samples, mulaw_decode(bins))
    assert len(np.unique(bins)) > 1


def test_generation_is_deterministic(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    c = rng.normal(size=(cfg.condition_dim, 200))
    a = generate(net, c, SamplerConfig(seed=5)).samples
    b = generate(net, c, SamplerConfig(seed=5)).samples
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, generate(net, c, SamplerConfig(seed=6)).samples)


def test_empty_and_invalid_lengths(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    c = rng.normal(size=(cfg.condition_dim, 10))
    assert len(generate(net, c, n_samples=0)) == 0
    assert len(generate(net, np.zeros((cfg.condition_dim, 0)))) == 0
    with pytest.raises(ValueError):
        generate(net, c, n_samples=-1)
    with pytest.raises(DimensionError):
        generate(net, c, n_samples=11)
    with pytest.raises(DimensionError):
        generate(net, np.zeros((cfg.condition_dim + 1, 5)))


def test_truncated_conditions_do_not_change_earlier_samples(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    c = rng.normal(size=(cfg.condition_dim, 120))
    _, full = generate(net, c, SamplerConfig(seed=1), return_bins=True)
    for t in (0, 30, 77):
        _, cut = generate(net, c[:, : t + 1], SamplerConfig(seed=1), return_bins=True)
        np.testing.assert_array_equal(cut, full[: t + 1])


def test_trace_lines(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    trace = io.StringIO()
    _, bins = generate(net, rng.normal(size=(cfg.condition_dim, 5)), SamplerConfig(seed=0), trace=trace, return_bins=True)
    assert trace.getvalue().splitlines() == [f"{t} {b}" for t, b in enumerate(bins)]


def test_footprint_matches_accounting():
    for cfg in CONFIGS.values():
        net = random_net(cfg)
        cache = GenerationCache(net)
        expected = sum(((cfg.filter_width - 1) * d + 1) * cfg.residual_channels for d in cfg.dilations())
        assert cache.footprint() == expected == expected_footprint(net)


def test_uninitialized_cache_is_rejected(rng):
    cfg = tiny_config()
    net = random_net(cfg)
    with pytest.raises(CacheStateError):
        incremental_step(GenerationCache(), net, SILENCE_BIN, np.zeros(cfg.condition_dim))
    with pytest.raises(CacheStateError):
        GenerationCache().footprint()
    with pytest.raises(CacheStateError):
        incremental_step(GenerationCache(net), net, SILENCE_BIN)
    with pytest.raises(DimensionError):
        incremental_step(GenerationCache(net), net, SILENCE_BIN, np.zeros(cfg.condition_dim + 1))
    with pytest.raises(IndexError):
        incremental_step(GenerationCache(net), net, 256, np.zeros(cfg.condition_dim))


# --- sampling ---------------------------------------------------------------------------


def test_argmax_examples():
    logits = np.zeros(256)
    logits[7] = 3.0
    assert sample_bin(logits, ARGMAX, None) == 7
    tied = np.zeros(256)
    tied[[40, 9, 200]] = 1.0
    assert sample_bin(tied, ARGMAX, None) == 9


def test_uniform_sampling_frequencies():
    rng = np.random.default_rng(0)
    n = 100_000
    draws = np.array([sample_bin(np.zeros(256), SamplerConfig(), rng) for _ in range(n)])
    counts = np.bincount(draws, minlength=256)
    p = 1 / 256
    sigma = np.sqrt(n * p * (1 - p))
    assert np.abs(counts - n * p).max() < 5 * sigma


def test_low_temperature_matches_argmax(rng):
    cold = SamplerConfig(temperature=1e-6)
    for _ in range(20):
        logits = rng.normal(size=256)
        assert sample_bin(logits, cold, rng) == sample_bin(logits, ARGMAX, rng)


def test_temperature_validation():
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError, match="temperature"):
            SamplerConfig(temperature=bad)
    assert SamplerConfig().temperature == 1.0 and SamplerConfig().mode is SamplerMode.SAMPLE
    with pytest.raises(ValueError):
        sample_bin(np.full(256, np.nan), SamplerConfig(), np.random.default_rng(0))


def test_per_step_time_is_independent_of_position():
    cfg = WaveNetConfig()
    net = random_net(cfg, std=0.1)
    cache = GenerationCache(net)
    cache.set_condition(np.zeros((cfg.condition_dim, 1100)))
    durations = []
    for _ in range(1100):
        t0 = time.perf_counter()
        incremental_step(cache, net, SILENCE_BIN)
        durations.append(time.perf_counter() - t0)
    early = np.median(durations[5:55])
    late = np.median(durations[1000:1050])
    assert late <= 2 * early, (early, late)


# --- utterance synthesis ----------------------------------------------------------------


def test_synthesize_utterance_lengths_and_modes():
    spec = CorpusSpec(n_utterances=1, min_frames=4, max_frames=5, n_cepstra=3)
    utt = generate_utterance(spec, 0)
    stats = TargetStats.from_corpus([utt])
    for mode in ConditionMode:
        model = build_model(tiny_config(), spec.linguistic_dim, mode, 0)
        randomize(model.parameters(), np.random.default_rng(1), 0.3)
        wave = synthesize_utterance(model, utt, mode, stats, SamplerConfig(seed=2))
        assert len(wave) == len(utt.waveform) and wave.sample_rate == utt.waveform.sample_rate
    blind = type(utt)(utt.utt_id, utt.waveform, utt.linguistic, utt.cepstra, None, None, utt.frame_shift)
    model = build_model(tiny_config(), spec.linguistic_dim, ConditionMode.MTL, 0)
    assert len(synthesize_utterance(model, blind, ConditionMode.MTL, stats)) == len(utt.waveform)
    f0_model = build_model(tiny_config(), spec.linguistic_dim, ConditionMode.LINGUISTIC_PLUS_F0, 0)
    with pytest.raises(ModeError):
        synthesize_utterance(f0_model, blind, ConditionMode.LINGUISTIC_PLUS_F0, stats)
    with pytest.raises(DimensionError):
        synthesize_utterance(MultiTaskWaveNet.init(tiny_config()), utt, ConditionMode.MTL, stats)
