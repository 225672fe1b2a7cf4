"""Multi-task WaveNet: a sample-level WaveNet whose shared conditioner also predicts frame-level acoustic features."""

from .codec import WaveformBuffer, mulaw_decode, mulaw_encode, wav_read, wav_write
from .corpus import CorpusSpec, Utterance, generate_corpus, load_corpus
from .inference import SamplerConfig, SamplerMode, generate
from .metrics import EvalReport, evaluate_system
from .model import MultiTaskWaveNet, WaveNetConfig, receptive_field
from .training import ConditionMode, TrainConfig, train

__all__ = [
    "ConditionMode",
    "CorpusSpec",
    "EvalReport",
    "MultiTaskWaveNet",
    "SamplerConfig",
    "SamplerMode",
    "TrainConfig",
    "Utterance",
    "WaveNetConfig",
    "WaveformBuffer",
    "evaluate_system",
    "generate",
    "generate_corpus",
    "load_corpus",
    "mulaw_decode",
    "mulaw_encode",
    "receptive_field",
    "train",
    "wav_read",
    "wav_write",
]
