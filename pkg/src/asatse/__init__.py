"""Target speech extraction with attention-based scaling adaptation, on a small autodiff engine."""

from .adaptation import AsaConfig, asa_forward, attention_entropy, scaling_adapt
from .data import gen_dataset, load_split
from .dsp import Waveform, ipd, sisdr, stft
from .errors import AsaTseError, InvalidArgumentError, InvalidShapeError, InvalidStateError, NumericError
from .harness import EvalReport, TrainConfig, bench_attention, evaluate, train
from .losses import LossReport, cross_entropy, mtl_loss, sisdr_loss
from .network import Extractor, NetConfig, load_checkpoint, save_checkpoint

__all__ = [
    "AsaConfig", "asa_forward", "attention_entropy", "scaling_adapt",
    "gen_dataset", "load_split",
    "Waveform", "ipd", "sisdr", "stft",
    "AsaTseError", "InvalidArgumentError", "InvalidShapeError", "InvalidStateError", "NumericError",
    "EvalReport", "TrainConfig", "bench_attention", "evaluate", "train",
    "LossReport", "cross_entropy", "mtl_loss", "sisdr_loss",
    "Extractor", "NetConfig", "load_checkpoint", "save_checkpoint",
]
