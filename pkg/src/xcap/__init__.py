"""Attention-LSTM explanation generator for fixed classifier feature maps."""
from .captioner import CaptionerParams, ModelConfig, decode_greedy, sequence_loss
from .grammar import NO_FRACTURE, UNPARSEABLE, FractureLabels, build_vocab, parse, render

__all__ = [
    "CaptionerParams",
    "ModelConfig",
    "decode_greedy",
    "sequence_loss",
    "NO_FRACTURE",
    "UNPARSEABLE",
    "FractureLabels",
    "build_vocab",
    "parse",
    "render",
]
__version__ = "0.1.0"
