"""Desk-scale multi-head speculative decoding for encoder-decoder ASR.

Modules by concern: `numerics` (autodiff tensors), `model` (toy
encoder-decoder transformer plus head variants), `decoding` (greedy,
propose/verify, assistant-model decoding), `training` (losses, optimizer,
pseudo-labels), `data` (synthetic corpus), `evalbench` (metrics and speedup
harness), `cli` (command-line front end).
"""

from .model import ModelConfig, Model, init_model, with_medusa, freeze_mask
from .decoding import (VerificationPolicy, LengthPenalty, DecodeResult,
                       greedy_decode, medusa_decode, assisted_decode)
from .data import CorpusConfig, Utterance, generate_corpus
from .training import TrainConfig, train_model, pseudo_label
from .evalbench import bench, ablate_heads, wer, cer, edit_distance

__all__ = [
    "ModelConfig", "Model", "init_model", "with_medusa", "freeze_mask",
    "VerificationPolicy", "LengthPenalty", "DecodeResult",
    "greedy_decode", "medusa_decode", "assisted_decode",
    "CorpusConfig", "Utterance", "generate_corpus",
    "TrainConfig", "train_model", "pseudo_label",
    "bench", "ablate_heads", "wer", "cer", "edit_distance",
]

__version__ = "0.1.0"
