"""Pointer-generator summarization with controllable topic, readability and simplicity."""

from .data import Corpus, Example, Vocabulary, build_vocab, gen_synthetic
from .decode import DecodeConfig, beam_search, decode, greedy_decode
from .model import Dims, ModelParams, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Example", "Vocabulary", "build_vocab", "gen_synthetic",
    "DecodeConfig", "beam_search", "decode", "greedy_decode",
    "Dims", "ModelParams", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "train",
]
