"""ESIM natural language inference with attention and LSTM-gate saliency."""

from .corpus import LABELS, RawExample, Vocab, build_vocab, bundled_examples, parse_snli_jsonl, tokenize
from .esim import EsimParams, forward
from .estimator import EsimClassifier
from .introspect import ExplanationReport, compare_models, explain
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "LABELS",
    "RawExample",
    "Vocab",
    "build_vocab",
    "bundled_examples",
    "parse_snli_jsonl",
    "tokenize",
    "EsimParams",
    "forward",
    "EsimClassifier",
    "ExplanationReport",
    "compare_models",
    "explain",
    "TrainConfig",
    "evaluate",
    "train",
]
