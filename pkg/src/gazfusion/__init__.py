"""Gazetteer-fused named-entity recognition on numpy.

A small self-attention encoder tags IOBES sequences; a gazetteer branch reads
per-token dictionary match codes through windowed self-attention. The two are
fused early (shared tagger over concatenated features) or late (element-wise
max over the two taggers' logits), so gazetteers can be edited at inference
time without retraining.
"""
from .corpus import Corpus, Sentence, Span, TagScheme, load_column_corpus, repair_tags, spans_of
from .evaluation import EvalReport, evaluate, evaluate_pool, evaluate_unseen
from .gazetteer import Gazetteer, GazetteerSet, add_entries, annotate, remove_entries
from .model import FusionModel, ModelConfig, predict_corpus, unplug_gazetteer
from .synth import SynthConfig, generate_synthetic_corpus
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Sentence", "Span", "TagScheme", "load_column_corpus", "repair_tags", "spans_of",
    "EvalReport", "evaluate", "evaluate_pool", "evaluate_unseen",
    "Gazetteer", "GazetteerSet", "add_entries", "annotate", "remove_entries",
    "FusionModel", "ModelConfig", "predict_corpus", "unplug_gazetteer",
    "SynthConfig", "generate_synthetic_corpus", "TrainConfig", "train",
]
