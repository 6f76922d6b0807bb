"""Lattice transformer encoder with a BiGRU-CRF tagger for lexicon-augmented Chinese NER."""
from .data import TaggedSentence, entity_scores, generate_synthetic, read_conll
from .lattice import build_lattice, build_lexicon, build_relation_matrix, relation
from .model import Model
from .trainer import TrainConfig, evaluate, load_model, save_model, train

__all__ = [
    "Model", "TaggedSentence", "TrainConfig", "build_lattice", "build_lexicon", "build_relation_matrix",
    "entity_scores", "evaluate", "generate_synthetic", "load_model", "read_conll", "relation", "save_model",
    "train",
]
