"""Learned string-similarity embeddings for entity normalization."""
from .ann_index import ForestConfig, VectorStore, brute_force_query, build_index, query
from .encoder import EncoderConfig, EncoderModel, load_model, model_fingerprint, save_model
from .pairs import PairSet, TrainingPair, generate_variation_pairs, initial_pairs, mine_hard_negatives
from .refset import Entity, QueryRecord, ReferenceSet, parse_query_set, parse_reference_set
from .retrieval import EmbeddedReference, embed_reference, evaluate_hits_at_k, retrieve
from .synthetic import SyntheticCorpus, make_corpus
from .training import TrainConfig, train_similarity

__version__ = "0.1.0"

__all__ = [
    "EmbeddedReference",
    "EncoderConfig",
    "EncoderModel",
    "Entity",
    "ForestConfig",
    "PairSet",
    "QueryRecord",
    "ReferenceSet",
    "SyntheticCorpus",
    "TrainConfig",
    "TrainingPair",
    "VectorStore",
    "brute_force_query",
    "build_index",
    "embed_reference",
    "evaluate_hits_at_k",
    "generate_variation_pairs",
    "initial_pairs",
    "load_model",
    "make_corpus",
    "mine_hard_negatives",
    "model_fingerprint",
    "parse_query_set",
    "parse_reference_set",
    "query",
    "retrieve",
    "save_model",
    "train_similarity",
]
