"""Entity-masked adaptive pre-training with hierarchical multi-label heads for crisis tweets."""

__version__ = "0.1.0"

from .baseline import TfidfLogRegClassifier
from .corpus import AnnotatedTweet, DatasetSplit, load_corpus, save_corpus, split_by_event, stratified_dev_split
from .entities import EntitySpan, EntityType
from .heads import HeadKind, ScoreSet
from .masking import MaskingConfig
from .ner import EntityAnnotator, Gazetteer
from .ontology import LabelOntology, default_ontology, load_ontology
from .tokenizer import SubwordTokenizer
from .trainer import HierarchicalClassifier, MaskedLMPretrainer, TrainConfig

__all__ = [
    "AnnotatedTweet",
    "DatasetSplit",
    "EntityAnnotator",
    "EntitySpan",
    "EntityType",
    "Gazetteer",
    "HeadKind",
    "HierarchicalClassifier",
    "LabelOntology",
    "MaskedLMPretrainer",
    "MaskingConfig",
    "ScoreSet",
    "SubwordTokenizer",
    "TfidfLogRegClassifier",
    "TrainConfig",
    "default_ontology",
    "load_corpus",
    "load_ontology",
    "save_corpus",
    "split_by_event",
    "stratified_dev_split",
]
