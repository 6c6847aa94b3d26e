"""Datasets, episode sampling and synthetic data generators."""

from relnet.data.episodes import PRESETS, Episode, EpisodeSpec, eval_queries, sample_episode
from relnet.data.features import FeatureTable, load_feature_table, make_synthetic_zsl, write_feature_table
from relnet.data.images import (
    ClassIndexedDataset,
    DataError,
    augment_rotations,
    load_image_dataset,
    load_split_file,
    make_glyph_dataset,
    resize_bilinear,
    split_classes,
    write_image_corpus,
)
from relnet.data.pairs import PairSet, gen_synthetic_relation, relation_truth

__all__ = [
    "PRESETS",
    "ClassIndexedDataset",
    "DataError",
    "Episode",
    "EpisodeSpec",
    "FeatureTable",
    "PairSet",
    "augment_rotations",
    "eval_queries",
    "gen_synthetic_relation",
    "load_feature_table",
    "load_image_dataset",
    "load_split_file",
    "make_glyph_dataset",
    "make_synthetic_zsl",
    "relation_truth",
    "resize_bilinear",
    "sample_episode",
    "split_classes",
    "write_feature_table",
    "write_image_corpus",
]
