"""Skeleton action recognition with dilated directional graph kernels and learned curves."""

from ._core import (
    ArgumentError,
    ConfigError,
    Dataset,
    FormatError,
    Model,
    NumericError,
    ScoreFile,
    ShapeError,
    SkeletonGraph,
    StructuralError,
    body_graph,
    dilated_kernel,
    ensemble,
    generate_synthetic,
    preprocess,
    read_dataset,
    read_scores,
    split_per_class,
    train,
    write_dataset,
    write_scores,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "Dataset",
    "FormatError",
    "Model",
    "NumericError",
    "ScoreFile",
    "ShapeError",
    "SkeletonGraph",
    "StructuralError",
    "body_graph",
    "dilated_kernel",
    "ensemble",
    "generate_synthetic",
    "preprocess",
    "read_dataset",
    "read_scores",
    "split_per_class",
    "train",
    "write_dataset",
    "write_scores",
]
