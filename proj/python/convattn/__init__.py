"""Convolutional attention sequence-to-sequence speech recognizer."""

from ._core import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    Model,
    NumericError,
    PhoneMap,
    beam_search,
    compute_features,
    edit_distance,
    error_rate,
    gradcheck,
    read_features,
    read_wav,
    train,
    write_features,
    write_synth_corpus,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "Model",
    "NumericError",
    "PhoneMap",
    "beam_search",
    "compute_features",
    "edit_distance",
    "error_rate",
    "gradcheck",
    "read_features",
    "read_wav",
    "train",
    "write_features",
    "write_synth_corpus",
]
