"""Minimal reverse-mode differentiation core and the layer primitives used by
the emotion models: dense-array `Value` nodes, a GRU cell, a depthwise
temporal convolution, and a finite-difference gradient checker."""

from emodist.nnstack.value import Value, backward, concat
from emodist.nnstack.layers import (
    DepthwiseTConvParams,
    GruCellParams,
    gru_cell_forward,
    gru_sequence,
    gru_sequence_infer,
    masked_mean,
    tconv_forward,
)
from emodist.nnstack.gradcheck import finite_diff_check
from emodist.nnstack.checkpoint import load_tensors, save_tensors

__all__ = [
    "Value",
    "backward",
    "concat",
    "GruCellParams",
    "DepthwiseTConvParams",
    "gru_cell_forward",
    "gru_sequence",
    "gru_sequence_infer",
    "masked_mean",
    "tconv_forward",
    "finite_diff_check",
    "save_tensors",
    "load_tensors",
]
