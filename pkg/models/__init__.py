"""
Models module: the decoder-only transformer and its weight file.

This module contains:
- Transformer forward pass, omission sets and pruned views
- Block-addressable weight serialisation (PUDW files)
- Fallback tokenizers
- Synthetic models for tests and the toy pipeline
"""

from .synthetic import build_task_dependent_fixture, random_model, sample_task_pairs
from .tokenizer import Tokenizer, TokenizerKind, build_tokenizer
from .transformer import (
    ModelConfig,
    OmissionSet,
    PositionalKind,
    PrunedView,
    TransformerModel,
    apply_omission,
    dense_view,
    forward_logprobs,
    greedy_decode,
)
from .weights_io import load_model, model_fingerprint, open_layout, save_model

__all__ = [
    # Transformer
    "ModelConfig",
    "OmissionSet",
    "PositionalKind",
    "PrunedView",
    "TransformerModel",
    "apply_omission",
    "dense_view",
    "forward_logprobs",
    "greedy_decode",
    # Weight files
    "load_model",
    "model_fingerprint",
    "open_layout",
    "save_model",
    # Tokenizers
    "Tokenizer",
    "TokenizerKind",
    "build_tokenizer",
    # Synthetic
    "build_task_dependent_fixture",
    "random_model",
    "sample_task_pairs",
]
