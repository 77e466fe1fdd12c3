"""Frequency-regularized transformer attention: masks, dense and block-sparse
attention, a small encoder with manual gradients, and benchmarks."""

__version__ = "0.1.0"

from .attention import (
    AttentionGrads,
    AttentionParams,
    UnsupportedConfigurationError,
    attn_full,
    attn_full_backward,
    attn_sparse_frito,
    attn_sparse_local,
    count_score_buffers,
    score_buffer_cost,
)
from .masks import AttentionMask, FreqMaskSpec, build_mask, oracle_mask, visible
from .model import Checkpoint, EncoderConfig, forward, forward_backward, load_checkpoint, save_checkpoint
from .patches import PatchGrid, PositionalEncoding, embed, seq_index
from .tensor import Rng, tensor_read, tensor_write

__all__ = [
    "AttentionGrads", "AttentionParams", "UnsupportedConfigurationError", "attn_full", "attn_full_backward",
    "attn_sparse_frito", "attn_sparse_local", "count_score_buffers", "score_buffer_cost",
    "AttentionMask", "FreqMaskSpec", "build_mask", "oracle_mask", "visible",
    "Checkpoint", "EncoderConfig", "forward", "forward_backward", "load_checkpoint", "save_checkpoint",
    "PatchGrid", "PositionalEncoding", "embed", "seq_index",
    "Rng", "tensor_read", "tensor_write",
]
