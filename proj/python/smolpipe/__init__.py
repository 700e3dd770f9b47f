"""Desk-scale multimodal pipeline kernels.

Thin wrapper over the C++ core: pixel shuffle, tiling geometry, byte-level
tokenization with positional markers, and context budgeting.
"""

from ._smolpipe import (
    ContextOverflowError,
    GeometryError,
    InputError,
    PipelineConfig,
    Vocab,
    allocation_report,
    extend_vocab,
    flatten_tokens,
    grid_shape,
    image_token_count,
    kv_cache_bytes,
    longest_edge_fit,
    pixel_shuffle,
    pixel_unshuffle,
    plan_mixture,
    positional_token_name,
    rope,
    video_token_count,
)

__all__ = [
    "ContextOverflowError",
    "GeometryError",
    "InputError",
    "PipelineConfig",
    "Vocab",
    "allocation_report",
    "extend_vocab",
    "flatten_tokens",
    "grid_shape",
    "image_token_count",
    "kv_cache_bytes",
    "longest_edge_fit",
    "pixel_shuffle",
    "pixel_unshuffle",
    "plan_mixture",
    "positional_token_name",
    "rope",
    "video_token_count",
]
