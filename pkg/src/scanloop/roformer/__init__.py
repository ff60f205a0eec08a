"""Rotary-attention feature enhancement between two clouds."""

from scanloop.roformer.attention import (
    AttentionBlock,
    EnhancedPair,
    cross_attention,
    cross_attention_logits,
    enhance,
    init_roformer,
    rotary_self_attention,
    self_attention_logits,
)
from scanloop.roformer.rotary import RotaryEmbedding, apply_rotation, init_rotary, rotary_embed

__all__ = [
    "AttentionBlock",
    "EnhancedPair",
    "RotaryEmbedding",
    "apply_rotation",
    "cross_attention",
    "cross_attention_logits",
    "enhance",
    "init_roformer",
    "init_rotary",
    "rotary_embed",
    "rotary_self_attention",
    "self_attention_logits",
]
