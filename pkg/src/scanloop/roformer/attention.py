"""Rotary self-attention, vanilla cross-attention and their interleaving."""

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from scanloop.common.config import RoformerSettings
from scanloop.common.exceptions import ContractError, DimensionError
from scanloop.compute import ops
from scanloop.compute.params import ParameterStore, glorot_normal, he_normal
from scanloop.compute.tensor import Tensor
from scanloop.roformer.rotary import RotaryEmbedding, init_rotary, rotary_embed

logger = logging.getLogger(__name__)

_PROJECTIONS = ("q", "k", "v")


@dataclass(frozen=True, eq=False)
class AttentionBlock:
    """View on the parameters of one attention layer: ``roformer.block{index}.{kind}.*``."""

    params: Mapping[str, Tensor] | ParameterStore
    index: int
    kind: str = "self"
    scale_logits: bool = True

    @property
    def prefix(self) -> str:
        return f"roformer.block{self.index}.{self.kind}"

    def __getitem__(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    @property
    def width(self) -> int:
        return self["Wq"].shape[0]


def init_roformer(
    store: ParameterStore,
    cfg: RoformerSettings,
    width: int,
    rng: np.random.Generator,
) -> None:
    """Register the rotary map and ``cfg.blocks`` self/cross layers of width ``width``."""
    if width % 2:
        raise ContractError(f"attention width must be even for rotary pairs, got {width}")
    init_rotary(store, width, rng, cfg.rotary_mode)
    hidden = cfg.feedforward_factor * width
    for b in range(cfg.blocks):
        for kind in ("self", "cross"):
            prefix = f"roformer.block{b}.{kind}"
            for p in _PROJECTIONS:
                store.add(f"{prefix}.W{p}", glorot_normal(rng, (width, width), width, width))
                store.add(f"{prefix}.b{p}", np.zeros(width))
            store.add(f"{prefix}.ff.W1", he_normal(rng, (width, hidden), width))
            store.add(f"{prefix}.ff.b1", np.zeros(hidden))
            store.add(f"{prefix}.ff.W2", glorot_normal(rng, (hidden, width), hidden, width))
            store.add(f"{prefix}.ff.b2", np.zeros(width))


def _project(block: AttentionBlock, x: Tensor, p: str) -> Tensor:
    return ops.linear(x, block[f"W{p}"], block[f"b{p}"])


def _logit_scale(block: AttentionBlock) -> float:
    return 1.0 / np.sqrt(block.width) if block.scale_logits else 1.0


def _feed_forward(block: AttentionBlock, x: Tensor) -> Tensor:
    h = ops.relu(ops.linear(ops.layer_norm_rows(x), block["ff.W1"], block["ff.b1"]))
    return x + ops.linear(h, block["ff.W2"], block["ff.b2"])


def _check_width(feats: Tensor, block: AttentionBlock) -> None:
    if feats.ndim != 2 or feats.shape[1] != block.width:
        raise DimensionError(f"{block.prefix}: features {feats.shape}, width {block.width}")


def self_attention_logits(
    feats: Tensor,
    embedding: RotaryEmbedding,
    block: AttentionBlock,
) -> Tensor:
    """(R_i q_i)^T (R_j k_j), scaled; positions enter only through theta_j - theta_i."""
    _check_width(feats, block)
    if embedding.width != block.width or embedding.theta.shape[0] != feats.shape[0]:
        raise DimensionError(
            f"{block.prefix}: embedding {embedding.theta.shape} vs features {feats.shape}"
        )
    h = ops.layer_norm_rows(feats)
    q = ops.rotate_pairs(_project(block, h, "q"), embedding.theta)
    k = ops.rotate_pairs(_project(block, h, "k"), embedding.theta)
    return ops.scale(q @ k.T, _logit_scale(block))


def cross_attention_logits(featsQ: Tensor, featsS: Tensor, block: AttentionBlock) -> Tensor:
    _check_width(featsQ, block)
    _check_width(featsS, block)
    q = _project(block, ops.layer_norm_rows(featsQ), "q")
    k = _project(block, ops.layer_norm_rows(featsS), "k")
    return ops.scale(q @ k.T, _logit_scale(block))


def rotary_self_attention(
    feats: Tensor,
    positions: np.ndarray | RotaryEmbedding,
    block: AttentionBlock,
    mode: str = "linear",
) -> Tensor:
    """Pre-norm rotary self-attention with residual add and feed-forward."""
    if feats.shape[0] < 1:
        raise ContractError("self-attention needs at least one point")
    embedding = (
        positions
        if isinstance(positions, RotaryEmbedding)
        else rotary_embed(positions, block.params, mode)
    )
    weights = ops.softmax_rows(self_attention_logits(feats, embedding, block))
    v = _project(block, ops.layer_norm_rows(feats), "v")
    return _feed_forward(block, feats + weights @ v)


def cross_attention(featsQ: Tensor, featsS: Tensor, block: AttentionBlock) -> Tensor:
    """Vanilla attention from Q into S; no rotary terms across clouds."""
    if featsQ.shape[0] < 1 or featsS.shape[0] < 1:
        raise ContractError("cross-attention needs non-empty query and source sets")
    weights = ops.softmax_rows(cross_attention_logits(featsQ, featsS, block))
    v = _project(block, ops.layer_norm_rows(featsS), "v")
    return _feed_forward(block, featsQ + weights @ v)


@dataclass(eq=False)
class EnhancedPair:
    features_a: Tensor
    features_b: Tensor
    embedding_a: RotaryEmbedding
    embedding_b: RotaryEmbedding


def enhance(
    Pa: np.ndarray,
    Fa: Tensor,
    Pb: np.ndarray,
    Fb: Tensor,
    params: Mapping[str, Tensor] | ParameterStore,
    cfg: RoformerSettings,
    blocks: int | None = None,
) -> EnhancedPair:
    """``blocks`` rounds of self(A), self(B), then simultaneous cross(A<-B), cross(B<-A)."""
    rounds = cfg.blocks if blocks is None else blocks
    if rounds < 1:
        raise ContractError(f"enhance needs at least one round, got {rounds}")
    emb_a = rotary_embed(Pa, params, cfg.rotary_mode)
    emb_b = rotary_embed(Pb, params, cfg.rotary_mode)
    a, b = Fa, Fb
    for r in range(rounds):
        self_block = AttentionBlock(params, r, "self", cfg.scale_logits)
        cross_block = AttentionBlock(params, r, "cross", cfg.scale_logits)
        a = rotary_self_attention(a, emb_a, self_block)
        b = rotary_self_attention(b, emb_b, self_block)
        a, b = cross_attention(a, b, cross_block), cross_attention(b, a, cross_block)
    logger.debug(
        "features enhanced",
        extra={"fields": {"rounds": rounds, "n_a": Fa.shape[0], "n_b": Fb.shape[0]}},
    )
    return EnhancedPair(a, b, emb_a, emb_b)
