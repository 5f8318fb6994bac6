"""Post-norm Transformer encoder and decoder stacks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConformanceError, ContractError
from .layers import (FeedForward, LayerNorm, MultiHeadAttention, ParamStore, causal_mask,
                     dropout, padding_mask)
from .sequences import ModalSequence
from .tensor import Tensor


@dataclass
class Dropout:
    keep_prob: float = 1.0
    training: bool = False
    rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.keep_prob, self.training, self.rng)

    def attention_args(self) -> dict:
        return {"keep_prob": self.keep_prob, "training": self.training, "rng": self.rng}


EVAL = Dropout()


def _gate(updated: Tensor, previous: Tensor, present: np.ndarray) -> Tensor:
    """Keep ``previous`` for batch rows whose memory is entirely empty."""
    if present.all():
        return updated
    keep = present.astype(np.float64)[:, None, None]
    return updated * keep + previous * (1.0 - keep)


class EncoderLayer:
    def __init__(self, store: ParamStore, name: str, width: int, heads: int, ffn_width: int | None = None):
        self.attn = MultiHeadAttention(store, f"{name}.self_attn", width, heads)
        self.norm_attn = LayerNorm(store, f"{name}.norm_attn", width)
        self.ffn = FeedForward(store, f"{name}.ffn", width, ffn_width)
        self.norm_ffn = LayerNorm(store, f"{name}.norm_ffn", width)

    def __call__(self, x: Tensor, mask, drop: Dropout) -> Tensor:
        x = self.norm_attn(x + drop(self.attn(x, x, mask, **drop.attention_args())))
        return self.norm_ffn(x + drop(self.ffn(x)))


class EncoderStack:
    def __init__(self, store: ParamStore, name: str, depth: int, width: int, heads: int,
                 ffn_width: int | None = None):
        self.width = width
        self.layers = [EncoderLayer(store, f"{name}.{i}", width, heads, ffn_width) for i in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __call__(self, source: ModalSequence, drop: Dropout = EVAL) -> ModalSequence:
        return self.encode(source, drop)

    def encode(self, source: ModalSequence, drop: Dropout = EVAL) -> ModalSequence:
        if source.length < 1:
            raise ContractError("encoder needs a source of length >= 1")
        if source.width != self.width:
            raise ConformanceError(f"encoder width {self.width} vs source shape {source.values.shape}")
        mask = padding_mask(source.valid)
        x = source.values
        for layer in self.layers:
            x = layer(x, mask, drop)
        return ModalSequence(x, source.valid, source.modality)


class DecoderLayer:
    """Masked self-attention, one cross-attention per memory (in order), then FFN."""

    def __init__(self, store: ParamStore, name: str, width: int, heads: int, n_memories: int = 1,
                 ffn_width: int | None = None):
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", width, heads)
        self.norm_self = LayerNorm(store, f"{name}.norm_self", width)
        self.cross = [MultiHeadAttention(store, f"{name}.cross{j}", width, heads) for j in range(n_memories)]
        self.norm_cross = [LayerNorm(store, f"{name}.norm_cross{j}", width) for j in range(n_memories)]
        self.ffn = FeedForward(store, f"{name}.ffn", width, ffn_width)
        self.norm_ffn = LayerNorm(store, f"{name}.norm_ffn", width)

    def __call__(self, x: Tensor, self_mask, memories: Sequence[ModalSequence | None],
                 drop: Dropout) -> Tensor:
        args = drop.attention_args()
        x = self.norm_self(x + drop(self.self_attn(x, x, self_mask, **args)))
        for attn, norm, memory in zip(self.cross, self.norm_cross, memories):
            if memory is None or memory.is_empty():
                continue
            y = norm(x + drop(attn(x, memory.values, padding_mask(memory.valid), **args)))
            x = _gate(y, x, memory.valid.any(axis=1))
        return self.norm_ffn(x + drop(self.ffn(x)))


class DecoderStack:
    def __init__(self, store: ParamStore, name: str, depth: int, width: int, heads: int,
                 n_memories: int = 1, ffn_width: int | None = None, causal: bool = True):
        self.width = width
        self.n_memories = n_memories
        self.causal = causal
        self.layers = [DecoderLayer(store, f"{name}.{i}", width, heads, n_memories, ffn_width)
                       for i in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __call__(self, target_in: ModalSequence, memory, drop: Dropout = EVAL) -> ModalSequence:
        return self.decode(target_in, memory, drop)

    def decode(self, target_in: ModalSequence, memory: ModalSequence | Sequence[ModalSequence | None],
               drop: Dropout = EVAL) -> ModalSequence:
        """Teacher-forced decoding against one memory or an ordered memory list.

        ``None`` or empty entries in the list skip their cross-attention.
        """
        memories = [memory] if isinstance(memory, ModalSequence) else list(memory)
        if len(memories) != self.n_memories:
            raise ContractError(f"decoder expects {self.n_memories} memories, got {len(memories)}")
        present = [m for m in memories if m is not None and not m.is_empty()]
        if not present:
            raise ContractError("decoder needs at least one nonempty memory")
        for m in present:
            if m.width != self.width:
                raise ConformanceError(f"memory shape {m.values.shape} does not match decoder width {self.width}")
        if target_in.width != self.width:
            raise ConformanceError(f"target shape {target_in.values.shape} does not match decoder width {self.width}")
        self_mask = padding_mask(target_in.valid)
        if self.causal:
            self_mask = causal_mask(target_in.length)[None, None] + self_mask
        x = target_in.values
        for layer in self.layers:
            x = layer(x, self_mask, memories, drop)
        return ModalSequence(x, target_in.valid, target_in.modality)
