"""Transformer-based modal translator.

The translator encodes a source modal sequence, then decodes a related
target sequence (teacher-forced) against the encoding. The decoder half only
exists to supervise the encoder half: the encoder output is what callers use
as the enhanced source representation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ConformanceError, ContractError, VocabError
from .layers import Embedding, Linear, ParamStore, positional_encoding
from .sequences import ModalSequence, TokenBatch
from .tensor import Tensor
from .transformer import EVAL, DecoderStack, Dropout, EncoderStack

SOS_ID = 2
TEXT, DENSE = "text", "dense"
L1, SIMILARITY = "l1", "similarity"


@dataclass
class TmtConfig:
    depth: int = 1
    target_kind: str = TEXT
    dense_loss: str = L1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"translator depth must be >= 1, got {self.depth}")
        if self.target_kind not in (TEXT, DENSE):
            raise ConfigError(f"unknown target kind {self.target_kind!r}")
        if self.dense_loss not in (L1, SIMILARITY):
            raise ConfigError(f"unknown dense loss {self.dense_loss!r}")


@dataclass
class TmtOutput:
    enhanced_source: ModalSequence
    translation: Tensor | None = None
    loss: Tensor | None = None
    example_losses: Tensor | None = None
    included: np.ndarray | None = None


def encode_tokens(embedding: Embedding, tokens: TokenBatch, drop: Dropout = EVAL,
                  use_positions: bool = True) -> ModalSequence:
    """Embedding (scaled by sqrt(d)) plus sinusoidal positions, then dropout."""
    x = embedding(tokens.ids)
    if use_positions and tokens.length:
        x = x + positional_encoding(tokens.length, embedding.width)[None]
    return ModalSequence(drop(x), tokens.valid, "text")


def token_nll(logits: Tensor, ids: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-row mean negative log-likelihood over valid positions; logits (B, N, V)."""
    ids = np.asarray(ids, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    vocab = logits.shape[-1]
    if logits.shape[:-1] != ids.shape:
        raise ConformanceError(f"logits {logits.shape} do not match targets {ids.shape}")
    if np.any(valid & ((ids < 0) | (ids >= vocab))):
        raise VocabError(f"target id outside vocabulary of {vocab}")
    counts = valid.sum(axis=-1)
    if np.any(counts == 0):
        raise ContractError("every target row needs at least one non-padding position")
    onehot = (np.arange(vocab) == np.where(valid, ids, 0)[..., None]) & valid[..., None]
    picked = T.sum_(T.log_softmax(logits) * onehot, axis=(-1, -2))
    return T.scale(picked, -1.0) / counts.astype(np.float64)


def text_target_loss(logits: Tensor, target, valid=None) -> Tensor:
    """Mean token cross-entropy of one sequence; logits (N, V)."""
    ids = np.asarray(target, dtype=np.int64)
    valid = np.ones(ids.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ContractError("all target positions are padding")
    return T.reshape(token_nll(T.reshape(logits, (1, *logits.shape)), ids[None], valid[None]), ())


def _dense_rows(prediction: Tensor, target: Tensor, kind: str, valid: np.ndarray) -> Tensor:
    if prediction.shape != target.shape:
        raise ConformanceError(f"prediction {prediction.shape} vs target {target.shape}")
    counts = valid.sum(axis=-1).astype(np.float64)
    if np.any(counts == 0):
        raise ContractError("every target row needs at least one non-padding position")
    weight = valid.astype(np.float64)
    if kind == L1:
        per_pos = T.mean(T.absolute(prediction - target), axis=-1)
    elif kind == SIMILARITY:
        dot = T.sum_(prediction * target, axis=-1)
        pp = T.sum_(prediction * prediction, axis=-1)
        tt = T.sum_(target * target, axis=-1)
        zero = (pp.data == 0) | (tt.data == 0)
        # zero vectors: dot is 0, so the cosine is 0 without touching sqrt(0)
        cosine = dot / (T.sqrt(pp + zero) * T.sqrt(tt + zero))
        per_pos = 1.0 - cosine
    else:
        raise ConfigError(f"unknown dense loss {kind!r}")
    return T.sum_(per_pos * weight, axis=-1) / counts


def dense_target_loss(prediction: Tensor, target, kind: str = L1) -> Tensor:
    """L1 (mean absolute difference) or similarity (mean 1 - cosine) for (N, d) inputs."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise ConformanceError(f"prediction {prediction.shape} vs target {target.shape}")
    p = T.reshape(prediction, (1, *prediction.shape))
    t = T.reshape(target, (1, *target.shape))
    return T.reshape(_dense_rows(p, t, kind, np.ones((1, prediction.shape[0]), dtype=bool)), ())


def token_accuracy(logits: Tensor, ids: np.ndarray, valid: np.ndarray) -> tuple[int, int]:
    """(correct, total) argmax predictions over valid positions."""
    pred = logits.data.argmax(axis=-1)
    valid = np.asarray(valid, dtype=bool)
    return int(((pred == ids) & valid).sum()), int(valid.sum())


def _masked_mean(values: Tensor, included: np.ndarray) -> Tensor:
    if not included.any():
        return Tensor(0.0)
    return T.sum_(values * included.astype(np.float64)) / float(included.sum())


class ModalTranslator:
    """Encoder-decoder translator of depth M on both halves.

    Text targets share ``embedding`` for the decoder input and (transposed)
    for the output logits. Dense targets get their own input and output
    projections of width ``target_width``.
    """

    def __init__(self, store: ParamStore, name: str, config: TmtConfig, width: int, heads: int,
                 ffn_width: int | None = None, embedding: Embedding | None = None,
                 target_width: int | None = None):
        self.config = config
        self.width = width
        self.encoder = EncoderStack(store, f"{name}.encoder", config.depth, width, heads, ffn_width)
        self.decoder = DecoderStack(store, f"{name}.decoder", config.depth, width, heads, 1, ffn_width)
        if config.target_kind == TEXT:
            if embedding is None:
                raise ConfigError("text translator needs the shared embedding")
            self.embedding = embedding
        else:
            if not target_width:
                raise ConfigError("dense translator needs target_width")
            self.target_width = target_width
            self.target_in = Linear(store, f"{name}.target_in", target_width, width)
            self.target_out = Linear(store, f"{name}.target_out", width, target_width)

    def _check_kind(self, target) -> None:
        if self.config.target_kind == TEXT and not isinstance(target, TokenBatch):
            raise ConfigError("text translator needs a token target")
        if self.config.target_kind == DENSE and not isinstance(target, ModalSequence):
            raise ConfigError("dense translator needs a vector-sequence target")

    def __call__(self, source: ModalSequence, target=None, drop: Dropout = EVAL) -> TmtOutput:
        return self.forward(source, target, drop)

    def forward(self, source: ModalSequence, target=None, drop: Dropout = EVAL) -> TmtOutput:
        if target is None:
            if drop.training:
                raise ContractError("training the translator requires a target")
            return TmtOutput(self.encoder(source, drop))
        self._check_kind(target)
        enhanced = self.encoder(source, drop)
        included = source.valid.any(axis=1)
        if self.config.target_kind == TEXT:
            target_in = encode_tokens(self.embedding, target.shift_right(SOS_ID), drop)
            hidden = self.decoder(target_in, enhanced, drop)
            translation = T.matmul(hidden.values, T.transpose(self.embedding.table))
            rows = token_nll(translation, target.ids, target.valid)
        else:
            batch = target.values.shape[0]
            shifted = T.concat([Tensor(np.zeros((batch, 1, target.width))),
                                T.narrow(target.values, 1, 0, target.length - 1)], axis=1)
            valid_in = np.concatenate([np.ones((batch, 1), dtype=bool),
                                       target.valid[:, :-1]], axis=1)
            x = self.target_in(shifted) + positional_encoding(target.length, self.width)[None]
            hidden = self.decoder(ModalSequence(drop(x), valid_in), enhanced, drop)
            translation = self.target_out(hidden.values)
            rows = _dense_rows(translation, target.values, self.config.dense_loss, target.valid)
        return TmtOutput(enhanced, translation, _masked_mean(rows, included), rows, included)
