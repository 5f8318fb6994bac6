"""Batched sequence containers shared by the model, translators and data code."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class ModalSequence:
    """A batch of vector sequences: ``values`` (B, T, d) and ``valid`` (B, T)."""

    values: Tensor
    valid: np.ndarray
    modality: str = ""

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def is_empty(self) -> bool:
        return self.length == 0 or not self.valid.any()

    @classmethod
    def full(cls, values, modality: str = "") -> "ModalSequence":
        values = values if isinstance(values, Tensor) else Tensor(values)
        return cls(values, np.ones(values.shape[:2], dtype=bool), modality)


@dataclass
class TokenBatch:
    """Padded token ids (B, N) with a validity mask; each row ends with eos."""

    ids: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_lists(cls, rows: list[list[int]], pad_id: int = 0) -> "TokenBatch":
        width = max((len(r) for r in rows), default=0)
        ids = np.full((len(rows), width), pad_id, dtype=np.int64)
        valid = np.zeros((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
            valid[i, :len(r)] = True
        return cls(ids, valid)

    def rows(self) -> list[list[int]]:
        return [self.ids[i, self.valid[i]].tolist() for i in range(self.batch_size)]

    def shift_right(self, start_id: int) -> "TokenBatch":
        ids = np.concatenate([np.full((self.batch_size, 1), start_id), self.ids[:, :-1]], axis=1)
        valid = np.concatenate([np.ones((self.batch_size, 1), dtype=bool), self.valid[:, :-1]], axis=1)
        return TokenBatch(ids, valid)
