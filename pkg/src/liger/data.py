"""Byte-level corpora. Tokenization is the identity on bytes (ids 0..255, pad 256)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .rng import Rng

VOCAB_SIZE = 257  # 256 byte values + pad


@dataclass
class Corpus:
    train_ids: np.ndarray
    val_ids: np.ndarray

    @classmethod
    def from_text(cls, text: str, val_fraction: float = 0.1) -> "Corpus":
        ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        if ids.size < 4:
            raise InputError("corpus too small to split")
        if not 0.0 < val_fraction < 1.0:
            raise InputError(f"val_fraction must be in (0,1), got {val_fraction}")
        cut = int(round(ids.size * (1.0 - val_fraction)))
        cut = min(max(cut, 2), ids.size - 2)
        return cls(train_ids=ids[:cut], val_ids=ids[cut:])

    @classmethod
    def from_file(cls, path, val_fraction: float = 0.1) -> "Corpus":
        with open(path, "rb") as f:
            raw = f.read()
        return cls.from_text(raw.decode("utf-8", errors="replace"), val_fraction)

    def sample_window(self, seq_len: int, rng: Rng) -> np.ndarray:
        """One random training window of seq_len+1 ids (inputs plus shifted targets)."""
        span = seq_len + 1
        if self.train_ids.size < span:
            raise InputError(f"train split shorter than window {span}")
        start = int(rng.integers(0, self.train_ids.size - span + 1))
        return self.train_ids[start : start + span]

    def eval_windows(self, seq_len: int, split: str = "val", limit: int | None = None):
        """Consecutive non-overlapping windows over a split; ragged tail dropped."""
        ids = self.val_ids if split == "val" else self.train_ids
        span = seq_len + 1
        if ids.size < span:
            raise InputError(f"{split} split shorter than window {span}")
        count = ids.size // span
        if limit is not None:
            count = min(count, limit)
        for i in range(count):
            yield ids[i * span : (i + 1) * span]
