from typing import List

import numpy as np
from pydantic import BaseModel, Field, model_validator


class BinGrant(BaseModel):
    width: int = Field(ge=1)
    word_count: int = Field(ge=0)


class EmbeddingAllocation(BaseModel):
    """Trainable prefix length per word rank (rank 0 = first word of the vocabulary order)."""

    vocab_size: int = Field(ge=1)
    max_length: int = Field(ge=1)
    density: float = Field(gt=0.0, le=1.0)
    alpha: float = Field(gt=0.0, le=1.0)
    bins: List[BinGrant]
    lengths: List[int]

    @model_validator(mode="after")
    def _check_lengths(self):
        if sum(b.width for b in self.bins) != self.max_length:
            raise ValueError("bin widths must sum to max_length")
        if len(self.lengths) != self.vocab_size:
            raise ValueError(f"{len(self.lengths)} lengths for vocab_size {self.vocab_size}")
        lengths = np.asarray(self.lengths)
        if lengths.min() < 1 or lengths.max() > self.max_length:
            raise ValueError("every length must lie in [1, max_length]")
        if np.any(np.diff(lengths) > 0):
            raise ValueError("lengths must be non-increasing along the vocabulary order")
        return self

    @property
    def parameter_count(self) -> int:
        return int(sum(self.lengths))

    @property
    def realized_density(self) -> float:
        return self.parameter_count / (self.vocab_size * self.max_length)

    def lengths_array(self) -> np.ndarray:
        return np.asarray(self.lengths, dtype=np.int64)
