import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

log = logging.getLogger("regularization")

Seed = Union[int, np.random.Generator, None]


def _generator(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _check_p(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")


def bernoulli_keep_mask(shape: Tuple[int, ...], p: float, seed: Seed = None) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p)."""
    _check_p(p)
    if p == 0.0:
        return np.ones(shape)
    keep = _generator(seed).random(shape) >= p
    return keep / (1.0 - p)


def word_embedding_dropout(word_ids, p: float, seed: Seed = None) -> np.ndarray:
    """Row scale per position of ``word_ids``: every occurrence of a dropped word is zeroed."""
    _check_p(p)
    ids = np.asarray(word_ids)
    if p == 0.0:
        return np.ones(ids.shape)
    distinct, inverse = np.unique(ids, return_inverse=True)
    per_word = bernoulli_keep_mask((distinct.size,), p, seed)
    return per_word[inverse].reshape(ids.shape)


def variational_dropout(shape: Tuple[int, int], p: float, seed: Seed = None) -> np.ndarray:
    """One (batch, width) mask reused at every timestep of the sequence."""
    return bernoulli_keep_mask(shape, p, seed)


def weight_drop(
    shape: Tuple[int, int], p: float, seed: Seed = None, structural_mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """DropConnect mask for one recurrent matrix, resampled per batch.

    Composed with ``structural_mask`` so structural zeros stay zero.
    """
    mask = bernoulli_keep_mask(shape, p, seed)
    if structural_mask is not None:
        mask = mask * structural_mask
    return mask


def weight_drop_layer(
    recurrent_shapes: Sequence[Tuple[int, int]], p: float, seed: Seed = None
) -> Optional[list]:
    """Masks for every component W_hh of a layer; None when p == 0."""
    if p == 0.0:
        return None
    rng = _generator(seed)
    return [weight_drop(shape, p, rng) for shape in recurrent_shapes]
