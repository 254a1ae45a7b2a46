import csv
import logging
from typing import IO, List, Optional, Sequence

import numpy as np
from scipy import optimize

from sparselm.errors import InfeasibleSparsityError
from sparselm.models.embedding import BinGrant, EmbeddingAllocation
from sparselm.services.autodiff import Tensor, mul, take_rows
from sparselm.services.sparsity import round_half_up, uniform_segments

log = logging.getLogger("sparse_embedding")

ORDER_STRATEGIES = ("up", "down", "none")


def uniform_bins(k: int, num_bins: Optional[int] = None) -> List[int]:
    """M equal-width bins over k dimensions; None means one bin per dimension."""
    if not num_bins or num_bins >= k:
        return [1] * k
    return uniform_segments(k, num_bins)


def _check_bins(k: int, bin_widths: Optional[Sequence[int]]) -> np.ndarray:
    widths = np.asarray([1] * k if bin_widths is None else list(bin_widths), dtype=np.int64)
    if widths.size == 0 or widths.min() < 1 or int(widths.sum()) != k:
        raise InfeasibleSparsityError(f"bin widths {widths.tolist()} must be positive and sum to k={k}")
    return widths


def embedding_density(alpha: float, bin_widths: Sequence[int]) -> float:
    widths = np.asarray(bin_widths, dtype=np.float64)
    powers = alpha ** np.arange(widths.size)
    return float(np.dot(widths, powers) / widths.sum())


def solve_alpha(k: int, delta_e: float, bin_widths: Optional[Sequence[int]] = None) -> float:
    """Decay factor alpha with (1/k) * sum_m width_m * alpha**m == delta_e."""
    widths = _check_bins(k, bin_widths)
    if not 0.0 < delta_e <= 1.0:
        raise InfeasibleSparsityError(f"embedding density must lie in (0, 1], got {delta_e}")
    if delta_e == 1.0:
        return 1.0
    floor = widths[0] / k
    if delta_e <= floor:
        raise InfeasibleSparsityError(
            f"density {delta_e} is below the minimum {floor:.4f} set by the first bin width {widths[0]}"
        )
    return float(
        optimize.bisect(
            lambda a: embedding_density(a, widths) - delta_e, 1e-9, 1.0, xtol=1e-12, maxiter=200
        )
    )


def allocate_lengths(
    vocab_size: int,
    k: int,
    alpha: float,
    bin_widths: Optional[Sequence[int]] = None,
    delta_e: Optional[float] = None,
) -> EmbeddingAllocation:
    """Grant bin m to the round(V * alpha**m) first words of the vocabulary order."""
    widths = _check_bins(k, bin_widths)
    if delta_e is None:
        delta_e = embedding_density(alpha, widths)
    num_bins = widths.size
    counts = np.array([round_half_up(vocab_size * alpha**m) for m in range(num_bins)], dtype=np.int64)
    counts[0] = vocab_size

    # compensate rounding on the widest bin after the first
    target = round_half_up(delta_e * k * vocab_size)
    deficit = target - int(np.dot(widths, counts))
    if num_bins > 1 and deficit:
        adj = 1 + int(np.argmax(widths[1:]))
        lo = int(counts[adj + 1]) if adj + 1 < num_bins else 0
        hi = int(counts[adj - 1])
        counts[adj] = int(np.clip(counts[adj] + round_half_up(deficit / widths[adj]), lo, hi))

    lengths = np.zeros(vocab_size, dtype=np.int64)
    for width, count in zip(widths, counts):
        lengths[:count] += width

    allocation = EmbeddingAllocation(
        vocab_size=vocab_size,
        max_length=k,
        density=delta_e,
        alpha=alpha,
        bins=[BinGrant(width=int(w), word_count=int(c)) for w, c in zip(widths, counts)],
        lengths=lengths.tolist(),
    )
    log.debug(
        f"allocated V={vocab_size} k={k} alpha={alpha:.4f}: {allocation.parameter_count} params "
        f"(density {allocation.realized_density:.4f}, target {delta_e:.4f})"
    )
    return allocation


def allocate_embedding(
    vocab_size: int, k: int, delta_e: float, bin_widths: Optional[Sequence[int]] = None
) -> EmbeddingAllocation:
    alpha = solve_alpha(k, delta_e, bin_widths)
    return allocate_lengths(vocab_size, k, alpha, bin_widths, delta_e)


def apply_order_strategy(frequencies: Sequence[int], strategy: str = "up", seed: Optional[int] = None) -> np.ndarray:
    """Word ids in allocation order: position 0 receives the longest embedding."""
    freqs = np.asarray(frequencies)
    if strategy == "up":
        return np.argsort(-freqs, kind="stable")
    if strategy == "down":
        return np.argsort(freqs, kind="stable")
    if strategy == "none":
        if seed is None:
            raise ValueError("order strategy 'none' needs a seed")
        return np.random.default_rng(seed).permutation(freqs.size)
    raise ValueError(f"Unknown order strategy: {strategy} (expected one of {ORDER_STRATEGIES})")


class SparseEmbedding:
    """V x k table whose entries beyond each word's prefix length are structural zeros."""

    def __init__(
        self,
        allocation: EmbeddingAllocation,
        rng: Optional[np.random.Generator] = None,
        init_range: float = 0.1,
        initialize: bool = True,
        name: str = "embedding",
    ) -> None:
        self.allocation = allocation
        v, k = allocation.vocab_size, allocation.max_length
        self.mask = (np.arange(k)[None, :] < allocation.lengths_array()[:, None]).astype(np.float64)
        if initialize:
            rng = rng if rng is not None else np.random.default_rng(0)
            data = rng.uniform(-init_range, init_range, size=(v, k)) * self.mask
        else:
            data = np.zeros((v, k))
        self.table = Tensor(data, requires_grad=True, name=f"{name}.table")

    @property
    def vocab_size(self) -> int:
        return self.allocation.vocab_size

    @property
    def dim(self) -> int:
        return self.allocation.max_length

    def parameters(self) -> List[Tensor]:
        return [self.table]

    def parameter_count(self) -> int:
        return int(self.mask.sum())

    def lookup(self, ids, row_scale: Optional[np.ndarray] = None) -> Tensor:
        """Rows for ``ids`` (flattened); ``row_scale`` multiplies whole rows (word-level dropout)."""
        out = take_rows(self.table, ids, self.mask)
        if row_scale is not None:
            scale = np.broadcast_to(np.asarray(row_scale, dtype=np.float64).reshape(-1, 1), out.shape)
            out = mul(out, Tensor(np.ascontiguousarray(scale)))
        return out

    def masked_table(self) -> Tensor:
        """The table with structural zeros enforced, for decoders tied to it."""
        return mul(self.table, Tensor(self.mask))

    def max_structural_leak(self) -> float:
        return float(np.max(np.abs(self.table.data * (1.0 - self.mask)), initial=0.0))


def lookup(embedding: SparseEmbedding, word_ids) -> Tensor:
    return embedding.lookup(word_ids)


def write_allocation_csv(
    allocation: EmbeddingAllocation, handle: IO[str], frequencies: Optional[Sequence[int]] = None
) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(["word_rank", "frequency", "length"])
    for rank, length in enumerate(allocation.lengths):
        freq = "" if frequencies is None else int(frequencies[rank])
        writer.writerow([rank, freq, length])


def length_histogram(allocation: EmbeddingAllocation) -> List[int]:
    """Number of words per length 0..k."""
    return np.bincount(allocation.lengths_array(), minlength=allocation.max_length + 1).tolist()
