import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from sparselm.errors import CorpusError
from sparselm.services.embedding import apply_order_strategy

log = logging.getLogger("corpus_io")

UNK = "<unk>"
EOS = "<eos>"
SPECIALS = (UNK, EOS)
UNK_TAG = "<unk-tag>"


class Vocabulary:
    """Dense ids 0..V-1; specials pinned first, the rest in allocation order."""

    def __init__(self, itos: Sequence[str], frequencies: Sequence[int], strategy: str = "up") -> None:
        self.itos: List[str] = list(itos)
        self.stoi: Dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("vocabulary tokens must be unique")
        self.frequencies: List[int] = [int(f) for f in frequencies]
        self.strategy = strategy

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def numericalize(self, tokens: Iterable[str]) -> np.ndarray:
        unk = self.unk_id
        return np.fromiter((self.stoi.get(t, unk) for t in tokens), dtype=np.int64)

    def denumericalize(self, ids: Iterable[int]) -> List[str]:
        return [self.itos[int(i)] for i in ids]

    def to_dict(self) -> dict:
        return {"itos": self.itos, "frequencies": self.frequencies, "strategy": self.strategy}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(data["itos"], data["frequencies"], data.get("strategy", "up"))


def build_vocabulary(
    tokens: Iterable[str], min_count: int = 1, strategy: str = "up", seed: Optional[int] = None
) -> Vocabulary:
    """Count training tokens and order them by ``strategy``; ties keep first-occurrence order."""
    counts = Counter()
    first_seen: Dict[str, int] = {}
    n_tokens = 0
    for tok in tokens:
        n_tokens += 1
        counts[tok] += 1
        first_seen.setdefault(tok, len(first_seen))
    if n_tokens == 0:
        raise CorpusError("cannot build a vocabulary from an empty token stream")

    special_freq = {s: counts.pop(s, 0) for s in SPECIALS}
    words = sorted((t for t in counts if counts[t] >= min_count), key=first_seen.__getitem__)
    # rare words fold into the unknown token
    special_freq[UNK] += sum(c for t, c in counts.items() if c < min_count)

    freqs = [counts[w] for w in words]
    order = apply_order_strategy(freqs, strategy, seed if seed is not None else 0)
    itos = list(SPECIALS) + [words[i] for i in order]
    frequencies = [special_freq[s] for s in SPECIALS] + [freqs[i] for i in order]
    log.info(f"Vocabulary built: {len(itos)} types from {n_tokens} tokens (strategy={strategy})")
    return Vocabulary(itos, frequencies, strategy)


def read_lm_corpus(path: str) -> List[str]:
    """Whitespace tokens, one end-of-sentence token after every non-empty line."""
    if not os.path.exists(path):
        raise CorpusError(f"corpus file not found: {path}")
    tokens: List[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            words = line.split()
            if words:
                tokens.extend(words)
                tokens.append(EOS)
    return tokens


def lm_batches(ids: Sequence[int], batch_size: int = 20, bptt_len: int = 35) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """(inputs, targets) pairs of shape (batch_size, <= bptt_len) over batch_size contiguous streams."""
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or bptt_len < 1:
        raise ValueError("batch_size and bptt_len must be positive")
    if ids.size < 2 * batch_size:
        raise CorpusError(f"corpus of {ids.size} tokens is too short for batch size {batch_size}")
    stream_len = ids.size // batch_size
    streams = ids[: stream_len * batch_size].reshape(batch_size, stream_len)
    for start in range(0, stream_len - 1, bptt_len):
        stop = min(start + bptt_len, stream_len - 1)
        yield streams[:, start:stop], streams[:, start + 1:stop + 1]


@dataclass
class TaggedSentence:
    tokens: List[int]
    tags: List[int]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise CorpusError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")

    def __len__(self) -> int:
        return len(self.tokens)


class TagSet:
    """Tag ids in first-appearance order of the training split; unknown tags map past the end."""

    def __init__(self, tags: Sequence[str]) -> None:
        self.itos: List[str] = list(tags)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def unknown_id(self) -> int:
        return len(self.itos)

    def lookup(self, tag: str) -> int:
        return self.stoi.get(tag, self.unknown_id)

    def name(self, tag_id: int) -> str:
        return self.itos[tag_id] if tag_id < len(self.itos) else UNK_TAG


@dataclass
class TaggedCorpus:
    sentences: List[TaggedSentence]
    vocabulary: Vocabulary
    tagset: TagSet
    unknown_tags: int = 0
    raw: List[Tuple[List[str], List[str]]] = field(default_factory=list, repr=False)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def read_tagged_file(path: str) -> List[Tuple[List[str], List[str]]]:
    """Two columns (token TAB tag), blank line between sentences, UTF-8."""
    if not os.path.exists(path):
        raise CorpusError(f"tagged corpus not found: {path}")
    sentences: List[Tuple[List[str], List[str]]] = []
    words: List[str] = []
    tags: List[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                if words:
                    sentences.append((words, tags))
                    words, tags = [], []
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise CorpusError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
            words.append(cols[0])
            tags.append(cols[1])
    if words:
        sentences.append((words, tags))
    return sentences


def load_tagged_corpus(
    path: str,
    vocabulary: Optional[Vocabulary] = None,
    tagset: Optional[TagSet] = None,
    strategy: str = "up",
    seed: Optional[int] = None,
    min_count: int = 1,
) -> TaggedCorpus:
    """Parse and numericalize a tagged file; without a vocabulary/tagset it is the training split."""
    raw = read_tagged_file(path)
    if vocabulary is None:
        if not raw:
            raise CorpusError(f"training corpus {path} is empty")
        vocabulary = build_vocabulary((w for words, _ in raw for w in words), min_count, strategy, seed)
    if tagset is None:
        seen: Dict[str, None] = {}
        for _, tags in raw:
            for t in tags:
                seen.setdefault(t, None)
        tagset = TagSet(list(seen))

    unknown = 0
    sentences = []
    for words, tags in raw:
        tag_ids = [tagset.lookup(t) for t in tags]
        unknown += sum(1 for t in tag_ids if t == tagset.unknown_id)
        sentences.append(TaggedSentence(vocabulary.numericalize(words).tolist(), tag_ids))
    if unknown:
        log.warning(f"{path}: {unknown} tokens carry tags unseen in training; mapped to {UNK_TAG}")
    return TaggedCorpus(sentences, vocabulary, tagset, unknown, raw)


def write_tagged_corpus(path: str, sentences: Sequence[Tuple[Sequence[str], Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for words, tags in sentences:
            for w, t in zip(words, tags):
                f.write(f"{w}\t{t}\n")
            f.write("\n")


def pos_batches(
    sentences: Sequence[TaggedSentence], batch_size: int = 20, rng: Optional[np.random.Generator] = None
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(tokens, tags) arrays of shape (batch, T); only sentences of equal length share a batch.

    With ``rng`` the sentences are shuffled within each length and the batch order is shuffled.
    """
    by_length: Dict[int, List[int]] = {}
    for idx, s in enumerate(sentences):
        if len(s):
            by_length.setdefault(len(s), []).append(idx)
    batches = []
    for length in sorted(by_length):
        members = np.asarray(by_length[length])
        if rng is not None:
            members = members[rng.permutation(members.size)]
        for start in range(0, members.size, batch_size):
            chunk = members[start:start + batch_size]
            tokens = np.array([sentences[i].tokens for i in chunk], dtype=np.int64)
            tags = np.array([sentences[i].tags for i in chunk], dtype=np.int64)
            batches.append((tokens, tags))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches
