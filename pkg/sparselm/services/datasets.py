"""Public corpora for the desk-scale runs, fetched once and converted for the corpus readers.

POS: Universal Dependencies English EWT (CC BY-SA 4.0), Penn Treebank tags taken from the
XPOS column. Recite: a public-domain Project Gutenberg novel, cut to whole lines.
"""

import logging
import os
import re
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import httpx

from sparselm.errors import CorpusError
from sparselm.services.corpus import write_tagged_corpus

log = logging.getLogger("datasets")

EWT_BASE_URL = "https://raw.githubusercontent.com/UniversalDependencies/UD_English-EWT/r2.13/"
EWT_FILES = {
    "train": "en_ewt-ud-train.conllu",
    "valid": "en_ewt-ud-dev.conllu",
    "test": "en_ewt-ud-test.conllu",
}
GUTENBERG_URL = "https://www.gutenberg.org/cache/epub/1342/pg1342.txt"

POS_TRAIN_TOKENS = 50_000
RECITE_TOKENS = 50_000

_START = re.compile(r"^\*\*\* ?START OF (THE|THIS) PROJECT GUTENBERG", re.IGNORECASE)
_END = re.compile(r"^\*\*\* ?END OF (THE|THIS) PROJECT GUTENBERG", re.IGNORECASE)

TaggedSentences = List[Tuple[List[str], List[str]]]


@dataclass
class FetchedCorpus:
    name: str
    files: Dict[str, str]
    tokens: Dict[str, int]


def download(url: str, path: str, client: Optional[httpx.Client] = None) -> str:
    """Fetch ``url`` to ``path`` unless it is already there; the write is atomic."""
    if os.path.exists(path):
        log.info(f"Using cached {path}")
        return path
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    owned = client is None
    client = client or httpx.Client(follow_redirects=True, timeout=60.0)
    tmp = path + ".part"
    log.info(f"Downloading {url}")
    try:
        with client.stream("GET", url) as response:
            response.raise_for_status()
            with open(tmp, "wb") as f:
                for chunk in response.iter_bytes():
                    f.write(chunk)
    except httpx.HTTPError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise CorpusError(f"download of {url} failed: {exc}") from exc
    finally:
        if owned:
            client.close()
    os.replace(tmp, path)
    return path


def conllu_sentences(lines: Iterable[str]) -> Iterator[Tuple[List[str], List[str]]]:
    """(tokens, tags) per sentence; XPOS when present, UPOS otherwise.

    Multiword-token ranges (1-2) and empty nodes (3.1) are skipped.
    """
    words: List[str] = []
    tags: List[str] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            if words:
                yield words, tags
                words, tags = [], []
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise CorpusError(f"line {lineno}: expected 10 CoNLL-U columns, got {len(cols)}")
        if "-" in cols[0] or "." in cols[0]:
            continue
        words.append(re.sub(r"\s+", "_", cols[1]))
        tags.append(cols[4] if cols[4] != "_" else cols[3])
    if words:
        yield words, tags


def take_tokens(sentences: Iterable[Tuple[List[str], List[str]]], limit: Optional[int]) -> TaggedSentences:
    """Whole sentences, in order, until ``limit`` tokens are reached."""
    kept: TaggedSentences = []
    count = 0
    for words, tags in sentences:
        if limit is not None and count >= limit:
            break
        kept.append((words, tags))
        count += len(words)
    return kept


def convert_conllu(source: str, target: str, limit: Optional[int] = None) -> int:
    with open(source, "r", encoding="utf-8") as f:
        sentences = take_tokens(conllu_sentences(f), limit)
    write_tagged_corpus(target, sentences)
    return sum(len(words) for words, _ in sentences)


def strip_gutenberg(text: str) -> List[str]:
    """Lines between the START and END markers; the whole text when the markers are missing."""
    lines = text.splitlines()
    start = next((n + 1 for n, line in enumerate(lines) if _START.match(line)), 0)
    stop = next((n for n, line in enumerate(lines) if n >= start and _END.match(line)), len(lines))
    return lines[start:stop]


def take_lines(lines: Iterable[str], limit: int) -> List[str]:
    """Non-empty lines, whole, until ``limit`` whitespace tokens are reached."""
    kept, count = [], 0
    for line in lines:
        if count >= limit:
            break
        tokens = line.split()
        if tokens:
            kept.append(" ".join(tokens))
            count += len(tokens)
    return kept


def fetch_pos_corpus(data_dir: str, train_tokens: Optional[int] = POS_TRAIN_TOKENS,
                     client: Optional[httpx.Client] = None) -> FetchedCorpus:
    raw_dir = os.path.join(data_dir, "raw")
    files, tokens = {}, {}
    for split, name in EWT_FILES.items():
        source = download(EWT_BASE_URL + name, os.path.join(raw_dir, name), client)
        target = os.path.join(data_dir, f"ewt-{split}.tsv")
        tokens[split] = convert_conllu(source, target, train_tokens if split == "train" else None)
        files[split] = target
        log.info(f"EWT {split}: {tokens[split]} tokens -> {target}")
    return FetchedCorpus("pos", files, tokens)


def fetch_recite_corpus(data_dir: str, limit: int = RECITE_TOKENS,
                        client: Optional[httpx.Client] = None) -> FetchedCorpus:
    source = download(GUTENBERG_URL, os.path.join(data_dir, "raw", "pg1342.txt"), client)
    with open(source, "r", encoding="utf-8-sig") as f:
        lines = take_lines(strip_gutenberg(f.read()), limit)
    target = os.path.join(data_dir, "recite-50k.txt")
    with open(target, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    count = sum(len(line.split()) for line in lines)
    log.info(f"Gutenberg text: {count} tokens -> {target}")
    return FetchedCorpus("recite", {"train": target}, {"train": count})
