"""Corpus ingestion, char tokenization and the synthetic topic-marker corpus.

Raw text:
    a directory holds one UTF-8 document per file (sorted by name); a single
    file holds records separated by blank lines.

Token binary:
    magic b"RWTK", version u8, then u32 little-endian token ids. Every
    document ends with the sentinel 0xFFFFFFFF.
"""

from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .core.rng import Rng
from .errors import DataFormatError, InputError
from .windowing import word_weights

logger = logging.getLogger(__name__)

TOKEN_MAGIC = b"RWTK"
TOKEN_VERSION = 1
SENTINEL = 0xFFFFFFFF
OOV_ID = 0

_RECORD_SPLIT = re.compile(r"\n(?:[ \t\r\f\v]*\n)+")


class CorpusFormat(str, Enum):
    RAW_TEXT = "raw-text"
    TOKEN_BINARY = "token-binary"


@dataclass
class Document:
    """One document's token ids plus word accounting.

    ``word_weights`` holds the number of words beginning at each token (raw
    text only); documents without it count words as tokens.
    """

    tokens: np.ndarray
    word_count: int
    source_id: str
    word_weights: Optional[np.ndarray] = None
    topic: Optional[int] = None

    def __len__(self) -> int:
        return int(self.tokens.size)


# ============================================================
# Char vocabulary
# ============================================================


class CharVocab:
    """Sorted distinct characters mapped to ids 1..n; id 0 is the OOV id."""

    def __init__(self, chars: Iterable[str]):
        self.chars = sorted(set(chars))
        self._ids = {ch: i + 1 for i, ch in enumerate(self.chars)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "CharVocab":
        seen: set[str] = set()
        for text in texts:
            seen.update(text)
        return cls(seen)

    @property
    def size(self) -> int:
        return len(self.chars) + 1

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(ch, OOV_ID) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(
            self.chars[i - 1] if 1 <= i <= len(self.chars) else "�" for i in ids
        )

    def __len__(self) -> int:
        return self.size


def char_tokenize(text: str, vocab: CharVocab) -> list[int]:
    """Char ids for ``text``; unseen characters map to the OOV id."""
    return vocab.encode(text)


# ============================================================
# Loading
# ============================================================


@dataclass
class Corpus:
    documents: list[Document] = field(default_factory=list)
    vocab: Optional[CharVocab] = None
    texts: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    @property
    def n_tokens(self) -> int:
        return sum(len(d) for d in self.documents)

    def max_token_id(self) -> int:
        return max((int(d.tokens.max()) for d in self.documents if len(d)), default=-1)


def _decode_utf8(blob: bytes, path: Path) -> str:
    try:
        return blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataFormatError(f"malformed UTF-8: {e.reason}", e.start, str(path)) from e


def read_texts(path: Path) -> list[tuple[str, str]]:
    """(source_id, text) records from a raw-text file or directory."""
    path = Path(path)
    if path.is_dir():
        records = []
        files = sorted(p for p in path.iterdir() if p.is_file())
        if not files:
            logger.warning(f"No files in {path}; corpus is empty")
        for file in files:
            text = _decode_utf8(file.read_bytes(), file)
            if not text.split():
                logger.warning(f"Skipping {file.name}: no words")
                continue
            records.append((file.name, text))
        return records

    text = _decode_utf8(path.read_bytes(), path)
    records = []
    for i, chunk in enumerate(_RECORD_SPLIT.split(text)):
        chunk = chunk.strip("\n")
        if chunk.split():
            records.append((f"{path.name}#{i}", chunk))
    if not records:
        logger.warning(f"{path} holds no records; corpus is empty")
    return records


def text_document(source_id: str, text: str, vocab: CharVocab) -> Document:
    tokens = np.asarray(char_tokenize(text, vocab), dtype=np.int64)
    weights = word_weights(text, [(i, i + 1) for i in range(len(text))])
    return Document(
        tokens=tokens,
        word_count=len(text.split()),
        source_id=source_id,
        word_weights=weights,
    )


def load_token_binary(path: Path) -> list[Document]:
    """Documents from a token-binary file.

    Raises:
        DataFormatError: Bad magic/version, a partial id, or a missing final sentinel
    """
    path = Path(path)
    blob = path.read_bytes()
    header = len(TOKEN_MAGIC) + 1
    if blob[:4] != TOKEN_MAGIC:
        raise DataFormatError(f"bad magic {blob[:4]!r}", 0, str(path))
    if len(blob) < header:
        raise DataFormatError("truncated header", len(blob), str(path))
    if blob[4] != TOKEN_VERSION:
        raise DataFormatError(f"unsupported version {blob[4]}", 4, str(path))
    payload = len(blob) - header
    if payload % 4:
        raise DataFormatError("truncated token id", header + payload - payload % 4, str(path))

    ids = np.frombuffer(blob, dtype="<u4", offset=header).astype(np.int64)
    ends = np.flatnonzero(ids == SENTINEL)
    last = int(ends[-1]) + 1 if ends.size else 0
    if last != ids.size:
        raise DataFormatError("final document lacks the boundary sentinel", header + 4 * last, str(path))

    documents = []
    start = 0
    for i, end in enumerate(ends):
        tokens = ids[start:end].copy()
        start = int(end) + 1
        if tokens.size == 0:
            continue
        documents.append(
            Document(tokens=tokens, word_count=int(tokens.size), source_id=f"{path.name}#{i}")
        )
    if documents:
        logger.warning(
            f"{path.name}: token-binary documents carry no text; word counts fall back to token counts"
        )
    return documents


def export_token_binary(path: Path, documents: Sequence[Document]) -> None:
    """Write documents in the token-binary format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [TOKEN_MAGIC, struct.pack("<B", TOKEN_VERSION)]
    for doc in documents:
        tokens = np.asarray(doc.tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= SENTINEL):
            raise InputError(f"{doc.source_id}: token ids must fit below the sentinel")
        chunks.append(tokens.astype("<u4").tobytes())
        chunks.append(struct.pack("<I", SENTINEL))
    path.write_bytes(b"".join(chunks))
    logger.info(f"Wrote {len(documents)} documents to {path}")


def load_corpus(
    path: Path,
    fmt: CorpusFormat | str = CorpusFormat.RAW_TEXT,
    vocab: Optional[CharVocab] = None,
) -> Corpus:
    """Load raw text (char-tokenized) or token-binary documents.

    For raw text, the vocabulary is built from this corpus unless one is given.

    Raises:
        DataFormatError: Malformed UTF-8 or token binary (with byte offset)
        FileNotFoundError: Missing path
    """
    path = Path(path)
    fmt = CorpusFormat(fmt)
    if not path.exists():
        raise FileNotFoundError(f"corpus path {path} does not exist")

    if fmt is CorpusFormat.TOKEN_BINARY:
        corpus = Corpus(documents=load_token_binary(path))
    else:
        records = read_texts(path)
        texts = [text for _, text in records]
        vocab = vocab or CharVocab.build(texts)
        corpus = Corpus(
            documents=[text_document(sid, text, vocab) for sid, text in records],
            vocab=vocab,
            texts=texts,
        )
    logger.info(f"Loaded {len(corpus)} documents ({corpus.n_tokens} tokens) from {path}")
    return corpus


# ============================================================
# Synthetic topic-marker corpus
# ============================================================


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class SyntheticSpec:
    """Topic-marker corpus.

    Each document draws a topic uniformly, emits that topic's marker token at
    position 1 and then ``doc_length`` tokens i.i.d. from the topic's unigram
    distribution over content ids 0..Vc-1. Marker ids are Vc + topic.
    """

    topic_distributions: np.ndarray
    doc_length: int
    seed: int
    n_docs: int = 16

    def __post_init__(self):
        self.topic_distributions = np.asarray(self.topic_distributions, dtype=np.float64)
        dist = self.topic_distributions
        if dist.ndim != 2 or dist.shape[0] < 1 or dist.shape[1] < 1:
            raise InputError(f"topic distributions must be n_topics × Vc, got {dist.shape}")
        if np.any(dist < 0) or not np.allclose(dist.sum(axis=1), 1.0, atol=1e-9):
            raise InputError("every topic distribution must be non-negative and sum to 1")
        if self.doc_length < 1 or self.n_docs < 1:
            raise InputError("doc_length and n_docs must be >= 1")
        if self.n_topics == 1:
            logger.warning("n_topics=1: the corpus is i.i.d. and the carry has nothing to recover")

    @property
    def n_topics(self) -> int:
        return self.topic_distributions.shape[0]

    @property
    def content_vocab(self) -> int:
        return self.topic_distributions.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.content_vocab + self.n_topics

    def marker_id(self, topic: int) -> int:
        return self.content_vocab + topic

    @classmethod
    def dirichlet(
        cls,
        n_topics: int,
        content_vocab: int,
        doc_length: int,
        seed: int,
        *,
        concentration: float = 0.1,
        n_docs: int = 16,
    ) -> "SyntheticSpec":
        """Topic distributions drawn from a symmetric Dirichlet (small = peaked)."""
        gen = Rng(seed).stream("synthetic.topics")
        dist = gen.dirichlet(np.full(content_vocab, concentration), size=n_topics)
        return cls(topic_distributions=dist, doc_length=doc_length, seed=seed, n_docs=n_docs)

    def conditional_entropy(self) -> float:
        """Mean per-token entropy (nats) when the topic is known."""
        return float(np.mean([_entropy(p) for p in self.topic_distributions]))

    def marginal_entropy(self) -> float:
        """Per-token entropy (nats) of the topic mixture."""
        return _entropy(self.topic_distributions.mean(axis=0))

    def analytic_perplexities(self) -> tuple[float, float]:
        """(optimal ppl with topic known, optimal ppl without it) for content tokens."""
        return math.exp(self.conditional_entropy()), math.exp(self.marginal_entropy())

    def to_dict(self) -> dict:
        return {
            "doc_length": self.doc_length,
            "seed": self.seed,
            "n_docs": self.n_docs,
            "topic_distributions": self.topic_distributions.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        return cls(
            topic_distributions=np.asarray(data["topic_distributions"]),
            doc_length=int(data["doc_length"]),
            seed=int(data["seed"]),
            n_docs=int(data.get("n_docs", 16)),
        )


def gen_synthetic(spec: SyntheticSpec, split: str = "train") -> list[Document]:
    """Generate ``spec.n_docs`` documents; each split draws from its own stream."""
    rng = Rng(spec.seed)
    documents = []
    for i in range(spec.n_docs):
        gen = rng.stream(f"synthetic.{split}", i)
        topic = int(gen.integers(spec.n_topics))
        body = gen.choice(spec.content_vocab, size=spec.doc_length, p=spec.topic_distributions[topic])
        tokens = np.concatenate([[spec.marker_id(topic)], body]).astype(np.int64)
        documents.append(
            Document(
                tokens=tokens,
                word_count=int(tokens.size),
                source_id=f"synthetic-{split}-{i:05d}",
                topic=topic,
            )
        )
    logger.debug(f"Generated {len(documents)} synthetic {split} documents")
    return documents
