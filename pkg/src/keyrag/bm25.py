"""Okapi BM25 sparse retrieval: tokenizer, inverted index, top-k search, persistence."""
from __future__ import annotations

import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

MAGIC = b"ITKIDX1"
VERSION = 1

# Maximal runs of alphanumeric characters (unicode-aware, underscore excluded).
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class IndexFormatError(ValueError):
    """Index file is corrupt, truncated, or has a bad magic/version header."""


def tokenize(text: str, stopwords: frozenset[str] = frozenset()) -> list[str]:
    """Lowercased alphanumeric tokens, split on everything else, stopwords dropped."""
    tokens = [m.group().lower() for m in _TOKEN_RE.finditer(text)]
    if stopwords:
        return [t for t in tokens if t not in stopwords]
    return tokens


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character [start, end) spans of each token, in original-text coordinates."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.5
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError(f"k1 must be nonnegative, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


@dataclass(frozen=True)
class ScoredDoc:
    chunk_id: str
    score: float


@dataclass
class Index:
    """Immutable after build/load; safe for concurrent readers.

    postings map each term to (chunk_ref, tf) pairs sorted by chunk_ref; chunk_ref
    indexes into chunk_ids / chunk_texts / doc_len.
    """

    postings: dict[str, list[tuple[int, int]]]
    doc_len: list[int]
    avg_doc_len: float
    n_docs: int
    chunk_ids: list[str]
    chunk_texts: list[str]
    params: Bm25Params
    stopwords: frozenset[str] = frozenset()
    _by_id: dict[str, int] | None = field(default=None, repr=False, compare=False)

    def ref_of(self, chunk_id: str) -> int:
        if self._by_id is None:
            self._by_id = {cid: i for i, cid in enumerate(self.chunk_ids)}
        return self._by_id[chunk_id]

    def text_of(self, chunk_id: str) -> str:
        return self.chunk_texts[self.ref_of(chunk_id)]

    @property
    def vocab_size(self) -> int:
        return len(self.postings)


def build_index(
    chunks: Iterable,
    params: Bm25Params | None = None,
    stopwords: frozenset[str] = frozenset(),
) -> Index:
    """Build an inverted index from chunks (anything with .chunk_id and .text)."""
    params = params or Bm25Params()
    stopwords = frozenset(stopwords)
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_len: list[int] = []
    chunk_ids: list[str] = []
    chunk_texts: list[str] = []
    seen: set[str] = set()

    for chunk in chunks:
        if chunk.chunk_id in seen:
            raise ValueError(f"duplicate chunk_id {chunk.chunk_id!r}")
        seen.add(chunk.chunk_id)
        ref = len(chunk_ids)
        chunk_ids.append(chunk.chunk_id)
        chunk_texts.append(chunk.text)
        tokens = tokenize(chunk.text, stopwords)
        doc_len.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((ref, tf))

    if not chunk_ids:
        raise ValueError("empty corpus")

    avg_doc_len = sum(doc_len) / len(doc_len)
    return Index(
        postings=postings,
        doc_len=doc_len,
        avg_doc_len=avg_doc_len,
        n_docs=len(chunk_ids),
        chunk_ids=chunk_ids,
        chunk_texts=chunk_texts,
        params=params,
        stopwords=stopwords,
    )


def idf(term: str, index: Index) -> float:
    """Smoothed inverse document frequency; strictly positive for any df in [0, N]."""
    df = len(index.postings.get(term, ()))
    return math.log((index.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def _norm(index: Index, ref: int) -> float:
    b = index.params.b
    rel_len = index.doc_len[ref] / index.avg_doc_len if index.avg_doc_len > 0 else 0.0
    return 1.0 - b + b * rel_len


def score(query_tokens: list[str], chunk_ref: int, index: Index) -> float:
    """BM25 score of one chunk against a token list (query multiplicity counts)."""
    if not 0 <= chunk_ref < index.n_docs:
        raise IndexError(f"chunk_ref {chunk_ref} out of range for {index.n_docs} chunks")
    k1 = index.params.k1
    total = 0.0
    for tok in query_tokens:
        tf = _tf_in(index.postings.get(tok, ()), chunk_ref)
        if tf == 0:
            continue
        total += idf(tok, index) * tf * (k1 + 1.0) / (tf + k1 * _norm(index, chunk_ref))
    return total


def _tf_in(plist, chunk_ref: int) -> int:
    lo, hi = 0, len(plist)
    while lo < hi:
        mid = (lo + hi) // 2
        if plist[mid][0] < chunk_ref:
            lo = mid + 1
        else:
            hi = mid
    if lo < len(plist) and plist[lo][0] == chunk_ref:
        return plist[lo][1]
    return 0


def retrieve_top_k(index: Index, query: str, k: int) -> list[ScoredDoc]:
    """Exact top-k by BM25 score; zero-scoring chunks are never returned.

    Ties break by ascending chunk_ref, so results are deterministic for a
    given index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    tokens = tokenize(query, index.stopwords)
    if not tokens:
        return []
    k1 = index.params.k1
    acc: dict[int, float] = {}
    idf_cache: dict[str, float] = {}
    for tok in tokens:
        plist = index.postings.get(tok)
        if not plist:
            continue
        w = idf_cache.get(tok)
        if w is None:
            w = idf(tok, index)
            idf_cache[tok] = w
        for ref, tf in plist:
            acc[ref] = acc.get(ref, 0.0) + w * tf * (k1 + 1.0) / (tf + k1 * _norm(index, ref))
    ranked = sorted((ref for ref, s in acc.items() if s > 0.0), key=lambda r: (-acc[r], r))
    return [ScoredDoc(index.chunk_ids[r], acc[r]) for r in ranked[:k]]


# ---------------------------------------------------------------------------
# Persistence: single-file binary layout.
#
#   MAGIC (7 bytes) | version (u8)
#   k1, b (f64 le)
#   n_docs (u32)
#   n_stopwords (u32), then each word as u32-length-prefixed utf-8
#   chunk table: per chunk, id (str), text (str), doc_len (u32)
#   n_terms (u32), then per term: term (str), df (u32),
#       df x (chunk_ref delta u32, tf u32)
#
# Terms and stopwords are written sorted so identical indexes serialize
# identically.
# ---------------------------------------------------------------------------


def _w_str(f: BinaryIO, s: str) -> None:
    data = s.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IndexFormatError("truncated index file")
    return data


def _r_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def _r_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def save_index(index: Index, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<dd", index.params.k1, index.params.b))
        f.write(struct.pack("<I", index.n_docs))
        f.write(struct.pack("<I", len(index.stopwords)))
        for word in sorted(index.stopwords):
            _w_str(f, word)
        for ref in range(index.n_docs):
            _w_str(f, index.chunk_ids[ref])
            _w_str(f, index.chunk_texts[ref])
            f.write(struct.pack("<I", index.doc_len[ref]))
        f.write(struct.pack("<I", len(index.postings)))
        for term in sorted(index.postings):
            plist = index.postings[term]
            _w_str(f, term)
            f.write(struct.pack("<I", len(plist)))
            prev = 0
            for ref, tf in plist:
                f.write(struct.pack("<II", ref - prev, tf))
                prev = ref


def load_index(path) -> Index:
    with open(path, "rb") as f:
        header = f.read(len(MAGIC) + 1)
        if len(header) < len(MAGIC) + 1 or header[: len(MAGIC)] != MAGIC:
            raise IndexFormatError("bad magic: not a recognized index file")
        version = header[len(MAGIC)]
        if version != VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        k1, b = struct.unpack("<dd", _read_exact(f, 16))
        n_docs = _r_u32(f)
        stopwords = frozenset(_r_str(f) for _ in range(_r_u32(f)))
        chunk_ids: list[str] = []
        chunk_texts: list[str] = []
        doc_len: list[int] = []
        for _ in range(n_docs):
            chunk_ids.append(_r_str(f))
            chunk_texts.append(_r_str(f))
            doc_len.append(_r_u32(f))
        postings: dict[str, list[tuple[int, int]]] = {}
        for _ in range(_r_u32(f)):
            term = _r_str(f)
            df = _r_u32(f)
            plist: list[tuple[int, int]] = []
            ref = 0
            for _ in range(df):
                delta, tf = struct.unpack("<II", _read_exact(f, 8))
                ref += delta
                plist.append((ref, tf))
            postings[term] = plist
        if f.read(1):
            raise IndexFormatError("trailing data after index payload")

    if n_docs == 0:
        raise IndexFormatError("index contains no chunks")
    avg_doc_len = sum(doc_len) / len(doc_len)
    return Index(
        postings=postings,
        doc_len=doc_len,
        avg_doc_len=avg_doc_len,
        n_docs=n_docs,
        chunk_ids=chunk_ids,
        chunk_texts=chunk_texts,
        params=Bm25Params(k1=k1, b=b),
        stopwords=stopwords,
    )
