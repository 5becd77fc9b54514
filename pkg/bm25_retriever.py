"""
Okapi BM25 inverted-index retriever over the product corpus, used to mine
hard negatives for generated relevant queries.

Index file layout (little-endian):
    b'QGFIDX1' | k1 f64 | b f64 | n_fields u32 | fields (u32 len + utf-8)
    | n_docs u32 | docs (u32 len + utf-8 product_id, u32 length)
    | n_terms u32 | terms (u32 len + utf-8, u32 n_postings, (u32 ordinal, u32 tf) * n)
"""

import heapq
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from models import Corpus, IndexFormatError, PreconditionError, SyntheticDataset

logger = logging.getLogger(__name__)

INDEX_MAGIC = b'QGFIDX1'
DEFAULT_FIELDS = ('title', 'description')
HARD_NEGATIVES_K = 35

_TOKEN_RE = re.compile(r'[^\W_]+')


def tokenize(text: str) -> List[str]:
    """Lowercased alphanumeric runs; no stemming, no stopwords"""
    return _TOKEN_RE.findall((text or '').lower())


def unique_terms(text: str) -> List[str]:
    seen: Dict[str, None] = {}
    for token in tokenize(text):
        seen.setdefault(token, None)
    return list(seen)


@dataclass(frozen=True)
class HardNegativeSet:
    query_text: str
    positive: str
    negatives: Tuple[str, ...]

    def to_dict(self) -> Dict:
        return {'query': self.query_text, 'positive': self.positive, 'negatives': list(self.negatives)}

    @classmethod
    def from_dict(cls, data: Dict) -> 'HardNegativeSet':
        return cls(data['query'], data['positive'], tuple(data['negatives']))


@dataclass
class Bm25Index:
    postings: Dict[str, List[Tuple[int, int]]]
    doc_lengths: List[int]
    product_ids: List[str]
    k1: float = 1.2
    b: float = 0.75
    indexed_fields: Tuple[str, ...] = DEFAULT_FIELDS
    avg_doc_length: float = field(init=False)
    ordinals: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.k1 <= 0 or not (0.0 <= self.b <= 1.0):
            raise PreconditionError(f"BM25 needs k1 > 0 and 0 <= b <= 1, got k1={self.k1}, b={self.b}")
        self.indexed_fields = tuple(self.indexed_fields)
        n = len(self.doc_lengths)
        self.avg_doc_length = (sum(self.doc_lengths) / n) if n else 0.0
        self.ordinals = {pid: i for i, pid in enumerate(self.product_ids)}

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return max(0.0, math.log(1.0 + (n - df + 0.5) / (df + 0.5)))

    def _length_norm(self, ordinal: int) -> float:
        ratio = self.doc_lengths[ordinal] / self.avg_doc_length if self.avg_doc_length else 0.0
        return 1.0 - self.b + self.b * ratio

    def _contribution(self, idf: float, tf: int, ordinal: int) -> float:
        return idf * (tf * (self.k1 + 1.0)) / (tf + self.k1 * self._length_norm(ordinal))

    def retrieve(self, query_text: str, k: int = HARD_NEGATIVES_K, exclude: Optional[str] = None) -> List[str]:
        return retrieve_topk(self, query_text, k, exclude)


def build_index(corpus: Corpus, fields: Sequence[str] = DEFAULT_FIELDS, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    """Index the chosen product fields; ordinals follow sorted product_id"""
    if corpus.is_empty():
        raise PreconditionError("Cannot build an index over an empty corpus")
    products = sorted(corpus.product_map.values(), key=lambda p: p.product_id)
    postings: Dict[str, List[Tuple[int, int]]] = {}
    doc_lengths: List[int] = []
    for ordinal, product in enumerate(products):
        tokens: List[str] = []
        for name in fields:
            tokens.extend(tokenize(product.field_text(name)))
        doc_lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((ordinal, tf))
    index = Bm25Index(postings, doc_lengths, [p.product_id for p in products], k1, b, tuple(fields))
    logger.info(f"Built BM25 index: {index.doc_count} docs, {len(postings)} terms")
    return index


def bm25_score(index: Bm25Index, query_text: str, product_id: str) -> float:
    """Okapi BM25 of one product for the distinct query terms"""
    ordinal = index.ordinals.get(product_id)
    if ordinal is None:
        raise PreconditionError(f"Product {product_id} is not in the index")
    score = 0.0
    for term in unique_terms(query_text):
        for doc, tf in index.postings.get(term, ()):
            if doc == ordinal:
                score += index._contribution(index.idf(term), tf, ordinal)
                break
    return score


def retrieve_topk(index: Bm25Index, query_text: str, k: int = HARD_NEGATIVES_K,
                  exclude: Optional[str] = None) -> List[str]:
    """Top-k product ids by BM25, score descending, ties by product_id.

    When fewer than k documents match, the remaining slots are filled with
    non-matching documents in product_id order. Zero-length documents are
    never returned.
    """
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    scores: Dict[int, float] = {}
    for term in unique_terms(query_text):
        entries = index.postings.get(term)
        if not entries:
            continue
        idf = index.idf(term)
        for ordinal, tf in entries:
            scores[ordinal] = scores.get(ordinal, 0.0) + index._contribution(idf, tf, ordinal)

    excluded = index.ordinals.get(exclude) if exclude is not None else None
    candidates = ((-s, ordinal) for ordinal, s in scores.items() if s > 0.0 and ordinal != excluded)
    # ordinals follow sorted product_id, so ordinal order is the id tie-break
    ranked = [ordinal for _, ordinal in heapq.nsmallest(k, candidates)]
    if len(ranked) < k:
        taken = set(ranked)
        for ordinal in range(index.doc_count):
            if len(ranked) == k:
                break
            if ordinal in taken or ordinal == excluded or not index.doc_lengths[ordinal]:
                continue
            ranked.append(ordinal)
    return [index.product_ids[ordinal] for ordinal in ranked]


def mine_hard_negatives(retriever, ds: SyntheticDataset, k: int = HARD_NEGATIVES_K) -> Tuple[List[HardNegativeSet], Dict]:
    """One negative set per top-label record; the record's product is the positive"""
    sets: List[HardNegativeSet] = []
    empty = 0
    top = ds.space.top_label
    for record in ds.records:
        if record.final_label != top:
            continue
        negatives = [pid for pid in retriever.retrieve(record.query_text, k, record.product_id)
                     if pid != record.product_id]
        negatives = list(dict.fromkeys(negatives))[:k]
        if not negatives:
            empty += 1
        sets.append(HardNegativeSet(record.query_text, record.product_id, tuple(negatives)))
    report = {'queries': len(sets), 'empty_retrievals': empty, 'k': k}
    if empty:
        logger.warning(f"⚠️ {empty} of {len(sets)} queries retrieved no negatives")
    return sets, report


def _pack_text(text: str) -> bytes:
    raw = text.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def save_index(index: Bm25Index, path) -> None:
    parts = [INDEX_MAGIC, struct.pack('<dd', index.k1, index.b), struct.pack('<I', len(index.indexed_fields))]
    parts.extend(_pack_text(name) for name in index.indexed_fields)
    parts.append(struct.pack('<I', index.doc_count))
    for pid, length in zip(index.product_ids, index.doc_lengths):
        parts.append(_pack_text(pid))
        parts.append(struct.pack('<I', length))
    parts.append(struct.pack('<I', len(index.postings)))
    for term in sorted(index.postings):
        entries = index.postings[term]
        parts.append(_pack_text(term))
        parts.append(struct.pack('<I', len(entries)))
        parts.append(b''.join(struct.pack('<II', ordinal, tf) for ordinal, tf in entries))
    with open(path, 'wb') as f:
        f.write(b''.join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise IndexFormatError("Index file is truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def text(self) -> str:
        (length,) = self.take('<I')
        if self.pos + length > len(self.data):
            raise IndexFormatError("Index file is truncated")
        raw = self.data[self.pos:self.pos + length]
        self.pos += length
        return raw.decode('utf-8')


def load_index(path) -> Bm25Index:
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(INDEX_MAGIC):
        raise IndexFormatError(f"{path} is not a QGFIDX1 index file")
    reader = _Reader(data)
    reader.pos = len(INDEX_MAGIC)
    k1, b = reader.take('<dd')
    (n_fields,) = reader.take('<I')
    fields = tuple(reader.text() for _ in range(n_fields))
    (n_docs,) = reader.take('<I')
    product_ids, doc_lengths = [], []
    for _ in range(n_docs):
        product_ids.append(reader.text())
        doc_lengths.append(reader.take('<I')[0])
    (n_terms,) = reader.take('<I')
    postings = {}
    for _ in range(n_terms):
        term = reader.text()
        (n_entries,) = reader.take('<I')
        postings[term] = [reader.take('<II') for _ in range(n_entries)]
    if reader.pos != len(data):
        raise IndexFormatError(f"{path} has trailing bytes")
    return Bm25Index(postings, doc_lengths, product_ids, k1, b, fields)
