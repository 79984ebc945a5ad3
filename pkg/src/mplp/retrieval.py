"""Similar-utterance retrieval: Okapi BM25 over training texts, or cosine over cached vectors."""

from __future__ import annotations

import io
import json
import math
import struct
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .corpus import tokenize
from .numerics import ContractError

if TYPE_CHECKING:
    from .prompts import RepresentationCache

INDEX_MAGIC = b"MPLPBM25"
INDEX_VERSION = 1


@dataclass(frozen=True)
class SimilarSample:
    utterance_id: str
    score: float
    vector: np.ndarray | None
    label: str | None


class SimilarSampleSet(list):
    """Retrieved neighbours, best first."""

    @property
    def ids(self) -> list[str]:
        return [s.utterance_id for s in self]

    @property
    def scores(self) -> list[float]:
        return [s.score for s in self]

    def matrix(self) -> np.ndarray:
        return np.stack([s.vector for s in self])


class BM25Index:
    """Inverted index with per-term postings ``(doc ids, term frequencies)``.

    Document ids are positions in the sorted list of utterance ids, so the
    index does not depend on the order documents were supplied in.
    """

    def __init__(
        self,
        doc_ids: list[str],
        doc_lens: np.ndarray,
        postings: dict[str, tuple[np.ndarray, np.ndarray]],
        k1: float = 1.5,
        b: float = 0.75,
        labels: Sequence[str | None] | None = None,
    ):
        self.doc_ids = doc_ids
        self.doc_lens = np.asarray(doc_lens, dtype=np.float64)
        self.postings = postings
        self.k1 = k1
        self.b = b
        self.labels = list(labels) if labels is not None else [None] * len(doc_ids)
        self.n_docs = len(doc_ids)
        self.avg_len = float(self.doc_lens.mean())
        self.position = {uid: i for i, uid in enumerate(doc_ids)}
        self._norm = k1 * (1.0 - b + b * self.doc_lens / self.avg_len)

    @classmethod
    def build(
        cls,
        documents: Iterable[tuple[str, Sequence[str]]],
        k1: float = 1.5,
        b: float = 0.75,
        labels: dict[str, str] | None = None,
    ) -> BM25Index:
        """Index ``(utterance_id, tokens)`` pairs."""
        docs = sorted(documents, key=lambda d: d[0])
        if not docs:
            raise ContractError("cannot build an index over an empty corpus")
        ids = [d[0] for d in docs]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate utterance ids in index input")
        lens = np.array([len(d[1]) for d in docs], dtype=np.float64)
        raw: dict[str, tuple[list[int], list[int]]] = {}
        for doc, (_, tokens) in enumerate(docs):
            for term, tf in sorted(Counter(tokens).items()):
                entry = raw.setdefault(term, ([], []))
                entry[0].append(doc)
                entry[1].append(tf)
        postings = {t: (np.array(d, dtype=np.int64), np.array(f, dtype=np.float64)) for t, (d, f) in raw.items()}
        lab = [labels.get(uid) for uid in ids] if labels is not None else None
        return cls(ids, lens, postings, k1, b, lab)

    def df(self, term: str) -> int:
        entry = self.postings.get(term)
        return 0 if entry is None else len(entry[0])

    def tf(self, term: str, doc: int) -> int:
        entry = self.postings.get(term)
        if entry is None:
            return 0
        i = np.searchsorted(entry[0], doc)
        return int(entry[1][i]) if i < len(entry[0]) and entry[0][i] == doc else 0

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def score(self, query: Sequence[str], doc: int) -> float:
        """BM25 of one document; every query token occurrence contributes."""
        if not 0 <= doc < self.n_docs:
            raise IndexError(f"document {doc} out of range")
        total = 0.0
        for term in query:
            tf = self.tf(term, doc)
            if tf:
                total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + self._norm[doc])
        return total

    def score_all(self, query: Sequence[str]) -> np.ndarray:
        scores = np.zeros(self.n_docs)
        for term, qtf in Counter(query).items():
            entry = self.postings.get(term)
            if entry is None:
                continue
            docs, tfs = entry
            scores[docs] += qtf * self.idf(term) * tfs * (self.k1 + 1.0) / (tfs + self._norm[docs])
        return scores

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        terms = sorted(self.postings)
        offsets = np.cumsum([0] + [len(self.postings[t][0]) for t in terms]).astype(np.int64)
        header = {
            "k1": self.k1,
            "b": self.b,
            "doc_ids": self.doc_ids,
            "labels": self.labels,
            "terms": terms,
        }
        buf = io.BytesIO()
        np.savez(
            buf,
            doc_lens=self.doc_lens,
            offsets=offsets,
            docs=np.concatenate([self.postings[t][0] for t in terms]) if terms else np.zeros(0, np.int64),
            tfs=np.concatenate([self.postings[t][1] for t in terms]) if terms else np.zeros(0),
        )
        head = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<II", INDEX_VERSION, len(head)))
            fh.write(head)
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> BM25Index:
        with open(path, "rb") as fh:
            if fh.read(len(INDEX_MAGIC)) != INDEX_MAGIC:
                raise ContractError(f"{path}: not a BM25 index file")
            version, n = struct.unpack("<II", fh.read(8))
            if version != INDEX_VERSION:
                raise ContractError(f"{path}: unsupported index version {version}")
            header = json.loads(fh.read(n).decode("utf-8"))
            with np.load(io.BytesIO(fh.read())) as z:
                lens, offsets, docs, tfs = z["doc_lens"], z["offsets"], z["docs"], z["tfs"]
        postings = {
            t: (docs[offsets[i] : offsets[i + 1]].copy(), tfs[offsets[i] : offsets[i + 1]].copy())
            for i, t in enumerate(header["terms"])
        }
        return cls(header["doc_ids"], lens, postings, header["k1"], header["b"], header["labels"])


def _select(scores: np.ndarray, k: int, excluded: np.ndarray) -> np.ndarray:
    """Indices of the k best scores, ties to the smaller index, skipping excluded."""
    allowed = np.flatnonzero(~excluded)
    if k < 1 or k > len(allowed):
        raise ContractError(f"k={k} but only {len(allowed)} candidates remain after exclusions")
    cand = scores[allowed]
    # everything tied with the k-th best survives the cut, so ties still go to the smaller index
    if len(cand) > 4 * k:
        kth = np.partition(cand, len(cand) - k)[len(cand) - k]
        keep = cand >= kth
        allowed, cand = allowed[keep], cand[keep]
    # lexsort: last key is primary
    order = np.lexsort((allowed, -cand))
    return allowed[order[:k]]


def _exclusion_mask(doc_ids: Sequence[str], position: dict[str, int], exclusions: Iterable[str]) -> np.ndarray:
    excluded = np.zeros(len(doc_ids), dtype=bool)
    for uid in exclusions:
        pos = position.get(uid)
        if pos is not None:
            excluded[pos] = True
    return excluded


def top_k_similar(
    index: BM25Index,
    query: str | Sequence[str],
    k: int,
    exclusions: Iterable[str] = (),
    cache: RepresentationCache | None = None,
    query_id: str | None = None,
) -> SimilarSampleSet:
    """The k highest-BM25 training utterances other than the query and ``exclusions``."""
    tokens = tokenize(query) if isinstance(query, str) else list(query)
    excl = set(exclusions)
    if query_id is not None:
        excl.add(query_id)
    scores = index.score_all(tokens)
    picked = _select(scores, k, _exclusion_mask(index.doc_ids, index.position, excl))
    out = SimilarSampleSet()
    for i in picked:
        uid = index.doc_ids[i]
        out.append(SimilarSample(uid, float(scores[i]), cache.vector(uid) if cache is not None else None, index.labels[i]))
    return out


class CosineIndex:
    """Cosine similarity over a fixed matrix of cached vectors."""

    def __init__(self, doc_ids: Sequence[str], vectors: np.ndarray, labels: Sequence[str | None] | None = None):
        order = np.argsort(np.asarray(doc_ids, dtype=object), kind="stable")
        self.doc_ids = [doc_ids[i] for i in order]
        self.vectors = np.asarray(vectors, dtype=np.float64)[order]
        self.labels = [labels[i] for i in order] if labels is not None else [None] * len(order)
        if not self.doc_ids:
            raise ContractError("cannot build an index over an empty corpus")
        norms = np.linalg.norm(self.vectors, axis=1)
        self._unit = self.vectors / np.where(norms > 0, norms, 1.0)[:, None]
        self.position = {uid: i for i, uid in enumerate(self.doc_ids)}

    def score_all(self, query_vector: np.ndarray) -> np.ndarray:
        q = np.asarray(query_vector, dtype=np.float64)
        n = np.linalg.norm(q)
        return self._unit @ (q / n if n > 0 else q)


def cosine_similar(
    index: CosineIndex,
    query_vector: np.ndarray,
    k: int,
    exclusions: Iterable[str] = (),
    query_id: str | None = None,
) -> SimilarSampleSet:
    excl = set(exclusions)
    if query_id is not None:
        excl.add(query_id)
    scores = index.score_all(query_vector)
    picked = _select(scores, k, _exclusion_mask(index.doc_ids, index.position, excl))
    return SimilarSampleSet(
        SimilarSample(index.doc_ids[i], float(scores[i]), index.vectors[i], index.labels[i]) for i in picked
    )
