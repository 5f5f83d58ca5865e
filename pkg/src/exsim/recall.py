"""Candidate recall: lexical BM25 channel, embedding channel, merge, dedup.

Two complementary retrieval channels run per query. The lexical channel is
an inverted-index BM25 (k1=1.2, b=0.75) over the normalized stem+options
text with an additive bonus per shared knowledge concept; it only retrieves
documents sharing at least one text token with the query. The embedding
channel scans unit-norm encoder embeddings by cosine (an optional graph
index approximates the scan when the bank grows).

Channel results merge by a set rule: candidates found by both channels come
first (ordered by embedding score), then the remaining slots split between
the channel-only lists, the lexical side receiving the extra slot on odd
remainders, backfilling from the other side when one list runs short.
Finally, candidates the duplicate classifier flags against the query are
dropped so near-identical exercises are never recommended.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Corpus, Exercise
from .encoder import EncoderParams, embed_corpus, embed_text
from .pairclf import PairClassifier, PairFeaturizer, UntrainedModelError
from .snapshots import SnapshotFormatError, load_arrays, save_arrays
from .textnorm import Vocab, normalize_text, split_tokens, tokenize

BM25_K1 = 1.2
BM25_B = 0.75

SOURCE_EXACT = "exact"
SOURCE_EMBED = "embed"
SOURCE_BOTH = "both"


@dataclass(frozen=True)
class Candidate:
    ex_id: str
    score: float
    source: str


@dataclass
class RecallConfig:
    k_exact: int = 200
    k_embed: int = 200
    n: int = 100
    dedup_threshold: float = 0.5
    concept_boost: float = 0.5


# ---------------------------------------------------------------------------
# Lexical channel

class LexicalIndex:
    """Inverted index with BM25 scoring and a concept-overlap bonus.

    Scoring stays in plain Python floats accumulated in sorted-token order,
    so an independent per-document loop reproduces the scores bit for bit.
    """

    def __init__(self, ids: list[str], token_lists: list[list[str]],
                 concept_sets: list[frozenset[str]], concept_boost: float = 0.5):
        self.ids = ids
        self.row_of = {ex_id: i for i, ex_id in enumerate(ids)}
        self.doc_lens = [len(t) for t in token_lists]
        self.avg_len = (sum(self.doc_lens) / len(self.doc_lens)) if ids else 0.0
        self.concepts = concept_sets
        self.concept_boost = concept_boost
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for row, tokens in enumerate(token_lists):
            counts: dict[str, int] = {}
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
            for t, tf in counts.items():
                self.postings.setdefault(t, []).append((row, tf))

    @classmethod
    def build(cls, corpus: Corpus, stop_words: Iterable[str] = (),
              concept_boost: float = 0.5) -> "LexicalIndex":
        token_lists = [split_tokens(normalize_text(ex.text, stop_words)[0])
                       for ex in corpus]
        concept_sets = [frozenset(ex.metadata.knowledge_concepts) for ex in corpus]
        return cls(corpus.ids, token_lists, concept_sets, concept_boost)

    def idf(self, token: str) -> float:
        df = len(self.postings.get(token, ()))
        return math.log(1.0 + (len(self.ids) - df + 0.5) / (df + 0.5))

    def score_all(self, query_tokens: Sequence[str],
                  query_concepts: frozenset[str]) -> dict[int, float]:
        """BM25 over documents sharing a token, plus the concept bonus."""
        counts: dict[str, int] = {}
        for t in query_tokens:
            counts[t] = counts.get(t, 0) + 1
        scores: dict[int, float] = {}
        for t in sorted(counts):
            plist = self.postings.get(t)
            if not plist:
                continue
            idf = self.idf(t)
            qtf = counts[t]
            for row, tf in plist:
                norm = self.doc_lens[row] / self.avg_len
                contrib = qtf * idf * tf * (BM25_K1 + 1.0) / (
                    tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
                scores[row] = scores.get(row, 0.0) + contrib
        if query_concepts and self.concept_boost:
            for row in scores:
                shared = len(query_concepts & self.concepts[row])
                if shared:
                    scores[row] = scores[row] + self.concept_boost * shared
        return scores

    def search(self, query_tokens: Sequence[str], query_concepts: frozenset[str],
               k: int, exclude_id: Optional[str] = None) -> list[Candidate]:
        scores = self.score_all(query_tokens, query_concepts)
        exclude_row = self.row_of.get(exclude_id, -1)
        ranked = sorted(((row, s) for row, s in scores.items() if row != exclude_row),
                        key=lambda rs: (-rs[1], self.ids[rs[0]]))
        return [Candidate(self.ids[row], s, SOURCE_EXACT) for row, s in ranked[:k]]

    def save(self, path) -> None:
        payload = {
            "kind": "lexical_index",
            "version": 1,
            "ids": self.ids,
            "doc_lens": self.doc_lens,
            "avg_len": self.avg_len,
            "concept_boost": self.concept_boost,
            "concepts": [sorted(c) for c in self.concepts],
            "postings": {t: p for t, p in self.postings.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "LexicalIndex":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("kind") != "lexical_index":
            raise SnapshotFormatError(f"{path}: not a lexical index snapshot")
        idx = cls.__new__(cls)
        idx.ids = payload["ids"]
        idx.row_of = {ex_id: i for i, ex_id in enumerate(idx.ids)}
        idx.doc_lens = payload["doc_lens"]
        idx.avg_len = payload["avg_len"]
        idx.concept_boost = payload["concept_boost"]
        idx.concepts = [frozenset(c) for c in payload["concepts"]]
        idx.postings = {t: [(int(r), int(tf)) for r, tf in p]
                        for t, p in payload["postings"].items()}
        return idx


# ---------------------------------------------------------------------------
# Embedding channel

class VectorIndex:
    """Unit-norm embedding matrix scanned by cosine; optional graph search."""

    def __init__(self, matrix: np.ndarray, ids: list[str]):
        if matrix.ndim != 2 or len(ids) != matrix.shape[0]:
            raise ValueError("matrix rows must align with ids")
        norms = np.linalg.norm(matrix, axis=1)
        if len(ids) and not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("vector index rows must be unit-norm")
        self.matrix = matrix
        self.ids = ids
        self.row_of = {ex_id: i for i, ex_id in enumerate(ids)}
        self._graph: Optional[list[list[int]]] = None

    @classmethod
    def build(cls, corpus: Corpus, vocab: Vocab, params: EncoderParams,
              stop_words: Iterable[str] = ()) -> "VectorIndex":
        matrix, ids = embed_corpus(corpus, vocab, params, stop_words)
        return cls(matrix, ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def search(self, query: np.ndarray, k: int,
               exclude_id: Optional[str] = None,
               approximate: bool = False) -> list[Candidate]:
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ValueError(f"query must have dimension {self.dim}")
        if approximate and self._graph is not None:
            rows = self._graph_search(query, max(k + 1, 32))
            sims = {row: float(self.matrix[row] @ query) for row in rows}
            items = sims.items()
        else:
            scores = self.matrix @ query
            items = enumerate(scores.tolist())
        exclude_row = self.row_of.get(exclude_id, -1)
        ranked = sorted(((row, s) for row, s in items if row != exclude_row),
                        key=lambda rs: (-rs[1], self.ids[rs[0]]))
        return [Candidate(self.ids[row], s, SOURCE_EMBED) for row, s in ranked[:k]]

    # -- optional approximate search over a nearest-neighbor graph ----------

    def build_graph(self, n_links: int = 8) -> None:
        """Connect each row to its nearest neighbors for greedy beam search."""
        sims = self.matrix @ self.matrix.T
        np.fill_diagonal(sims, -np.inf)
        order = np.argsort(-sims, axis=1)
        self._graph = [list(map(int, order[i, :n_links])) for i in range(len(self.ids))]

    def _graph_search(self, query: np.ndarray, ef: int) -> list[int]:
        start = 0
        visited = {start}
        frontier = [(float(self.matrix[start] @ query), start)]
        best = dict(frontier)
        while frontier:
            frontier.sort(reverse=True)
            sim, node = frontier.pop(0)
            if len(best) >= ef and sim < min(best.values()):
                break
            for nb in self._graph[node]:
                if nb in visited:
                    continue
                visited.add(nb)
                s = float(self.matrix[nb] @ query)
                if len(best) < ef or s > min(best.values()):
                    best[nb] = s
                    frontier.append((s, nb))
                    if len(best) > ef:
                        worst = min(best, key=best.get)
                        del best[worst]
        return list(best)

    def save(self, path) -> None:
        save_arrays(path, "vector_index", {"ids": self.ids}, {"matrix": self.matrix})

    @classmethod
    def load(cls, path) -> "VectorIndex":
        meta, arrays = load_arrays(path, "vector_index")
        return cls(arrays["matrix"], list(meta["ids"]))


# ---------------------------------------------------------------------------
# Merge rule

def merge_candidates(exact: Sequence[Candidate], embed: Sequence[Candidate],
                     n: int) -> list[Candidate]:
    """Merge the two channel lists into at most n candidates.

    Intersection members come first, ordered by embedding score. The
    remaining slots split evenly between the channel-only lists (lexical
    receives the extra slot on odd remainders); when one side runs out the
    other fills in. The tail interleaves the channels, lexical first.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    exact_ids = {c.ex_id for c in exact}
    embed_ids = {c.ex_id for c in embed}
    inter = [Candidate(c.ex_id, c.score, SOURCE_BOTH)
             for c in embed if c.ex_id in exact_ids]
    if len(inter) >= n:
        return inter[:n]
    rem = n - len(inter)
    exact_only = [c for c in exact if c.ex_id not in embed_ids]
    embed_only = [c for c in embed if c.ex_id not in exact_ids]
    want_exact = (rem + 1) // 2
    want_embed = rem - want_exact
    take_exact = min(want_exact, len(exact_only))
    take_embed = min(want_embed, len(embed_only))
    leftover = rem - take_exact - take_embed
    if leftover > 0:
        extra = min(leftover, len(embed_only) - take_embed)
        take_embed += extra
        leftover -= extra
    if leftover > 0:
        take_exact += min(leftover, len(exact_only) - take_exact)
    merged = list(inter)
    e_list = exact_only[:take_exact]
    m_list = embed_only[:take_embed]
    for i in range(max(len(e_list), len(m_list))):
        if i < len(e_list):
            merged.append(e_list[i])
        if i < len(m_list):
            merged.append(m_list[i])
    return merged


# ---------------------------------------------------------------------------
# Duplicate detection

@dataclass
class DuplicateDetector:
    """Symmetric duplicate probability over pair features.

    The classifier is evaluated in both argument orders and averaged, which
    makes detect(a, b) == detect(b, a) hold exactly.
    """

    classifier: PairClassifier
    featurizer: PairFeaturizer
    threshold: float = 0.5

    def prob(self, ex_a: Exercise, ex_b: Exercise,
             u: Optional[np.ndarray] = None, v: Optional[np.ndarray] = None) -> float:
        p_ab = self.classifier.prob(self.featurizer.features(ex_a, ex_b, u, v))
        p_ba = self.classifier.prob(self.featurizer.features(ex_b, ex_a, v, u))
        return (p_ab + p_ba) / 2.0

    def is_duplicate(self, ex_a: Exercise, ex_b: Exercise,
                     u: Optional[np.ndarray] = None,
                     v: Optional[np.ndarray] = None) -> bool:
        return self.prob(ex_a, ex_b, u, v) >= self.threshold

    def save(self, path) -> None:
        self.classifier.save(path, "dedup")

    @classmethod
    def load(cls, path, featurizer: PairFeaturizer,
             threshold: float = 0.5) -> "DuplicateDetector":
        return cls(PairClassifier.load(path, "dedup"), featurizer, threshold)


def train_dedup(dedup_pairs: Sequence[tuple[Exercise, Exercise, int]],
                vocab: Vocab, params: EncoderParams,
                stop_words: Iterable[str] = (),
                threshold: float = 0.5) -> DuplicateDetector:
    """Fit the dedup classifier; each pair is fed in both argument orders."""
    if not dedup_pairs:
        raise UntrainedModelError("no duplicate-labeled pairs to train on")
    featurizer = PairFeaturizer(vocab, params, tuple(stop_words))
    feats, labels = [], []
    for ex_a, ex_b, label in dedup_pairs:
        u, v = featurizer.embedding(ex_a), featurizer.embedding(ex_b)
        feats.append(featurizer.features(ex_a, ex_b, u, v))
        feats.append(featurizer.features(ex_b, ex_a, v, u))
        labels.extend([label, label])
    clf = PairClassifier.train(np.asarray(feats), np.asarray(labels))
    return DuplicateDetector(clf, featurizer, threshold)


# ---------------------------------------------------------------------------
# Full recall

@dataclass
class Recaller:
    """Bundles everything a recall query needs."""

    corpus: Corpus
    vocab: Vocab
    params: EncoderParams
    lexical: LexicalIndex
    vector: VectorIndex
    dedup: Optional[DuplicateDetector] = None
    stop_words: tuple[str, ...] = ()
    config: RecallConfig = field(default_factory=RecallConfig)

    @classmethod
    def build(cls, corpus: Corpus, vocab: Vocab, params: EncoderParams,
              dedup: Optional[DuplicateDetector] = None,
              stop_words: Iterable[str] = (),
              config: Optional[RecallConfig] = None) -> "Recaller":
        config = config or RecallConfig()
        return cls(
            corpus=corpus, vocab=vocab, params=params,
            lexical=LexicalIndex.build(corpus, stop_words, config.concept_boost),
            vector=VectorIndex.build(corpus, vocab, params, stop_words),
            dedup=dedup, stop_words=tuple(stop_words), config=config)

    def query_embedding(self, query: Exercise) -> np.ndarray:
        seq = tokenize(normalize_text(query.text, self.stop_words)[0], self.vocab)
        return embed_text(seq, self.params)

    def recall(self, query: Exercise,
               approximate: bool = False) -> list[Candidate]:
        cfg = self.config
        tokens = split_tokens(normalize_text(query.text, self.stop_words)[0])
        concepts = frozenset(query.metadata.knowledge_concepts)
        exact = self.lexical.search(tokens, concepts, cfg.k_exact, exclude_id=query.id)
        if tokens:
            q_vec = self.query_embedding(query)
            embed = self.vector.search(q_vec, cfg.k_embed, exclude_id=query.id,
                                       approximate=approximate)
        else:
            q_vec = None
            embed = []
        merged = merge_candidates(exact, embed, cfg.n)
        if self.dedup is None:
            return merged
        kept = []
        for cand in merged:
            ex = self.corpus[cand.ex_id]
            v = None
            row = self.vector.row_of.get(cand.ex_id)
            if row is not None:
                v = self.vector.matrix[row]
            prob = self.dedup.prob(query, ex, q_vec, v)
            if prob < cfg.dedup_threshold:
                kept.append(cand)
        return kept
