"""Education-specific post-processing of the ranked candidate list.

Three opt-in steps, cheapest and most absolute first:

1. learning-stage filter: in synchronous practice a student should not see
   material beyond their current (grade, semester); in review mode the cut
   is on the semester component;
2. difficulty filter: excellent students get candidates at or above the
   query's difficulty, weak students at or below, average within one level;
3. variant split: a directional classifier separates genuine variants
   (changed condition, conclusion or solving method) from plain similars,
   and the variant list is presented first.

Every step preserves the incoming ranking order and is idempotent. With no
profile and no classifier the whole stage is a pass-through, so the
pipeline is testable end to end before any re-rank model exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Corpus, Exercise, LabeledPair, VARIANT
from .encoder import EncoderParams
from .pairclf import PairClassifier, PairFeaturizer, UntrainedModelError
from .recall import Candidate
from .textnorm import Vocab

ABILITIES = ("weak", "average", "excellent")
STAGE_MODES = ("synchronous", "review")


@dataclass(frozen=True)
class StudentProfile:
    ability: str
    stage_mode: str
    current_stage: tuple[int, int]

    def __post_init__(self):
        if self.ability not in ABILITIES:
            raise ValueError(f"unknown ability {self.ability!r}")
        if self.stage_mode not in STAGE_MODES:
            raise ValueError(f"unknown stage mode {self.stage_mode!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "StudentProfile":
        stage = data["current_stage"]
        return cls(ability=data["ability"], stage_mode=data["stage_mode"],
                   current_stage=(int(stage[0]), int(stage[1])))

    def to_dict(self) -> dict:
        return {"ability": self.ability, "stage_mode": self.stage_mode,
                "current_stage": list(self.current_stage)}


@dataclass(frozen=True)
class RerankedItem:
    ex_id: str
    score: float
    source: str
    passed: tuple[str, ...]
    variant_prob: Optional[float] = None


@dataclass
class RerankedResult:
    variant: list[RerankedItem]
    similar: list[RerankedItem]

    def all_ids(self) -> list[str]:
        return [i.ex_id for i in self.variant] + [i.ex_id for i in self.similar]

    def to_dict(self) -> dict:
        def items(lst):
            return [{"id": i.ex_id, "score": i.score, "source": i.source,
                     "passed": list(i.passed), "variant_prob": i.variant_prob}
                    for i in lst]
        return {"variant": items(self.variant), "similar": items(self.similar)}


@dataclass
class RerankConfig:
    variant_threshold: float = 0.5
    enable_variant: bool = True


# ---------------------------------------------------------------------------
# Filters

def stage_filter(candidates: Sequence[Candidate], profile: Optional[StudentProfile],
                 corpus: Corpus) -> list[Candidate]:
    """Drop candidates beyond the student's learning stage; order preserved.

    Synchronous practice compares whole (grade, semester) stages; review
    compares the semester component only, per the stated rules.
    """
    if profile is None:
        return list(candidates)
    kept = []
    for c in candidates:
        stage = corpus[c.ex_id].learning_stage
        if profile.stage_mode == "synchronous":
            if stage <= profile.current_stage:
                kept.append(c)
        else:  # review
            if stage[1] <= profile.current_stage[1]:
                kept.append(c)
    return kept


def personalize_filter(candidates: Sequence[Candidate], query_difficulty: int,
                       profile: Optional[StudentProfile],
                       corpus: Corpus) -> list[Candidate]:
    """Difficulty band by ability: similar-or-hard for excellent students,
    similar-or-easy for weak, within one level for average."""
    if profile is None:
        return list(candidates)
    kept = []
    for c in candidates:
        d = corpus[c.ex_id].metadata.difficulty
        if profile.ability == "excellent":
            ok = d >= query_difficulty
        elif profile.ability == "weak":
            ok = d <= query_difficulty
        else:
            ok = abs(d - query_difficulty) <= 1
        if ok:
            kept.append(c)
    return kept


# ---------------------------------------------------------------------------
# Variant classification

@dataclass
class VariantClassifier:
    """Directional variant-vs-plain-similar probability: the query comes
    first and is the reference whose condition may have been changed."""

    classifier: PairClassifier
    featurizer: PairFeaturizer
    threshold: float = 0.5

    def prob(self, query: Exercise, candidate: Exercise,
             u: Optional[np.ndarray] = None,
             v: Optional[np.ndarray] = None) -> float:
        return self.classifier.prob(self.featurizer.features(query, candidate, u, v))

    def is_variant(self, query: Exercise, candidate: Exercise) -> bool:
        return self.prob(query, candidate) >= self.threshold

    def save(self, path) -> None:
        self.classifier.save(path, "variant")

    @classmethod
    def load(cls, path, featurizer: PairFeaturizer,
             threshold: float = 0.5) -> "VariantClassifier":
        return cls(PairClassifier.load(path, "variant"), featurizer, threshold)


def train_variant(pairs: Sequence[LabeledPair], corpus: Corpus, vocab: Vocab,
                  params: EncoderParams, stop_words: Iterable[str] = (),
                  threshold: float = 0.5) -> VariantClassifier:
    """Fit on the variant-flagged labeled pairs (variant=1, plain-similar=0)."""
    flagged = [p for p in pairs if p.variant is not None]
    if not flagged:
        raise UntrainedModelError("no variant-flagged pairs to train on")
    featurizer = PairFeaturizer(vocab, params, tuple(stop_words))
    feats, labels = [], []
    for p in flagged:
        a, b = corpus[p.a_id], corpus[p.b_id]
        u, v = featurizer.embedding(a), featurizer.embedding(b)
        label = 1 if p.variant == VARIANT else 0
        feats.append(featurizer.features(a, b, u, v))
        feats.append(featurizer.features(b, a, v, u))
        labels.extend([label, label])
    clf = PairClassifier.train(np.asarray(feats), np.asarray(labels))
    return VariantClassifier(clf, featurizer, threshold)


# ---------------------------------------------------------------------------
# Full re-rank

def rerank(query: Exercise, candidates: Sequence[Candidate],
           profile: Optional[StudentProfile], corpus: Corpus,
           variant_clf: Optional[VariantClassifier] = None,
           config: RerankConfig = RerankConfig()) -> RerankedResult:
    """Stage filter, difficulty filter, then variant split, order preserved."""
    passed: list[str] = []
    kept = list(candidates)
    if profile is not None:
        kept = stage_filter(kept, profile, corpus)
        passed.append("stage")
        kept = personalize_filter(kept, query.metadata.difficulty, profile, corpus)
        passed.append("difficulty")
    use_variant = variant_clf is not None and config.enable_variant
    variant_items: list[RerankedItem] = []
    similar_items: list[RerankedItem] = []
    for c in kept:
        if use_variant:
            prob = variant_clf.prob(query, corpus[c.ex_id])
            item = RerankedItem(c.ex_id, c.score, c.source,
                                tuple(passed + ["variant"]), prob)
            if prob >= config.variant_threshold:
                variant_items.append(item)
            else:
                similar_items.append(item)
        else:
            similar_items.append(RerankedItem(c.ex_id, c.score, c.source,
                                              tuple(passed), None))
    return RerankedResult(variant=variant_items, similar=similar_items)
