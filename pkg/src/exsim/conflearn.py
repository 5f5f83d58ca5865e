"""Label-noise cleaning: estimate the noisy/true label joint, prune, retrain.

Annotated similarity labels disagree between annotators, so a slice of the
training pairs is simply wrong. The cleaning cycle:

1. out-of-fold probabilities: stratified folds, each scored by a single-task
   ranker trained on the other folds, so no pair is scored by a model that
   saw it;
2. confident joint: per-class thresholds (the mean predicted probability of
   a class over the pairs noisily labeled with it) decide which pairs count
   as confidently belonging to which class, giving a 2x2 count matrix of
   noisy label vs inferred true label;
3. pruning: each off-diagonal count removes that many pairs of the
   corresponding noisy label, lowest self-class probability first;
4. retraining the full ranker on the surviving pairs.

With an oracle probability function (the true 0/1 indicator) the joint is
exactly diagonal and nothing is pruned.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .corpus import Corpus, LabeledPair
from .encoder import EncoderParams
from .ranking import (
    RankConfig, Ranker, RankerParams, TASK_STEM_STEM, train_ranker,
)
from .textnorm import Vocab

log = logging.getLogger(__name__)

PRUNE_BY_NOISE_RATE = "noise-rate"
PRUNE_BY_CLASS = "class"


@dataclass
class CleanConfig:
    folds: int = 5
    seed: int = 0
    strategy: str = PRUNE_BY_NOISE_RATE
    estimator_epochs: int = 1
    estimator_lr: float = 0.01
    retrain: RankConfig = field(default_factory=RankConfig)


@dataclass
class ConfidentJoint:
    counts: np.ndarray      # 2x2, [noisy label][inferred true label]
    thresholds: np.ndarray  # (2,) mean self-class probability per class

    @property
    def off_diagonal_total(self) -> int:
        return int(self.counts.sum() - np.trace(self.counts))


def stratified_folds(labels: Sequence[int], folds: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Fold assignment preserving the class mix; every fold sees both classes."""
    labels = np.asarray(labels)
    assignment = np.empty(len(labels), dtype=np.int64)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < folds:
            raise ValueError(
                f"class {cls} has {len(idx)} pairs, fewer than {folds} folds; "
                "cannot stratify")
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % folds
    return assignment


def out_of_fold_probs(pairs: Sequence[LabeledPair], corpus: Corpus, vocab: Vocab,
                      encoder: EncoderParams,
                      config: CleanConfig = CleanConfig(),
                      stop_words: Iterable[str] = ()) -> np.ndarray:
    """Probability of "similar" for every pair, scored out of fold."""
    if len(pairs) < 2 * config.folds:
        raise ValueError("need at least two pairs per fold")
    labels = [1 if p.is_similar else 0 for p in pairs]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 41]))
    assignment = stratified_folds(labels, config.folds, rng)
    probs = np.zeros(len(pairs))
    for fold in range(config.folds):
        holdout = np.flatnonzero(assignment == fold)
        train_idx = np.flatnonzero(assignment != fold)
        fold_cfg = RankConfig(
            lr=config.estimator_lr, epochs=config.estimator_epochs,
            seed=int(np.random.SeedSequence([config.seed, fold]).generate_state(1)[0]
                     % (2 ** 31)),
            moe=False, alpha=(1.0, 0.0, 0.0), tasks=(TASK_STEM_STEM,))
        params, _ = train_ranker([pairs[i] for i in train_idx], corpus, vocab,
                                 fold_cfg, encoder=encoder, stop_words=stop_words)
        ranker = Ranker(vocab, params, tuple(stop_words))
        for i in holdout:
            probs[i] = ranker.score_pair(corpus[pairs[i].a_id], corpus[pairs[i].b_id])
    return probs


def build_confident_joint(probs: Sequence[float],
                          labels: Sequence[int]) -> ConfidentJoint:
    """Count confident (noisy label, inferred label) pairs.

    probs are probabilities of class 1; class 0 probability is its
    complement. The threshold of a class is the mean probability of that
    class over the examples noisily labeled with it. An example counts
    toward the class of highest probability among those meeting their
    threshold, or is skipped when none does. Threshold comparisons allow a
    1e-12 absolute slack so that an example sitting exactly at a threshold
    in decimal arithmetic is not dropped by float summation rounding.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError("probs and labels must align")
    p = np.stack([1.0 - probs, probs], axis=1)  # (n, 2) class probabilities
    thresholds = np.zeros(2)
    for cls in (0, 1):
        mask = labels == cls
        if not mask.any():
            raise ValueError(f"no examples labeled {cls}")
        thresholds[cls] = p[mask, cls].mean()
    counts = np.zeros((2, 2), dtype=np.int64)
    for i in range(len(labels)):
        eligible = [cls for cls in (0, 1) if p[i, cls] >= thresholds[cls] - 1e-12]
        if not eligible:
            continue
        inferred = max(eligible, key=lambda cls: (p[i, cls], cls))
        counts[labels[i], inferred] += 1
    return ConfidentJoint(counts=counts, thresholds=thresholds)


def prune(pairs: Sequence[LabeledPair], joint: ConfidentJoint,
          probs: Sequence[float],
          strategy: str = PRUNE_BY_NOISE_RATE) -> tuple[list[LabeledPair], list[int]]:
    """Drop the likely-mislabeled pairs; returns (cleaned, pruned indices).

    noise-rate: per off-diagonal cell C[i][j], prune the C[i][j] pairs with
    noisy label i of lowest self-class probability. class: per noisy label i,
    prune its total off-diagonal count, same ordering. The two coincide for
    binary labels (one off-diagonal cell per row); both are kept so configs
    can name either.
    """
    if strategy not in (PRUNE_BY_NOISE_RATE, PRUNE_BY_CLASS):
        raise ValueError(f"unknown prune strategy {strategy!r}")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.array([1 if p.is_similar else 0 for p in pairs])
    p_self = np.where(labels == 1, probs, 1.0 - probs)
    to_prune: set[int] = set()
    for noisy in (0, 1):
        if strategy == PRUNE_BY_NOISE_RATE:
            k = int(joint.counts[noisy, 1 - noisy])
        else:
            k = int(joint.counts[noisy].sum() - joint.counts[noisy, noisy])
        if k <= 0:
            continue
        cls_idx = np.flatnonzero(labels == noisy)
        order = sorted(cls_idx, key=lambda i: (p_self[i], i))
        to_prune.update(order[:k])
    cleaned = [p for i, p in enumerate(pairs) if i not in to_prune]
    return cleaned, sorted(to_prune)


@dataclass
class CleaningReport:
    joint: list[list[int]]
    thresholds: list[float]
    n_pairs: int
    n_pruned: int
    pruned: list[dict]
    p5_before: Optional[float] = None
    p5_after: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1)


def clean_and_retrain(pairs: Sequence[LabeledPair], corpus: Corpus, vocab: Vocab,
                      encoder: EncoderParams,
                      config: CleanConfig = CleanConfig(),
                      eval_fn: Optional[Callable[[RankerParams], float]] = None,
                      stop_words: Iterable[str] = ()):
    """Full cycle: out-of-fold probs, joint, prune, retrain the full ranker.

    Returns (params, cleaned_pairs, report). When eval_fn is given it is
    called on the before/after rankers to record precision at 5.
    """
    probs = out_of_fold_probs(pairs, corpus, vocab, encoder, config, stop_words)
    labels = [1 if p.is_similar else 0 for p in pairs]
    joint = build_confident_joint(probs, labels)
    cleaned, pruned_idx = prune(pairs, joint, probs, config.strategy)
    log.info("confident joint %s; pruning %d of %d pairs",
             joint.counts.tolist(), len(pruned_idx), len(pairs))

    p5_before = p5_after = None
    if eval_fn is not None:
        before_params, _ = train_ranker(pairs, corpus, vocab, config.retrain,
                                        encoder=encoder, stop_words=stop_words)
        p5_before = eval_fn(before_params)
    params, _ = train_ranker(cleaned, corpus, vocab, config.retrain,
                             encoder=encoder, stop_words=stop_words)
    if eval_fn is not None:
        p5_after = eval_fn(params)

    report = CleaningReport(
        joint=joint.counts.tolist(),
        thresholds=joint.thresholds.tolist(),
        n_pairs=len(pairs),
        n_pruned=len(pruned_idx),
        pruned=[{"index": i, "a_id": pairs[i].a_id, "b_id": pairs[i].b_id,
                 "label": pairs[i].label} for i in pruned_idx],
        p5_before=p5_before,
        p5_after=p5_after,
    )
    return params, cleaned, report
