"""Binary classifier over exercise-pair features.

Both duplicate detection (recall stage) and variant classification (re-rank
stage) stack the same head on the encoder: a logistic regression over
[u, v, |u - v|, u * v, edit_similarity] where u and v are the two
exercises' embeddings and the last scalar is a normalized token-level
Levenshtein similarity of the normalized texts. Canonical formula spelling
matters here: structural edits such as a raised power inflate into several
canonical tokens, while cosmetic digit noise stays small.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Exercise
from .encoder import EncoderParams, embed_text
from .snapshots import load_arrays, save_arrays
from .textnorm import Vocab, normalize_text, split_tokens, tokenize


class UntrainedModelError(RuntimeError):
    pass


def edit_similarity(a: Sequence[str], b: Sequence[str]) -> float:
    """1 - levenshtein(a, b) / max(len); 1.0 for two empty sequences."""
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, tb in enumerate(b, start=1):
            cost = 0 if ta == tb else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return 1.0 - prev[-1] / max(len(a), len(b))


def pair_features(u: np.ndarray, v: np.ndarray, edit_sim: float) -> np.ndarray:
    return np.concatenate([u, v, np.abs(u - v), u * v, [edit_sim]])


@dataclass
class PairFeaturizer:
    """Turns two exercises into the classifier's feature vector."""

    vocab: Vocab
    params: EncoderParams
    stop_words: tuple[str, ...] = ()

    def norm_tokens(self, ex: Exercise) -> list[str]:
        return split_tokens(normalize_text(ex.text, self.stop_words)[0])

    def embedding(self, ex: Exercise) -> np.ndarray:
        seq = tokenize(normalize_text(ex.text, self.stop_words)[0], self.vocab)
        return embed_text(seq, self.params)

    def features(self, ex_a: Exercise, ex_b: Exercise,
                 u: Optional[np.ndarray] = None,
                 v: Optional[np.ndarray] = None) -> np.ndarray:
        if u is None:
            u = self.embedding(ex_a)
        if v is None:
            v = self.embedding(ex_b)
        sim = edit_similarity(self.norm_tokens(ex_a), self.norm_tokens(ex_b))
        return pair_features(u, v, sim)

    @property
    def n_features(self) -> int:
        return 4 * self.params.d + 1


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -35.0, 35.0)))


@dataclass
class PairClassifier:
    weights: np.ndarray
    bias: float

    def prob(self, features: np.ndarray) -> float:
        return float(_sigmoid(features @ self.weights + self.bias))

    def prob_batch(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(features @ self.weights + self.bias)

    @classmethod
    def train(cls, features: np.ndarray, labels: np.ndarray, lr: float = 5.0,
              epochs: int = 6000, l2: float = 1e-6) -> "PairClassifier":
        """Full-batch logistic regression; deterministic from zero init.

        The step count is generous because the decisive weights (notably the
        edit-similarity one) need to grow large before thin margins separate.
        """
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if x.ndim != 2 or len(x) != len(y):
            raise ValueError("features must be (n, f) aligned with labels")
        w = np.zeros(x.shape[1])
        b = 0.0
        n = len(y)
        for _ in range(epochs):
            p = _sigmoid(x @ w + b)
            err = (p - y) / n
            w -= lr * (x.T @ err + l2 * w)
            b -= lr * float(err.sum())
        return cls(weights=w, bias=b)

    def save(self, path, kind: str) -> None:
        save_arrays(path, kind, {"bias": self.bias}, {"weights": self.weights})

    @classmethod
    def load(cls, path, kind: str) -> "PairClassifier":
        meta, arrays = load_arrays(path, kind)
        return cls(weights=arrays["weights"], bias=float(meta["bias"]))


def bce_loss_and_grads(weights: np.ndarray, bias: float, features: np.ndarray,
                       labels: np.ndarray, l2: float = 0.0):
    """Mean binary cross-entropy with the analytic gradients (for checking).

    Written as softplus(z) - y*z, which is exact for any logit magnitude.
    """
    z = features @ weights + bias
    loss = float((np.logaddexp(0.0, z) - labels * z).mean())
    loss += 0.5 * l2 * float(weights @ weights)
    err = (1.0 / (1.0 + np.exp(-z)) - labels) / len(labels)
    return loss, features.T @ err + l2 * weights, float(err.sum())
