"""End-to-end pipeline: workspace artifacts, configuration, query flow.

A workspace directory holds every trained artifact under fixed names
(corpus snapshot, vocabulary, encoder and ranker parameters, classifier
heads, both indexes). Build steps write them, :class:`Pipeline` loads them
and answers queries by composing recall, ranking and re-rank. Each loaded
snapshot carries a content digest; the digests version the query cache, so
retraining anything invalidates cached results implicitly.

Configuration is a flat key = value file; see DEFAULTS for the full key
list with defaults.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import conflearn, corpus as corpus_mod, encoder as encoder_mod
from . import ranking, recall as recall_mod, rerank as rerank_mod
from .corpus import Corpus, Exercise, LabeledPair, SyntheticSpec, SyntheticTruth
from .evaluate import (EvalReport, annotated_similars, config_hash,
                       evaluate_precision, evaluate_recall)
from .pairclf import PairFeaturizer
from .recall import Candidate, RecallConfig, Recaller
from .rerank import RerankConfig, RerankedResult, StudentProfile, VariantClassifier
from .snapshots import file_digest
from .textnorm import Vocab

log = logging.getLogger(__name__)

FILES = {
    "corpus": "corpus.snap",
    "pairs": "pairs.jsonl",
    "pairs_clean": "pairs_clean.jsonl",
    "truth": "truth.json",
    "vocab": "vocab.txt",
    "encoder": "encoder.params",
    "ranker": "ranker.params",
    "dedup": "dedup.params",
    "variant": "variant.params",
    "lexical": "lexical.idx",
    "vector": "vector.idx",
    "report": "report.json",
    "cleaning": "cleaning.json",
    "embeddings": "embeddings.txt",
}

DEFAULTS = {
    "stopwords": "",
    "encoder.d": "32",
    "encoder.epochs": "12",
    "encoder.lr": "0.05",
    "encoder.batch": "32",
    "encoder.tau": "0.1",
    "encoder.seed": "0",
    "finetune.epochs": "4",
    "finetune.lr": "0.01",
    "finetune.negatives": "10",
    "recall.k_exact": "200",
    "recall.k_embed": "200",
    "recall.n": "100",
    "recall.dedup_threshold": "0.5",
    "recall.concept_boost": "0.5",
    "rank.lr": "0.01",
    "rank.epochs": "3",
    "rank.batch_pairs": "16",
    "rank.seed": "0",
    "rank.moe": "on",
    "rank.alpha": "0.3333333333333333,0.3333333333333333,0.3333333333333333",
    "rank.tasks": "t1,t2,t3",
    "cl.folds": "5",
    "cl.strategy": "noise-rate",
    "cl.seed": "0",
    "rerank.variant_threshold": "0.5",
    "rerank.enable_variant": "on",
    "cache.size": "256",
    "service.port": "8100",
    "service.batch_window_ms": "10",
    "service.max_pending": "64",
    "eval.k_recall": "100",
    "eval.ks": "1,3,5",
}


class ConfigurationError(RuntimeError):
    def __init__(self, missing: list[str]):
        super().__init__("missing or untrained components: " + ", ".join(missing))
        self.missing = missing


class NotFoundError(KeyError):
    pass


class Config:
    """Flat key = value configuration with typed accessors."""

    def __init__(self, values: Optional[dict] = None):
        self.values = dict(DEFAULTS)
        if values:
            unknown = set(values) - set(DEFAULTS)
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            self.values.update({k: str(v) for k, v in values.items()})

    @classmethod
    def load(cls, path) -> "Config":
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
        return cls(values)

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_bool(self, key: str) -> bool:
        return self.values[key].lower() in ("1", "true", "on", "yes")

    def get_list(self, key: str) -> list[str]:
        raw = self.values[key].strip()
        return [item.strip() for item in raw.split(",") if item.strip()] if raw else []

    def stop_words(self) -> tuple[str, ...]:
        return tuple(self.get_list("stopwords"))

    def hash(self) -> str:
        return config_hash(self.values)


def _path(workdir, name: str) -> Path:
    return Path(workdir) / FILES[name]


# ---------------------------------------------------------------------------
# Build steps (each reads earlier artifacts, writes its own)

def step_ingest(workdir, jsonl_path, levels: Optional[int] = None) -> Corpus:
    corpus = corpus_mod.load_corpus(jsonl_path, levels=levels)
    Path(workdir).mkdir(parents=True, exist_ok=True)
    corpus_mod.save_snapshot(corpus, _path(workdir, "corpus"))
    return corpus


def step_synth(workdir, spec: SyntheticSpec) -> tuple[Corpus, SyntheticTruth,
                                                      list[LabeledPair]]:
    corpus, truth, pairs = corpus_mod.generate_synthetic(spec)
    Path(workdir).mkdir(parents=True, exist_ok=True)
    corpus_mod.save_snapshot(corpus, _path(workdir, "corpus"))
    corpus_mod.save_pairs(pairs, _path(workdir, "pairs"))
    corpus_mod.save_truth(truth, _path(workdir, "truth"))
    return corpus, truth, pairs


def step_pretrain(workdir, config: Config):
    corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
    stop = config.stop_words()
    vocab = encoder_mod.build_vocab(corpus, stop)
    vocab.save(_path(workdir, "vocab"))
    pre_cfg = encoder_mod.PretrainConfig(
        d=config.get_int("encoder.d"), epochs=config.get_int("encoder.epochs"),
        lr=config.get_float("encoder.lr"), batch_size=config.get_int("encoder.batch"),
        tau=config.get_float("encoder.tau"), seed=config.get_int("encoder.seed"))
    params, history = encoder_mod.pretrain(corpus, vocab, pre_cfg, stop_words=stop)
    encoder_mod.save_encoder(params, _path(workdir, "encoder"))
    return params, history


def step_finetune(workdir, config: Config):
    corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
    vocab = Vocab.load(_path(workdir, "vocab"))
    params = encoder_mod.load_encoder(_path(workdir, "encoder"))
    pairs = corpus_mod.load_pairs(_path(workdir, "pairs"))
    ft_cfg = encoder_mod.FinetuneConfig(
        epochs=config.get_int("finetune.epochs"), lr=config.get_float("finetune.lr"),
        n_negatives=config.get_int("finetune.negatives"),
        seed=config.get_int("encoder.seed"))
    params, history = encoder_mod.fine_tune(params, pairs, corpus, vocab, ft_cfg,
                                            stop_words=config.stop_words())
    encoder_mod.save_encoder(params, _path(workdir, "encoder"))
    return params, history


def step_index(workdir, config: Config) -> None:
    """Build both indexes; also fit dedup/variant heads when data allows."""
    corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
    vocab = Vocab.load(_path(workdir, "vocab"))
    params = encoder_mod.load_encoder(_path(workdir, "encoder"))
    stop = config.stop_words()
    lexical = recall_mod.LexicalIndex.build(
        corpus, stop, config.get_float("recall.concept_boost"))
    lexical.save(_path(workdir, "lexical"))
    vector = recall_mod.VectorIndex.build(corpus, vocab, params, stop)
    vector.save(_path(workdir, "vector"))
    truth_path = _path(workdir, "truth")
    if truth_path.exists():
        truth = corpus_mod.load_truth(truth_path)
        dedup_pairs = corpus_mod.generate_dedup_pairs(corpus, truth, seed=97)
        detector = recall_mod.train_dedup(dedup_pairs, vocab, params, stop)
        detector.save(_path(workdir, "dedup"))
    pairs_path = _path(workdir, "pairs")
    if pairs_path.exists():
        pairs = corpus_mod.load_pairs(pairs_path)
        if any(p.variant is not None for p in pairs):
            variant_clf = rerank_mod.train_variant(pairs, corpus, vocab, params, stop)
            variant_clf.save(_path(workdir, "variant"))


def _rank_config(config: Config) -> ranking.RankConfig:
    alpha = [float(x) for x in config.get_list("rank.alpha")]
    return ranking.RankConfig(
        lr=config.get_float("rank.lr"), epochs=config.get_int("rank.epochs"),
        batch_pairs=config.get_int("rank.batch_pairs"),
        seed=config.get_int("rank.seed"), moe=config.get_bool("rank.moe"),
        alpha=tuple(alpha) if len(alpha) == 3 else (1 / 3, 1 / 3, 1 / 3),
        tasks=ranking.resolve_tasks(config.get_list("rank.tasks")))


def step_train_rank(workdir, config: Config, pairs_name: str = "pairs"):
    corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
    vocab = Vocab.load(_path(workdir, "vocab"))
    encoder = encoder_mod.load_encoder(_path(workdir, "encoder"))
    pairs = corpus_mod.load_pairs(_path(workdir, pairs_name))
    params, history = ranking.train_ranker(pairs, corpus, vocab, _rank_config(config),
                                           encoder=encoder,
                                           stop_words=config.stop_words())
    ranking.save_ranker(params, _path(workdir, "ranker"))
    return params, history


def step_clean(workdir, config: Config):
    """Confidence-learning cycle; retrains and saves the ranker on clean pairs."""
    corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
    vocab = Vocab.load(_path(workdir, "vocab"))
    encoder = encoder_mod.load_encoder(_path(workdir, "encoder"))
    pairs = corpus_mod.load_pairs(_path(workdir, "pairs"))
    cl_cfg = conflearn.CleanConfig(
        folds=config.get_int("cl.folds"), seed=config.get_int("cl.seed"),
        strategy=config.get("cl.strategy"), retrain=_rank_config(config))
    eval_fn = _make_p5_eval(workdir, config, corpus, vocab, encoder, pairs)
    params, cleaned, report = conflearn.clean_and_retrain(
        pairs, corpus, vocab, encoder, cl_cfg, eval_fn=eval_fn,
        stop_words=config.stop_words())
    ranking.save_ranker(params, _path(workdir, "ranker"))
    corpus_mod.save_pairs(cleaned, _path(workdir, "pairs_clean"))
    with open(_path(workdir, "cleaning"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    return params, cleaned, report


def _make_p5_eval(workdir, config, corpus, vocab, encoder, pairs):
    """P@5 evaluator against ground truth when available, else annotations."""
    truth_path = _path(workdir, "truth")
    if truth_path.exists():
        truth = corpus_mod.load_truth(truth_path)
        relevant = {ex_id: truth.mates(ex_id) for ex_id in _eval_query_ids(corpus)}
    else:
        relevant = {k: v for k, v in annotated_similars(pairs).items() if v}
    recaller = Recaller.build(corpus, vocab, encoder,
                              stop_words=config.stop_words(),
                              config=_recall_config(config))

    def eval_fn(ranker_params) -> float:
        ranker = ranking.Ranker(vocab, ranker_params, config.stop_words())
        ranked = ranked_lists(recaller, ranker, corpus, list(relevant))
        values, _ = evaluate_precision(ranked, relevant, ks=(5,))
        return values[5]

    return eval_fn


def _eval_query_ids(corpus: Corpus, max_queries: int = 60) -> list[str]:
    ids = corpus.ids
    if len(ids) <= max_queries:
        return ids
    step = len(ids) / max_queries
    return [ids[int(i * step)] for i in range(max_queries)]


def _recall_config(config: Config) -> RecallConfig:
    return RecallConfig(
        k_exact=config.get_int("recall.k_exact"),
        k_embed=config.get_int("recall.k_embed"),
        n=config.get_int("recall.n"),
        dedup_threshold=config.get_float("recall.dedup_threshold"),
        concept_boost=config.get_float("recall.concept_boost"))


def step_export_embeddings(workdir, config: Config, out_path=None) -> Path:
    corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
    vocab = Vocab.load(_path(workdir, "vocab"))
    params = encoder_mod.load_encoder(_path(workdir, "encoder"))
    out = Path(out_path) if out_path else _path(workdir, "embeddings")
    encoder_mod.export_embeddings(corpus, vocab, params, out, config.stop_words())
    return out


# ---------------------------------------------------------------------------
# Evaluation harness over built components

def recall_lists(recaller: Recaller, seed_ids: Sequence[str],
                 k: int) -> dict[str, list[str]]:
    """Top-k recall output per seed (merge stage, before ranking)."""
    out = {}
    for seed_id in seed_ids:
        cands = recaller.recall(recaller.corpus[seed_id])
        out[seed_id] = [c.ex_id for c in cands[:k]]
    return out


def ranked_lists(recaller: Recaller, ranker: ranking.Ranker, corpus: Corpus,
                 query_ids: Sequence[str]) -> dict[str, list[str]]:
    """Recall then rank per query; returns ranked id lists."""
    out = {}
    for query_id in query_ids:
        query = corpus[query_id]
        cands = recaller.recall(query)
        ranked = ranker.rank(query, cands, corpus)
        out[query_id] = [c.ex_id for c in ranked]
    return out


def step_eval(workdir, config: Config) -> EvalReport:
    """Recall@K over annotations plus P@1/3/5 after ranking; writes report.json."""
    corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
    vocab = Vocab.load(_path(workdir, "vocab"))
    encoder = encoder_mod.load_encoder(_path(workdir, "encoder"))
    pairs = corpus_mod.load_pairs(_path(workdir, "pairs"))
    ranker_params = ranking.load_ranker(_path(workdir, "ranker"))
    recaller = Recaller.build(corpus, vocab, encoder, stop_words=config.stop_words(),
                              config=_recall_config(config))
    ranker = ranking.Ranker(vocab, ranker_params, config.stop_words())

    k_recall = config.get_int("eval.k_recall")
    annotated = {k: v for k, v in annotated_similars(pairs).items() if v}
    seed_ids = sorted(annotated)
    recall_value, per_seed = evaluate_recall(
        recall_lists(recaller, seed_ids, k_recall), annotated, k_recall)

    truth_path = _path(workdir, "truth")
    if truth_path.exists():
        truth = corpus_mod.load_truth(truth_path)
        query_ids = _eval_query_ids(corpus)
        relevant = {q: truth.mates(q) for q in query_ids}
    else:
        relevant = annotated
    ks = tuple(int(k) for k in config.get_list("eval.ks"))
    values, per_query = evaluate_precision(
        ranked_lists(recaller, ranker, corpus, list(relevant)), relevant, ks)

    report = EvalReport(config_hash=config.hash(), k_recall=k_recall,
                        recall_at_k=recall_value, per_seed=per_seed,
                        precision_ks=ks, precision_at_k=values, per_query=per_query)
    with open(_path(workdir, "report"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    return report


# ---------------------------------------------------------------------------
# The serving pipeline

@dataclass
class Pipeline:
    corpus: Corpus
    vocab: Vocab
    encoder: encoder_mod.EncoderParams
    recaller: Recaller
    ranker: ranking.Ranker
    variant_clf: Optional[VariantClassifier]
    config: Config
    versions: dict[str, str]
    cache_size: int = 256
    _cache: "OrderedDict[tuple, RerankedResult]" = field(default_factory=OrderedDict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @classmethod
    def load(cls, workdir, config: Optional[Config] = None) -> "Pipeline":
        config = config or Config()
        required = ("corpus", "vocab", "encoder", "ranker", "lexical", "vector")
        missing = [name for name in required if not _path(workdir, name).exists()]
        if missing:
            raise ConfigurationError([FILES[m] for m in missing])
        corpus = corpus_mod.load_snapshot(_path(workdir, "corpus"))
        vocab = Vocab.load(_path(workdir, "vocab"))
        encoder = encoder_mod.load_encoder(_path(workdir, "encoder"))
        ranker_params = ranking.load_ranker(_path(workdir, "ranker"))
        if not ranker_params.trained:
            raise ConfigurationError([FILES["ranker"] + " (untrained)"])
        lexical = recall_mod.LexicalIndex.load(_path(workdir, "lexical"))
        vector = recall_mod.VectorIndex.load(_path(workdir, "vector"))
        stop = config.stop_words()
        featurizer = PairFeaturizer(vocab, encoder, stop)
        dedup = None
        if _path(workdir, "dedup").exists():
            dedup = recall_mod.DuplicateDetector.load(
                _path(workdir, "dedup"), featurizer,
                threshold=config.get_float("recall.dedup_threshold"))
        variant_clf = None
        if _path(workdir, "variant").exists():
            variant_clf = VariantClassifier.load(
                _path(workdir, "variant"), featurizer,
                threshold=config.get_float("rerank.variant_threshold"))
        recaller = Recaller(corpus=corpus, vocab=vocab, params=encoder,
                            lexical=lexical, vector=vector, dedup=dedup,
                            stop_words=stop, config=_recall_config(config))
        versions = {}
        for name in FILES:
            p = _path(workdir, name)
            if p.exists() and name not in ("report", "cleaning", "embeddings"):
                versions[name] = file_digest(p)
        return cls(corpus=corpus, vocab=vocab, encoder=encoder, recaller=recaller,
                   ranker=ranking.Ranker(vocab, ranker_params, stop),
                   variant_clf=variant_clf, config=config, versions=versions,
                   cache_size=config.get_int("cache.size"))

    # -- query flow ----------------------------------------------------------

    def resolve(self, query: Union[str, Exercise]) -> Exercise:
        if isinstance(query, Exercise):
            return query
        ex = self.corpus.get(query)
        if ex is None:
            raise NotFoundError(f"unknown exercise id {query!r}")
        return ex

    def _cache_key(self, query: Union[str, Exercise],
                   profile: Optional[StudentProfile]) -> tuple:
        if isinstance(query, Exercise):
            digest = hashlib.sha256(
                json.dumps(query.to_record(), sort_keys=True).encode()).hexdigest()
            qkey = ("exercise", digest)
        else:
            qkey = ("id", query)
        pkey = None if profile is None else (profile.ability, profile.stage_mode,
                                             profile.current_stage)
        return (qkey, pkey, tuple(sorted(self.versions.items())))

    def query(self, query: Union[str, Exercise],
              profile: Optional[StudentProfile] = None) -> RerankedResult:
        return self.query_with_cache_info(query, profile)[0]

    def query_with_cache_info(self, query: Union[str, Exercise],
                              profile: Optional[StudentProfile] = None
                              ) -> tuple[RerankedResult, bool]:
        key = self._cache_key(query, profile)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key], True
        result = self._compute(self.resolve(query), profile)
        with self._lock:
            self._cache[key] = result
            self._cache.move_to_end(key)
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return result, False

    def _compute(self, query: Exercise,
                 profile: Optional[StudentProfile]) -> RerankedResult:
        candidates = self.recaller.recall(query)
        ranked = self.ranker.rank(query, candidates, self.corpus)
        return rerank_mod.rerank(
            query, ranked, profile, self.corpus, self.variant_clf,
            RerankConfig(
                variant_threshold=self.config.get_float("rerank.variant_threshold"),
                enable_variant=self.config.get_bool("rerank.enable_variant")))

    def query_batch(self, requests: Sequence[tuple[Union[str, Exercise],
                                                   Optional[StudentProfile]]]
                    ) -> list[RerankedResult]:
        """Process a group of requests as one unit.

        Per-query arithmetic is identical to the single-query path, so
        grouping can never change a response; batching buys shared passes,
        not different math.
        """
        return [self.query(q, p) for q, p in requests]

    def duplicate_verdict(self, a: Union[str, Exercise],
                          b: Union[str, Exercise]) -> dict:
        if self.recaller.dedup is None:
            raise ConfigurationError([FILES["dedup"]])
        ex_a, ex_b = self.resolve(a), self.resolve(b)
        prob = self.recaller.dedup.prob(ex_a, ex_b)
        return {"a": ex_a.id, "b": ex_b.id, "probability": prob,
                "duplicate": prob >= self.recaller.dedup.threshold}
