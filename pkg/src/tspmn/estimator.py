"""Scikit-learn style front door for the term matching model.

`TermMatcher` wraps vocabulary building, packing, training, and prediction
behind the usual fit/predict surface so the model composes with the wider
ecosystem (cloning, grid search, `sklearn.metrics`). X is a sequence of
query strings; y is either a binary indicator matrix of shape
(n_queries, n_terms) or an iterable of term-id / term-surface collections.
`predict` returns an indicator matrix; `predict_terms` returns readable
(slot, surface) sets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import LabeledQuery
from .encoder import ModelConfig
from .terminology import TermDictionary, load_dictionary_tsv
from .textcodec import build_vocab, load_vocab
from .training import (
    Checkpoint,
    TrainConfig,
    evaluate_queries,
    load_checkpoint,
    predict_term_sets,
    run_finetuning,
)
from .util import DataError


def _as_dictionary(dictionary) -> TermDictionary:
    if isinstance(dictionary, TermDictionary):
        return dictionary
    if isinstance(dictionary, str):
        return load_dictionary_tsv(dictionary)
    raise DataError("dictionary must be a TermDictionary or a TSV path")


class TermMatcher(BaseEstimator):
    """Multi-label term matcher with a fit/predict interface.

    Parameters mirror the training configuration; `init_checkpoint` may
    point at a pretrained checkpoint (the matching vocabulary file must
    accompany it via `init_vocab`).
    """

    def __init__(
        self,
        dictionary=None,
        n: int = 20,
        max_len: int = 256,
        epochs: int = 30,
        lr: float = 3e-4,
        batch_size: int = 16,
        weight_decay: float = 0.01,
        clip_norm: float = 1.0,
        dropout: float = 0.1,
        layers: int = 2,
        heads: int = 2,
        hidden: int = 64,
        ffn: int = 128,
        init_std: float = 0.02,
        seed: int = 0,
        validation_fraction: float = 0.0,
        init_checkpoint: str | None = None,
        init_vocab: str | None = None,
    ):
        self.dictionary = dictionary
        self.n = n
        self.max_len = max_len
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.dropout = dropout
        self.layers = layers
        self.heads = heads
        self.hidden = hidden
        self.ffn = ffn
        self.init_std = init_std
        self.seed = seed
        self.validation_fraction = validation_fraction
        self.init_checkpoint = init_checkpoint
        self.init_vocab = init_vocab

    # -- input validation helpers ------------------------------------------

    def _validate_queries(self, X) -> list[str]:
        queries = list(X)
        if not queries:
            raise DataError("X must contain at least one query")
        for q in queries:
            if not isinstance(q, str) or not q:
                raise DataError(f"queries must be non-empty strings, got {q!r}")
        return queries

    def _coerce_labels(self, y, n_queries: int, dictionary: TermDictionary):
        """Accept an indicator matrix or per-query term collections."""
        arr = np.asarray(y, dtype=object)
        if arr.ndim == 2 and arr.shape[1] == len(dictionary):
            matrix = np.asarray(y)
            if matrix.shape[0] != n_queries:
                raise DataError(
                    f"y has {matrix.shape[0]} rows for {n_queries} queries"
                )
            return [set(np.flatnonzero(row).tolist()) for row in matrix]
        golds = []
        rows = list(y)
        if len(rows) != n_queries:
            raise DataError(f"y has {len(rows)} entries for {n_queries} queries")
        for row in rows:
            gold = set()
            for item in row:
                if isinstance(item, str):
                    term_id = dictionary.term_id_of(item)
                    if term_id is None:
                        raise DataError(f"unknown term surface {item!r} in y")
                else:
                    term_id = int(item)
                    if not 0 <= term_id < len(dictionary):
                        raise DataError(f"term id {term_id} out of range in y")
                gold.add(term_id)
            golds.append(gold)
        return golds

    def _labeled(self, queries: list[str], golds, prefix: str) -> list[LabeledQuery]:
        dictionary = self.dictionary_
        return [
            LabeledQuery(
                query_id=f"{prefix}{i:06d}",
                query=q,
                gold=frozenset((dictionary.slot(t), t) for t in gold),
            )
            for i, (q, gold) in enumerate(zip(queries, golds))
        ]

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y) -> "TermMatcher":
        if self.dictionary is None:
            raise DataError("a dictionary is required to fit")
        self.dictionary_ = _as_dictionary(self.dictionary)
        queries = self._validate_queries(X)
        golds = self._coerce_labels(y, len(queries), self.dictionary_)
        labeled = self._labeled(queries, golds, "fit")

        split = int(len(labeled) * self.validation_fraction)
        dev = labeled[:split]
        train = labeled[split:]
        if not train:
            raise DataError("validation_fraction leaves no training queries")

        config = TrainConfig(
            phase="finetune",
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            n=self.n,
            weight_decay=self.weight_decay,
            seed=self.seed,
            max_len=self.max_len,
            clip_norm=self.clip_norm,
            model=ModelConfig(
                vocab_size=0,
                layers=self.layers,
                heads=self.heads,
                hidden=self.hidden,
                ffn=self.ffn,
                dropout=self.dropout,
                init_std=self.init_std,
            ),
        )
        init: Checkpoint | None = None
        if self.init_checkpoint is not None:
            if self.init_vocab is None:
                raise DataError("init_checkpoint requires init_vocab")
            init = load_checkpoint(self.init_checkpoint)
            vocab = load_vocab(self.init_vocab)
        else:
            texts = [q.query for q in train] + [q.query for q in dev]
            vocab = build_vocab(self.dictionary_, texts)

        checkpoint, log = run_finetuning(
            self.dictionary_, train, dev, config, init=init, vocab=vocab
        )
        self.checkpoint_ = checkpoint
        self.vocab_ = vocab
        self.history_ = log.epochs
        self.terms_ = [e.surface for e in self.dictionary_]
        return self

    def _predict_sets(self, X) -> list[set[int]]:
        check_is_fitted(self, "checkpoint_")
        queries = self._validate_queries(X)
        labeled = [
            LabeledQuery(query_id=f"pred{i:06d}", query=q, gold=frozenset())
            for i, q in enumerate(queries)
        ]
        sets = predict_term_sets(
            self.checkpoint_.params,
            self.checkpoint_.model,
            self.vocab_,
            self.dictionary_,
            labeled,
            self.n,
            self.max_len,
            batch_size=self.batch_size,
        )
        return [sets[q.query_id] for q in labeled]

    def predict(self, X) -> np.ndarray:
        """Binary indicator matrix of shape (n_queries, n_terms)."""
        sets = self._predict_sets(X)
        out = np.zeros((len(sets), len(self.dictionary_)), dtype=np.int64)
        for i, chosen in enumerate(sets):
            for t in chosen:
                out[i, t] = 1
        return out

    def predict_terms(self, X) -> list[set[tuple[str, str]]]:
        """Readable (slot, surface) pairs per query."""
        dictionary = self.dictionary_
        return [
            {(dictionary.slot(t), dictionary.surface(t)) for t in chosen}
            for chosen in self._predict_sets(X)
        ]

    def score(self, X, y) -> float:
        """Micro-F1 of predicted term sets against y."""
        check_is_fitted(self, "checkpoint_")
        queries = self._validate_queries(X)
        golds = self._coerce_labels(y, len(queries), self.dictionary_)
        labeled = self._labeled(queries, golds, "score")
        metrics = evaluate_queries(
            self.checkpoint_.params,
            self.checkpoint_.model,
            self.vocab_,
            self.dictionary_,
            labeled,
            self.n,
            self.max_len,
            batch_size=self.batch_size,
        )
        return metrics.micro_f1
