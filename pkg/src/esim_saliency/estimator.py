"""scikit-learn style wrapper around ESIM training, prediction and explanation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import LABELS, MAX_LEN, RawExample, build_vocab, encode_example, load_embeddings
from .esim import EsimParams, forward
from .introspect import explain
from .trainer import TrainConfig, train
from .validation import check_fitted, check_label, check_labels, check_pairs


class EsimClassifier(ClassifierMixin, BaseEstimator):
    """ESIM natural-language-inference classifier.

    ``X`` is a sequence of ``(premise, hypothesis)`` string pairs; ``y``
    holds label names (``"entailment"``, ``"neutral"``, ``"contradiction"``)
    or their indices 0..2.

    Parameters
    ----------
    d : int
        Hidden size of both BiLSTMs and of the projector.
    r : int
        Word embedding size.
    d_h : int, optional
        Classifier hidden width, defaults to ``d``.
    learning_rate, batch_size, epochs, clip_norm, seed, dropout
        Training settings, see :class:`~esim_saliency.trainer.TrainConfig`.
    min_count : int
        Minimum token frequency for the vocabulary.
    max_len : int
        Sentences are truncated to this many tokens.
    embeddings_path : str, optional
        Whitespace text file ``token v1 ... vr`` used to seed embeddings.
    stop_at_train_accuracy : float, optional
        Stop once the training-set accuracy reaches this value.
    """

    def __init__(self, d=50, r=50, d_h=None, learning_rate=4e-4, batch_size=32, epochs=3, clip_norm=10.0,
                 seed=0, dropout=0.0, min_count=1, max_len=MAX_LEN, embeddings_path=None,
                 stop_at_train_accuracy=None):
        self.d = d
        self.r = r
        self.d_h = d_h
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.seed = seed
        self.dropout = dropout
        self.min_count = min_count
        self.max_len = max_len
        self.embeddings_path = embeddings_path
        self.stop_at_train_accuracy = stop_at_train_accuracy

    def _config(self):
        return TrainConfig(d=self.d, r=self.r, d_h=self.d_h, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, epochs=self.epochs, clip_norm=self.clip_norm,
                           seed=self.seed, dropout=self.dropout,
                           stop_at_train_accuracy=self.stop_at_train_accuracy)

    def _encode(self, pairs, labels=None):
        labels = [None] * len(pairs) if labels is None else labels
        out = []
        for (p, h), lab in zip(pairs, labels):
            gold = "unlabeled" if lab is None else LABELS[lab]
            out.append(encode_example(RawExample(p, h, gold), self.vocab_, self.max_len))
        return out

    def fit(self, X, y, eval_set=None, on_epoch=None):
        pairs = check_pairs(X)
        labels = check_labels(y, len(pairs))
        config = self._config()
        self.vocab_ = build_vocab((RawExample(p, h) for p, h in pairs), self.min_count)
        init = EsimParams.initialize(config.d, config.r, len(self.vocab_), config.d_h, seed=self.seed)
        if self.embeddings_path:
            with open(self.embeddings_path, encoding="utf-8") as fh:
                load_embeddings(fh, self.vocab_, init.arrays["embedding"])
        train_set = self._encode(pairs, labels)
        eval_encoded = ()
        if eval_set is not None:
            X_eval, y_eval = eval_set
            eval_pairs = check_pairs(X_eval)
            eval_encoded = self._encode(eval_pairs, check_labels(y_eval, len(eval_pairs)))
        self.params_, self.report_ = train(config, train_set, eval_encoded, params=init, on_epoch=on_epoch)
        self.classes_ = np.asarray(LABELS)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Pre-softmax logits, one row per pair."""
        check_fitted(self)
        encoded = self._encode(check_pairs(X))
        return np.stack([forward(self.params_, ex, requires_grad=False).logits for ex in encoded])

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def explain(self, premise, hypothesis, label=None, include_cell=False):
        """Attention saliency and gate curves for one pair, see :func:`esim_saliency.introspect.explain`."""
        check_fitted(self)
        return explain(self.params_, self.vocab_, premise, hypothesis, check_label(label),
                       include_cell=include_cell, max_len=self.max_len)

    def save(self, path):
        check_fitted(self)
        save_checkpoint(self.params_, self.vocab_, path)
        return path

    @classmethod
    def load(cls, path):
        params, vocab = load_checkpoint(path)
        est = cls(d=params.d, r=params.r, d_h=params.d_h, seed=params.seed)
        est.params_, est.vocab_ = params, vocab
        est.classes_ = np.asarray(LABELS)
        return est
