"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .corpus import LABEL_INDEX, LABELS, RawExample


def check_pairs(X) -> list:
    """Coerce ``X`` to a list of ``(premise, hypothesis)`` string pairs.

    Accepts RawExamples, 2-tuples, an ``(n, 2)`` array or a two-column
    DataFrame.
    """
    if hasattr(X, "iloc"):
        X = X.to_numpy()
    items = list(X)
    if not items:
        raise ValueError("expected at least one premise/hypothesis pair")
    out = []
    for k, item in enumerate(items):
        if isinstance(item, RawExample):
            out.append((item.premise, item.hypothesis))
            continue
        arr = np.asarray(item, dtype=object)
        if arr.shape != (2,):
            raise ValueError(f"sample {k}: expected a (premise, hypothesis) pair, got shape {arr.shape}")
        premise, hypothesis = arr
        if not isinstance(premise, str) or not isinstance(hypothesis, str):
            raise TypeError(f"sample {k}: premise and hypothesis must be strings")
        if not premise.strip() or not hypothesis.strip():
            raise ValueError(f"sample {k}: empty premise or hypothesis")
        out.append((premise, hypothesis))
    return out


def check_labels(y, n_samples=None) -> np.ndarray:
    """Map label names or indices to class indices 0..2."""
    out = []
    for k, label in enumerate(np.asarray(y, dtype=object).ravel()):
        if isinstance(label, str):
            if label not in LABEL_INDEX:
                raise ValueError(f"sample {k}: unknown label {label!r}, expected one of {LABELS}")
            out.append(LABEL_INDEX[label])
        else:
            idx = int(label)
            if idx != label or not 0 <= idx < len(LABELS):
                raise ValueError(f"sample {k}: label index {label!r} out of range")
            out.append(idx)
    if n_samples is not None and len(out) != n_samples:
        raise ValueError(f"{len(out)} labels for {n_samples} samples")
    return np.asarray(out, dtype=np.int64)


def check_label(label):
    """A single optional class given by name or index."""
    if label is None:
        return None
    return int(check_labels([label])[0])


def check_fitted(estimator, attributes=("params_", "vocab_")):
    if any(getattr(estimator, a, None) is None for a in attributes):
        raise NotFittedError(f"This {type(estimator).__name__} instance is not fitted yet. "
                             "Call 'fit' or load a checkpoint first.")
