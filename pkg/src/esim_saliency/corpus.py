"""SNLI-format ingestion, tokenization, vocabulary and the bundled probe suite."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

logger = logging.getLogger(__name__)

LABELS = ("entailment", "neutral", "contradiction")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
MAX_LEN = 64

_TOKEN_RE = re.compile(r"[^\s.,!?;:'\"]+|[.,!?;:'\"]")


@dataclass(frozen=True)
class RawExample:
    premise: str
    hypothesis: str
    gold: str = "unlabeled"
    id: Optional[str] = None
    category: Optional[str] = None

    def __post_init__(self):
        if not self.premise.strip() or not self.hypothesis.strip():
            raise ValueError("premise and hypothesis must be non-empty")
        if self.gold not in LABELS and self.gold != "unlabeled":
            raise ValueError(f"unknown gold label {self.gold!r}")


@dataclass(frozen=True)
class EncodedExample:
    premise: tuple
    hypothesis: tuple
    label: int = -1

    def __post_init__(self):
        if len(self.premise) < 1 or len(self.hypothesis) < 1:
            raise ValueError("encoded sentences need at least one token")


@dataclass
class ParseResult:
    """Examples parsed from a JSONL stream plus bookkeeping for skipped lines."""

    examples: list = field(default_factory=list)
    dropped: int = 0
    errors: list = field(default_factory=list)  # (line number, message)

    def __iter__(self):
        return iter(self.examples)

    def __len__(self):
        return len(self.examples)


def parse_snli_jsonl(stream: Iterable[str]) -> ParseResult:
    """Parse SNLI JSON lines (``gold_label``, ``sentence1``, ``sentence2``).

    Lines whose gold label is ``"-"`` (no annotator consensus) are dropped
    and counted. Malformed lines are recorded with their 1-based line number
    and parsing continues.
    """
    result = ParseResult()
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            gold = obj["gold_label"]
            if gold == "-":
                result.dropped += 1
                continue
            result.examples.append(RawExample(obj["sentence1"], obj["sentence2"], gold,
                                              id=obj.get("pairID")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            result.errors.append((lineno, f"{type(exc).__name__}: {exc}"))
    if result.dropped or result.errors:
        logger.info("parsed %d examples, dropped %d unlabeled, %d malformed lines",
                    len(result.examples), result.dropped, len(result.errors))
    return result


def read_snli_jsonl(path) -> ParseResult:
    with open(path, encoding="utf-8") as fh:
        return parse_snli_jsonl(fh)


def tokenize(text: str) -> list:
    """Lowercase, split on whitespace, and split off punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token/index mapping with ``PAD=0`` and ``UNK=1`` reserved."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.itos[i] for i in ids]


def build_vocab(examples: Iterable[RawExample], min_count: int = 1) -> Vocab:
    """Index tokens seen at least ``min_count`` times.

    Order is descending frequency with lexicographic tie-breaking, so the
    result does not depend on example order.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for ex in examples:
        counts.update(tokenize(ex.premise))
        counts.update(tokenize(ex.hypothesis))
    for reserved in (PAD_TOKEN, UNK_TOKEN):
        counts.pop(reserved, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(kept)


def _truncate(tokens, max_len, which):
    if len(tokens) > max_len:
        logger.warning("%s truncated from %d to %d tokens", which, len(tokens), max_len)
        return tokens[:max_len]
    return tokens


def encode_example(example: RawExample, vocab: Vocab, max_len: int = MAX_LEN) -> EncodedExample:
    """Tokenize and index one pair; raises ``ValueError`` if a side is empty."""
    p = _truncate(tokenize(example.premise), max_len, "premise")
    h = _truncate(tokenize(example.hypothesis), max_len, "hypothesis")
    if not p or not h:
        raise ValueError(f"empty sentence after tokenization: {example!r}")
    label = LABEL_INDEX.get(example.gold, -1)
    return EncodedExample(tuple(vocab.encode(p)), tuple(vocab.encode(h)), label)


def encode_all(examples: Iterable[RawExample], vocab: Vocab, max_len: int = MAX_LEN):
    """Encode examples, returning ``(encoded, rejected)`` with rejection reasons."""
    encoded, rejected = [], []
    for ex in examples:
        try:
            encoded.append(encode_example(ex, vocab, max_len))
        except ValueError as exc:
            rejected.append((ex, str(exc)))
    return encoded, rejected


def bundled_examples() -> list:
    """The fixed probe suite: kid/garden triple, John/Mary pair and five counting/chronology cases."""
    text = resources.files("esim_saliency").joinpath("data/bundled_examples.jsonl").read_text("utf-8")
    out = []
    for line in text.splitlines():
        if line.strip():
            obj = json.loads(line)
            out.append(RawExample(obj["premise"], obj["hypothesis"], obj["gold"],
                                  id=obj["id"], category=obj["category"]))
    return out


def load_embeddings(stream: TextIO, vocab: Vocab, table: np.ndarray) -> int:
    """Overwrite rows of ``table`` from whitespace text ``token v1 ... vr``.

    Tokens absent from the file keep their current row. Returns the number
    of vocabulary rows that were filled.
    """
    dim = table.shape[1]
    filled = 0
    for lineno, line in enumerate(stream, start=1):
        parts = line.rstrip().split(" ")
        if len(parts) < 2:
            continue
        tok = parts[0]
        if tok not in vocab.stoi or vocab.stoi[tok] in (PAD, UNK):
            continue
        if len(parts) - 1 != dim:
            raise ValueError(f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
        table[vocab.stoi[tok]] = np.asarray(parts[1:], dtype=np.float64)
        filled += 1
    return filled
