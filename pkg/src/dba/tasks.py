"""Synthetic sequence-classification tasks for the toy trainer.

Token ids ``0 .. vocab-1`` are content symbols. Each task may append a few
special ids after them (marker, CLS, filler); ``Dataset.vocab_size`` is the
total embedding table size.

* ``majority``: label is the unique most frequent symbol. One symbol is
  over-represented so the mode is well separated at every length.
* ``sparse-recall``: position 0 holds CLS, a marker sits at a uniformly
  random position ``p`` in ``[1, n-2]``, and the label is the symbol at
  ``p + 1``.
* ``cross-match``: the second sequence holds a set of distinct keys, the
  first holds one query symbol among filler tokens; the label says whether
  the query is one of the keys. Positives and negatives are balanced.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError
from .numeric import make_rng

KINDS = ("majority", "sparse-recall", "cross-match")

# Probability that a majority-task position holds the planted symbol.
MAJORITY_TILT = 0.3


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "majority"
    n: int = 48
    n2: int = 6
    vocab: int = 8
    train_size: int = 2000
    val_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown task {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.vocab < 3:
            raise ParameterError(f"vocab must be >= 3, got {self.vocab}")
        if self.n < 3:
            raise ParameterError(f"n must be >= 3, got {self.n}")
        if self.train_size < 1 or self.val_size < 1:
            raise ParameterError("train_size and val_size must be >= 1")
        if self.kind == "cross-match" and not 1 <= self.n2 < self.vocab:
            raise ParameterError(f"cross-match needs 1 <= n2 < vocab, got n2={self.n2}")

    @property
    def n_classes(self) -> int:
        return 2 if self.kind == "cross-match" else self.vocab

    @property
    def vocab_size(self) -> int:
        # majority: content only; sparse-recall: + marker, CLS; cross-match: + filler
        return self.vocab + {"majority": 0, "sparse-recall": 2, "cross-match": 1}[self.kind]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    kind: str
    tokens: np.ndarray              # (N, n) int64
    labels: np.ndarray              # (N,) int64
    vocab_size: int
    n_classes: int
    tokens2: np.ndarray | None = None   # (N, n2) for cross-match

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        t2 = None if self.tokens2 is None else self.tokens2[idx]
        return self.tokens[idx], t2, self.labels[idx]


def _majority(rng, n, vocab):
    while True:
        planted = rng.integers(vocab)
        seq = rng.integers(vocab, size=n)
        seq[rng.random(n) < MAJORITY_TILT] = planted
        counts = np.bincount(seq, minlength=vocab)
        top = counts.max()
        if np.count_nonzero(counts == top) == 1:
            return seq, None, int(np.argmax(counts))


def _sparse_recall(rng, n, vocab):
    marker, cls = vocab, vocab + 1
    seq = rng.integers(vocab, size=n)
    seq[0] = cls
    p = int(rng.integers(1, n - 1))
    seq[p] = marker
    return seq, None, int(seq[p + 1])


def _cross_match(rng, n1, n2, vocab):
    filler = vocab
    keys = rng.choice(vocab, size=n2, replace=False)
    positive = bool(rng.integers(2))
    pool = keys if positive else np.setdiff1d(np.arange(vocab), keys)
    query = rng.choice(pool)
    seq = np.full(n1, filler)
    seq[rng.integers(n1)] = query
    return seq, keys, int(positive)


def sample(spec: TaskSpec, rng):
    if spec.kind == "majority":
        return _majority(rng, spec.n, spec.vocab)
    if spec.kind == "sparse-recall":
        return _sparse_recall(rng, spec.n, spec.vocab)
    return _cross_match(rng, spec.n, spec.n2, spec.vocab)


def gen_task(spec: TaskSpec, max_tries_factor: int = 20) -> tuple[Dataset, Dataset]:
    """Deterministic ``(train, val)`` with no sample shared between the splits.

    Samples are drawn from one stream and duplicates are dropped, so the
    splits are disjoint by construction.
    """
    rng = make_rng(spec.seed)
    total = spec.train_size + spec.val_size
    seen = set()
    rows = []
    tries = 0
    while len(rows) < total:
        tries += 1
        if tries > max_tries_factor * total:
            raise ParameterError(f"task space too small for {total} distinct samples")
        seq, seq2, label = sample(spec, rng)
        key = (seq.tobytes(), None if seq2 is None else seq2.tobytes())
        if key in seen:
            continue
        seen.add(key)
        rows.append((seq, seq2, label))

    def build(part):
        tokens = np.stack([r[0] for r in part]).astype(np.int64)
        labels = np.array([r[2] for r in part], dtype=np.int64)
        t2 = None
        if spec.kind == "cross-match":
            t2 = np.stack([r[1] for r in part]).astype(np.int64)
        return Dataset(spec.kind, tokens, labels, spec.vocab_size, spec.n_classes, t2)

    return build(rows[:spec.train_size]), build(rows[spec.train_size:])


def majority_label(seq) -> int:
    """Mode of ``seq``; raises if it is not unique."""
    counts = np.bincount(np.asarray(seq))
    if np.count_nonzero(counts == counts.max()) != 1:
        raise ParameterError("sequence has no unique mode")
    return int(np.argmax(counts))
