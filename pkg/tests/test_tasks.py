import numpy as np
import pytest

from dba.errors import ParameterError
from dba.tasks import TaskSpec, gen_task, majority_label


def test_majority_label_by_definition():
    assert majority_label([0, 0, 1]) == 0
    with pytest.raises(ParameterError):
        majority_label([0, 1])


def test_majority_labels_are_modes():
    train, _ = gen_task(TaskSpec("majority", n=24, vocab=5, train_size=300, val_size=10))
    for seq, label in zip(train.tokens, train.labels):
        assert majority_label(seq) == label


def test_sparse_recall_structure():
    spec = TaskSpec("sparse-recall", n=16, vocab=6, train_size=500, val_size=10, seed=3)
    train, _ = gen_task(spec)
    marker, cls = spec.vocab, spec.vocab + 1
    positions = []
    for seq, label in zip(train.tokens, train.labels):
        assert seq[0] == cls
        (p,) = np.flatnonzero(seq == marker)
        assert 1 <= p <= spec.n - 2
        assert seq[p + 1] == label < spec.vocab
        positions.append(p)
    assert spec.n - 2 in positions  # marker at the last valid slot still has a label


def test_cross_match_balance_and_semantics():
    spec = TaskSpec("cross-match", n=8, n2=6, vocab=16, train_size=10_000, val_size=10, seed=1)
    train, _ = gen_task(spec)
    assert 0.45 <= train.labels.mean() <= 0.55
    filler = spec.vocab
    for seq, keys, label in zip(train.tokens[:500], train.tokens2[:500], train.labels[:500]):
        (q,) = seq[seq != filler]
        assert len(set(keys)) == spec.n2
        assert label == int(q in keys)


def test_deterministic_and_disjoint():
    spec = TaskSpec("sparse-recall", n=12, vocab=4, train_size=400, val_size=200, seed=7)
    a_train, a_val = gen_task(spec)
    b_train, b_val = gen_task(spec)
    assert np.array_equal(a_train.tokens, b_train.tokens)
    assert np.array_equal(a_val.labels, b_val.labels)
    train_rows = {r.tobytes() for r in a_train.tokens}
    assert not any(r.tobytes() in train_rows for r in a_val.tokens)


def test_spec_validation():
    with pytest.raises(ParameterError):
        TaskSpec(vocab=2)
    with pytest.raises(ParameterError):
        TaskSpec(kind="copy")
    with pytest.raises(ParameterError):
        TaskSpec(kind="cross-match", n2=8, vocab=8)


def test_small_space_is_reported():
    with pytest.raises(ParameterError):
        gen_task(TaskSpec("majority", n=3, vocab=3, train_size=500, val_size=500))
