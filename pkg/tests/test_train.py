import csv

import numpy as np
import pytest

from conftest import two_level_arch
from mmil.bagdata import MMILDataset, TopBag, generate_seven_not_three
from mmil.netcore import build_network, forward
from mmil.train import TrainConfig, accuracy, predict, train, write_history


@pytest.fixture(scope="module")
def small():
    data, _ = generate_seven_not_three(60, noise_std=0.1, seed=3)
    return data


def fresh(seed=0, units=(8, 8)):
    return build_network(two_level_arch(units), 10, 2, seed)


def test_zero_learning_rate_keeps_parameters(small):
    spec = fresh()
    result = train(spec, small, small, TrainConfig(learning_rate=0.0, max_epochs=3, early_stop_patience=5))
    for a, b in zip(spec.parameters(), result.spec.parameters()):
        assert np.array_equal(a, b)
    assert len(result.history) == 3


def test_input_spec_is_not_modified(small):
    spec = fresh()
    before = [p.copy() for p in spec.parameters()]
    train(spec, small, None, TrainConfig(max_epochs=2))
    assert all(np.array_equal(a, b) for a, b in zip(before, spec.parameters()))


def test_patience_zero_stops_after_first_worse_epoch(small):
    flipped = MMILDataset(tuple(TopBag(ex.subbags, 1 - ex.label, ex.id) for ex in small), 10, 2)
    config = TrainConfig(learning_rate=0.01, max_epochs=10, early_stop_patience=0, seed=4)
    result = train(fresh(), small, flipped, config)
    losses = [h["valid_loss"] for h in result.history]
    assert losses[1] > losses[0]
    assert result.stopped_epoch == 2 and result.best_epoch == 1
    one_epoch = train(fresh(), small, flipped, TrainConfig(learning_rate=0.01, max_epochs=1, seed=4))
    for a, b in zip(result.spec.parameters(), one_epoch.spec.parameters()):
        assert np.array_equal(a, b)


def test_seeded_runs_are_identical(small):
    config = TrainConfig(max_epochs=2, seed=9)
    a = train(fresh(), small, small, config)
    b = train(fresh(), small, small, config)
    assert all(np.array_equal(x, y) for x, y in zip(a.spec.parameters(), b.spec.parameters()))
    assert a.history == b.history


def test_partial_last_batch_is_used(small):
    # 60 examples with batch 50: the second batch of 10 must still move the weights
    spec = fresh()
    full = train(spec, small.subset(range(50)), None, TrainConfig(batch_size=50, max_epochs=1, seed=1))
    both = train(spec, small, None, TrainConfig(batch_size=50, max_epochs=1, seed=1))
    assert not all(np.array_equal(a, b) for a, b in zip(full.spec.parameters(), both.spec.parameters()))


def test_non_finite_loss_is_reported(small):
    spec = fresh()
    spec.parameters()[0][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="epoch 1, batch 0"):
        train(spec, small, None, TrainConfig(max_epochs=1))


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_label_range_checked(small):
    spec = build_network(two_level_arch((4, 4)), 10, 2, 0)
    with pytest.raises(ValueError, match="labels must lie"):
        train(spec, small, None, TrainConfig(max_epochs=1), train_labels=np.full(len(small), 2))


def test_predict_tie_goes_to_class_zero(small):
    spec = fresh()
    spec.head[-1].weight[:] = 0.0
    labels, proba = predict(spec, small)
    assert np.all(proba == 0.5) and not labels.any()


def test_predict_is_permutation_invariant(small):
    spec = fresh(units=(6, 6))
    ex = small[0]
    rng = np.random.default_rng(0)
    shuffled = [s[rng.permutation(len(s))] for s in ex.subbags][::-1]
    assert np.array_equal(forward(list(ex.subbags), spec).proba, forward(shuffled, spec).proba)


def test_accuracy_examples(small):
    assert accuracy([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0
    assert accuracy([0, 1], [1, 0]) == 0.0
    assert accuracy([1, 0, 1, 0], [1, 0, 1, 1]) == 0.75
    assert accuracy(small.labels, small) == 1.0
    with pytest.raises(ValueError):
        accuracy([1], [1, 0])


def test_history_csv(tmp_path, small):
    result = train(fresh(), small, small, TrainConfig(max_epochs=2))
    write_history(result.history, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["epoch", "train_loss", "valid_loss", "valid_accuracy"] and len(rows) == 3


@pytest.mark.slow
def test_noiseless_benchmark_generalises():
    train_set, _ = generate_seven_not_three(2000, noise_std=0.0, seed=21)
    valid_set, _ = generate_seven_not_three(500, noise_std=0.0, seed=22)
    test_set, _ = generate_seven_not_three(2000, noise_std=0.0, seed=23)
    spec = build_network(two_level_arch((64, 64)), 10, 2, 0)
    result = train(spec, train_set, valid_set, TrainConfig(max_epochs=100, seed=0))
    pred, _ = predict(result.spec, test_set)
    assert accuracy(pred, test_set) >= 0.95
    train_pred, _ = predict(result.spec, train_set)
    if accuracy(train_pred, train_set) == 1.0:
        assert np.array_equal(train_pred, train_set.labels)
