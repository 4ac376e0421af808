"""scikit-learn style wrappers around the bag networks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bagdata import MMILDataset, flatten
from .netcore import build_network
from .train import TrainConfig, evaluate, train
from .validation import as_dataset_labels, check_bags, check_labels


def _bag_entries(spec: str, units: int, activation: str) -> list:
    return [{"units": units, "aggregator": agg, "activation": activation} for agg in spec.split("+")]


class BagNetworkClassifier(ClassifierMixin, BaseEstimator):
    """Bag-layer network classifier for nested (MMIL) or flat (MIL) bags.

    ``X`` is a dataset object, a sequence of ``TopBag``/``Bag`` records, or
    nested sequences: top-bags as lists of ``(n_j, d)`` arrays, flat bags as
    ``(n, d)`` arrays. Labels default to those stored on dataset records.

    Parameters
    ----------
    bag_units : tuple of int
        Width of the bag-layer at each level, innermost first. Its length sets
        the nesting depth the network expects.
    aggregator : str
        ``"max"``, ``"mean"``, ``"sum"`` or a ``+``-joined combination such
        as ``"max+mean"`` for parallel bag-layers whose outputs are concatenated.
    activation : str
        Activation of the bag-layers.
    dense_units : tuple of int
        Dense layers applied to instances before the first bag-layer.
    head_units : tuple of int
        Hidden dense layers between the last bag-layer and the output.
    output : {"auto", "sigmoid", "softmax"}
    arch : dict, optional
        Full architecture description; overrides the layer parameters above.
    learning_rate, batch_size, max_epochs, patience : training settings.
    validation_fraction : float
        Share of the training data held out for early stopping when
        ``eval_set`` is not passed to ``fit``. ``0`` uses the training loss.
    random_state : int
    """

    def __init__(
        self,
        bag_units=(64, 64),
        aggregator="max",
        activation="relu",
        dense_units=(),
        head_units=(),
        output="auto",
        arch=None,
        learning_rate=0.001,
        batch_size=20,
        max_epochs=100,
        patience=10,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.bag_units = bag_units
        self.aggregator = aggregator
        self.activation = activation
        self.dense_units = dense_units
        self.head_units = head_units
        self.output = output
        self.arch = arch
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _architecture(self) -> dict:
        if self.arch is not None:
            return self.arch
        levels = []
        for i, units in enumerate(self.bag_units):
            level = {"bags": _bag_entries(self.aggregator, int(units), self.activation)}
            if i == 0 and self.dense_units:
                level["dense"] = list(self.dense_units)
            levels.append(level)
        return {"levels": levels, "head": list(self.head_units), "output": self.output}

    def _labels(self, X, y):
        if y is None:
            y = as_dataset_labels(X)
            if y is None:
                raise ValueError("y is required when X carries no labels")
        return check_labels(y, len(X))

    def fit(self, X, y=None, eval_set=None):
        """Train on ``X``; ``eval_set=(X_valid, y_valid)`` drives early stopping."""
        bags, depth, width = check_bags(X)
        y = self._labels(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        ss = np.random.SeedSequence(self.random_state)
        init_seed, split_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        spec = build_network(self._architecture(), width, self.classes_.size, init_seed)
        if spec.depth != depth:
            raise ValueError(f"network expects bags nested {spec.depth} level(s) deep, data has {depth}")
        valid_bags = valid_y = None
        if eval_set is not None:
            Xv, yv = eval_set
            valid_bags, _, _ = check_bags(Xv, depth=depth, feature_dim=width)
            valid_y = self._encode(self._labels(Xv, yv))
        elif self.validation_fraction > 0:
            order = np.random.default_rng(split_seed).permutation(len(bags))
            n_valid = max(1, int(round(self.validation_fraction * len(bags))))
            if n_valid >= len(bags):
                raise ValueError("validation_fraction leaves no training data")
            vi, ti = np.sort(order[:n_valid]), np.sort(order[n_valid:])
            valid_bags, valid_y = [bags[i] for i in vi], y_enc[vi]
            bags, y_enc = [bags[i] for i in ti], y_enc[ti]
        config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            early_stop_patience=self.patience,
            seed=train_seed,
        )
        result = train(spec, bags, valid_bags, config, train_labels=y_enc, valid_labels=valid_y)
        self.network_ = result.spec
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_epochs_ = result.stopped_epoch
        self.n_features_in_ = width
        self.depth_ = depth
        return self

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, self.classes_.size - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("labels contain classes unseen during fit")
        return idx

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        bags, depth, _ = check_bags(X, depth=self.depth_, feature_dim=self.n_features_in_)
        return evaluate(self.network_, bags, depth, None)[2]

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def score(self, X, y=None, sample_weight=None):
        return super().score(X, self._labels(X, y), sample_weight)


class FlattenBags(TransformerMixin, BaseEstimator):
    """Collapse top-bags of sub-bags into flat bags by concatenating instances.

    Applied to a labelled ``MMILDataset`` it returns a ``MILDataset``; other
    inputs come back as a list of ``(n, d)`` arrays. Flat input passes through.
    """

    def fit(self, X, y=None):
        _, self.depth_in_, self.n_features_in_ = check_bags(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        if isinstance(X, MMILDataset):
            return flatten(X)
        bags, depth, _ = check_bags(X, feature_dim=self.n_features_in_)
        if depth == 1:
            return bags
        return [np.concatenate(b, axis=0) for b in bags]

