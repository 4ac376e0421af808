"""Greedy CART classification trees (Gini impurity) and their definite-clause form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

LEAF = -1


@dataclass(eq=False)
class DecisionTree:
    """Array-encoded binary tree; node 0 is the root.

    Internal nodes send ``x[feature] <= threshold`` to ``left``. Leaves have
    ``feature == -1`` and predict ``value``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    @property
    def depth(self) -> int:
        def walk(node):
            if self.feature[node] == LEAF:
                return 0
            return 1 + max(walk(self.left[node]), walk(self.right[node]))

        return walk(0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"tree expects {self.n_features} features, got {X.shape[1]}")
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] != LEAF
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "n_features": int(self.n_features),
            "feature": [int(v) for v in self.feature],
            "threshold": [float(v) for v in self.threshold],
            "left": [int(v) for v in self.left],
            "right": [int(v) for v in self.right],
            "value": [int(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DecisionTree":
        return cls(
            np.asarray(doc["feature"], dtype=int),
            np.asarray(doc["threshold"], dtype=float),
            np.asarray(doc["left"], dtype=int),
            np.asarray(doc["right"], dtype=int),
            np.asarray(doc["value"], dtype=int),
            int(doc["n_features"]),
        )

    @classmethod
    def constant(cls, value: int, n_features: int) -> "DecisionTree":
        return cls(
            np.array([LEAF]), np.array([0.0]), np.array([LEAF]), np.array([LEAF]),
            np.array([int(value)]), n_features,
        )


def _majority(counts: np.ndarray, classes: np.ndarray) -> int:
    return int(classes[int(np.argmax(counts))])  # argmax picks the smallest class on ties


def _best_split(X, codes, n_classes, min_leaf):
    n, p = X.shape
    best = (np.inf, -1, 0.0)
    for f in range(p):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), codes[order]] = 1.0
        left_counts = np.cumsum(onehot, axis=0)[:-1]
        n_left = np.arange(1, n, dtype=float)
        n_right = n - n_left
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        right_counts = left_counts[-1] + onehot[-1] - left_counts
        gini_left = 1.0 - np.sum((left_counts / n_left[:, None]) ** 2, axis=1)
        gini_right = 1.0 - np.sum((right_counts / n_right[:, None]) ** 2, axis=1)
        weighted = (n_left * gini_left + n_right * gini_right) / n
        weighted = np.where(valid, weighted, np.inf)
        i = int(np.argmin(weighted))  # first minimum, i.e. the lowest threshold
        if weighted[i] < best[0] - 1e-12:
            best = (float(weighted[i]), f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def tree_fit(features, labels, max_depth: int | None = 6, min_leaf: int = 1) -> DecisionTree:
    """Grow a CART tree greedily by Gini impurity.

    Candidate thresholds are midpoints between consecutive distinct values.
    Ties between splits go to the lowest feature index, then the lowest
    threshold; leaf labels are the majority class (ties to the smaller class).
    Nodes split while impure, within ``max_depth`` (None = unlimited) and while
    both children keep ``min_leaf`` samples. Sibling leaves that predict the
    same class are merged afterwards, which does not change any prediction.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("tree_fit needs a non-empty 2-D feature matrix")
    if y.shape != (X.shape[0],):
        raise ValueError(f"length mismatch: {X.shape[0]} rows, labels of shape {y.shape}")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    classes, codes = np.unique(y, return_inverse=True)
    n_classes = len(classes)
    nodes = []  # [feature, threshold, left, right, value]

    def grow(idx, depth):
        node_id = len(nodes)
        counts = np.bincount(codes[idx], minlength=n_classes)
        nodes.append([LEAF, 0.0, LEAF, LEAF, _majority(counts, classes)])
        if np.count_nonzero(counts) <= 1:
            return node_id
        if max_depth is not None and depth >= max_depth:
            return node_id
        if len(idx) < 2 * min_leaf:
            return node_id
        score, f, thr = _best_split(X[idx], codes[idx], n_classes, min_leaf)
        if f < 0:
            return node_id
        mask = X[idx, f] <= thr
        left = grow(idx[mask], depth + 1)
        right = grow(idx[~mask], depth + 1)
        nodes[node_id][:4] = [f, thr, left, right]
        return node_id

    grow(np.arange(X.shape[0]), 0)
    tree = DecisionTree(
        np.array([n[0] for n in nodes], dtype=int),
        np.array([n[1] for n in nodes], dtype=float),
        np.array([n[2] for n in nodes], dtype=int),
        np.array([n[3] for n in nodes], dtype=int),
        np.array([n[4] for n in nodes], dtype=int),
        X.shape[1],
    )
    return _collapse(tree)


def _collapse(tree: DecisionTree) -> DecisionTree:
    """Merge sibling leaves with equal predictions and renumber nodes in preorder."""
    feature, left, right, value = tree.feature.copy(), tree.left, tree.right, tree.value.copy()

    def simplify(node):
        if feature[node] == LEAF:
            return
        simplify(left[node])
        simplify(right[node])
        l, r = left[node], right[node]
        if feature[l] == LEAF and feature[r] == LEAF and value[l] == value[r]:
            feature[node] = LEAF
            value[node] = value[l]

    simplify(0)
    out = []

    def emit(node):
        new_id = len(out)
        out.append(None)
        if feature[node] == LEAF:
            out[new_id] = (LEAF, 0.0, LEAF, LEAF, value[node])
        else:
            l = emit(left[node])
            r = emit(right[node])
            out[new_id] = (feature[node], tree.threshold[node], l, r, value[node])
        return new_id

    emit(0)
    cols = list(zip(*out))
    return DecisionTree(
        np.array(cols[0], dtype=int), np.array(cols[1], dtype=float), np.array(cols[2], dtype=int),
        np.array(cols[3], dtype=int), np.array(cols[4], dtype=int), tree.n_features,
    )


class GiniTreeClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`tree_fit` for use in pipelines."""

    def __init__(self, max_depth=6, min_leaf=5):
        self.max_depth = max_depth
        self.min_leaf = min_leaf

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.tree_ = tree_fit(X, codes, self.max_depth, self.min_leaf)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        return self.classes_[self.tree_.predict(check_array(X))]


# ---------------------------------------------------------------------------
# Definite clauses
# ---------------------------------------------------------------------------

_OP_TEXT = {"<=": "≤", ">": ">", "=": "="}


@dataclass(frozen=True)
class Literal:
    feature: int
    op: str  # "<=", ">" or "="
    value: float

    def holds(self, x) -> bool:
        v = x[self.feature]
        if self.op == "<=":
            return bool(v <= self.value)
        if self.op == ">":
            return bool(v > self.value)
        return bool(v == self.value)


@dataclass(frozen=True)
class Clause:
    head: int
    body: tuple  # of Literal
    leaf: int

    def fires(self, x) -> bool:
        return all(lit.holds(x) for lit in self.body)


@dataclass
class RuleSet:
    """Clauses transcribed from the root-to-leaf paths of one tree.

    Exactly one clause fires for every input (in the binary domain when the
    rules were written with ``=`` literals).
    """

    clauses: list
    head_name: str = "y"
    feature_names: list | None = None
    head_names: dict | None = None

    def fired(self, x) -> int:
        x = np.asarray(x, dtype=float)
        hits = [i for i, c in enumerate(self.clauses) if c.fires(x)]
        if len(hits) != 1:
            raise ValueError(f"{len(hits)} clauses fired; rules are not exclusive/exhaustive for this input")
        return hits[0]

    def evaluate(self, x) -> int:
        return self.clauses[self.fired(x)].head

    def predict(self, X) -> np.ndarray:
        return np.array([self.evaluate(x) for x in np.atleast_2d(X)], dtype=int)

    def literal_text(self, lit: Literal) -> str:
        name = self.feature_names[lit.feature] if self.feature_names else f"x{lit.feature + 1}"
        value = f"{int(lit.value)}" if lit.op == "=" else f"{lit.value:.6g}"
        return f"{name}{_OP_TEXT[lit.op]}{value}"

    def head_text(self, head: int) -> str:
        label = self.head_names.get(head, str(head)) if self.head_names else str(head)
        return f"{self.head_name}={label}"

    def clause_text(self, clause: Clause) -> str:
        if not clause.body:
            return f"{self.head_text(clause.head)}."
        return f"{self.head_text(clause.head)} ← " + ", ".join(self.literal_text(l) for l in clause.body) + "."

    def to_text(self) -> str:
        return "\n".join(self.clause_text(c) for c in self.clauses)

    def referenced_features(self, index: int) -> list:
        return sorted({lit.feature for lit in self.clauses[index].body})


def _path_literals(bounds: dict, binary: bool) -> tuple:
    lits = []
    for f in sorted(bounds):
        lo, hi = bounds[f]
        if binary:
            allowed = [v for v in (0.0, 1.0) if (lo is None or v > lo) and (hi is None or v <= hi)]
            if len(allowed) == 1:
                lits.append(Literal(f, "=", allowed[0]))
                continue
            if len(allowed) == 2:
                continue
        if lo is not None:
            lits.append(Literal(f, ">", lo))
        if hi is not None:
            lits.append(Literal(f, "<=", hi))
    return tuple(lits)


def extract_rules(
    tree: DecisionTree,
    *,
    head_name: str = "y",
    feature_names=None,
    head_names=None,
    binary_features: bool = False,
) -> RuleSet:
    """One clause per leaf: the conjunction of the threshold tests on its path.

    Tests on the same feature are merged into the tightest interval. With
    ``binary_features`` (occurrence vectors), cuts inside [0, 1) are written
    as ``= 0`` / ``= 1`` literals.
    """
    clauses = []

    def walk(node, bounds):
        if tree.feature[node] == LEAF:
            clauses.append(Clause(int(tree.value[node]), _path_literals(bounds, binary_features), int(node)))
            return
        f, thr = int(tree.feature[node]), float(tree.threshold[node])
        lo, hi = bounds.get(f, (None, None))
        left = dict(bounds)
        left[f] = (lo, thr if hi is None else min(hi, thr))
        walk(tree.left[node], left)
        right = dict(bounds)
        right[f] = (thr if lo is None else max(lo, thr), hi)
        walk(tree.right[node], right)

    walk(0, {})
    return RuleSet(clauses, head_name, list(feature_names) if feature_names is not None else None, head_names)
