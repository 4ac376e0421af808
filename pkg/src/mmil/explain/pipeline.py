"""Distil a two-level bag network into cluster labels and decision-tree rules.

Instance and sub-bag representations computed by the network's bag-layers are
clustered with k-means; every instance and sub-bag is then named by its nearest
centroid. A tree ``s`` maps the cluster statistics of a sub-bag's instances to a
sub-bag cluster, and a tree ``t`` maps the statistics of a top-bag's sub-bag
clusters to the network's predicted class. The composed surrogate is scored by
its agreement rate with the network (fidelity), and the two cluster counts are
chosen by a grid search on validation fidelity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..netcore import NetworkSpec, forward_packed, pack
from ..validation import check_bags
from .kmeans import assign_labels, kmeans_fit
from .tree import DecisionTree, RuleSet, extract_rules, tree_fit

FEATURE_MODES = ("frequency", "occurrence")


# ---------------------------------------------------------------------------
# Representations
# ---------------------------------------------------------------------------


@dataclass
class Representations:
    """Bag-layer representations of a dataset, with their coordinates.

    ``instances[i]`` belongs to sub-bag ``instance_owner[i]`` (a global sub-bag
    row); ``subbags[j]`` belongs to example ``subbag_owner[j]``.
    """

    instances: np.ndarray
    subbags: np.ndarray
    instance_owner: np.ndarray
    subbag_owner: np.ndarray
    instance_coords: np.ndarray  # (example, subbag, instance)
    subbag_coords: np.ndarray  # (example, subbag)
    predictions: np.ndarray  # network's predicted class per example

    @property
    def n_examples(self) -> int:
        return len(self.predictions)

    @property
    def n_subbags(self) -> int:
        return len(self.subbags)


def intermediate_representations(spec: NetworkSpec, X, batch_size: int = 500) -> Representations:
    """Instance-level and sub-bag-level bag-layer outputs (before aggregation)."""
    if spec.depth != 2:
        raise ValueError("rule extraction needs a two-level (instance/sub-bag) network")
    bags, depth, _ = check_bags(X, depth=2, feature_dim=spec.input_dim)
    inst, sub, inst_owner, sub_owner, inst_coords, sub_coords, preds = [], [], [], [], [], [], []
    sub_offset = 0
    for start in range(0, len(bags), batch_size):
        chunk = bags[start : start + batch_size]
        trace = forward_packed(spec, pack(chunk, depth))
        inst.append(trace.instance_rho)
        sub.append(trace.subbag_rho)
        preds.append(trace.proba.argmax(axis=1))
        seg_inst, seg_sub = trace.packed.segments
        inst_owner.append(seg_inst.owner + sub_offset)
        sub_owner.append(seg_sub.owner + start)
        for e, top in enumerate(chunk):
            for j, m in enumerate(top):
                sub_coords.append((start + e, j))
                inst_coords.extend((start + e, j, ell) for ell in range(m.shape[0]))
        sub_offset += seg_sub.n_elements
    return Representations(
        np.concatenate(inst),
        np.concatenate(sub),
        np.concatenate(inst_owner),
        np.concatenate(sub_owner),
        np.array(inst_coords, dtype=int).reshape(-1, 3),
        np.array(sub_coords, dtype=int).reshape(-1, 2),
        np.concatenate(preds),
    )


# ---------------------------------------------------------------------------
# Cluster statistics
# ---------------------------------------------------------------------------


def _check_ids(ids, k):
    ids = np.asarray(ids, dtype=int)
    if np.any((ids < 0) | (ids >= k)):
        raise ValueError(f"cluster identifier out of range [0, {k})")
    return ids


def frequencies(identifiers, k: int) -> np.ndarray:
    """Relative frequency of each cluster identifier ``0..k-1`` in a non-empty bag."""
    ids = _check_ids(identifiers, k)
    if ids.size == 0:
        raise ValueError("frequencies of an empty bag are undefined")
    return np.bincount(ids, minlength=k) / ids.size


def occurrences(identifiers, k: int) -> np.ndarray:
    """0/1 indicator of which cluster identifiers occur in a non-empty bag."""
    ids = _check_ids(identifiers, k)
    if ids.size == 0:
        raise ValueError("occurrences of an empty bag are undefined")
    return (np.bincount(ids, minlength=k) > 0).astype(float)


def group_features(ids, owner, n_groups: int, k: int, mode: str) -> np.ndarray:
    """Frequency or occurrence vectors for every group of identifiers."""
    ids = _check_ids(ids, k)
    counts = np.zeros((n_groups, k))
    np.add.at(counts, (np.asarray(owner, dtype=int), ids), 1.0)
    if mode == "occurrence":
        return (counts > 0).astype(float)
    if mode == "frequency":
        return counts / counts.sum(axis=1, keepdims=True)
    raise ValueError(f"feature_mode must be one of {FEATURE_MODES}, got {mode!r}")


# ---------------------------------------------------------------------------
# Explainers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Explainer:
    """Centroids for one bag-layer plus a tree over their cluster statistics."""

    centroids: np.ndarray
    tree: DecisionTree
    feature_mode: str = "frequency"

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, vectors) -> np.ndarray:
        return assign_labels(vectors, self.centroids)

    def features(self, vectors, owner, n_groups) -> np.ndarray:
        return group_features(self.assign(vectors), owner, n_groups, self.k, self.feature_mode)


def _seed_for(seed, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *[int(p) for p in path]])


def fit_centroids(points, k: int, seed=0, n_restarts: int = 10) -> np.ndarray:
    """Best-of-``n_restarts`` k-means centroids; ``seed`` may be an int or a SeedSequence."""
    return kmeans_fit(points, k, seed, n_init=n_restarts).centroids


def _build(points, owner, n_groups, Y, k, *, feature_mode, max_depth, min_leaf, seed, n_restarts, centroids=None):
    if centroids is None:
        centroids = fit_centroids(points, k, _seed_for(seed, 2, k), n_restarts)
    labels = assign_labels(points, centroids)
    feats = group_features(labels, owner, n_groups, k, feature_mode)
    tree = tree_fit(feats, Y, max_depth=max_depth, min_leaf=min_leaf)
    return Explainer(centroids, tree, feature_mode)


def build_explainer(
    bags,
    Y,
    k: int,
    *,
    feature_mode: str = "frequency",
    max_depth: int | None = 6,
    min_leaf: int = 5,
    seed=0,
    n_restarts: int = 10,
) -> Explainer:
    """Cluster all vectors of ``bags`` into ``k`` groups and fit a tree from
    per-bag cluster statistics to ``Y``.

    ``bags`` is a sequence of ``(n_i, width)`` arrays; ``Y`` holds one target
    per bag.
    """
    mats = [np.atleast_2d(np.asarray(b, dtype=float)) for b in bags]
    points = np.concatenate(mats, axis=0)
    owner = np.repeat(np.arange(len(mats)), [m.shape[0] for m in mats])
    Y = np.asarray(Y)
    if Y.shape != (len(mats),):
        raise ValueError(f"need one target per bag: {len(mats)} bags, {Y.shape} targets")
    return _build(
        points, owner, len(mats), Y, k, feature_mode=feature_mode, max_depth=max_depth,
        min_leaf=min_leaf, seed=seed, n_restarts=n_restarts,
    )


def surrogate_predict(e_inst: Explainer, e_sub: Explainer, reps: Representations):
    """``t(stats(s(stats(r(x)))))`` for every example, plus the sub-bag clusters s predicted."""
    if e_inst.centroids.shape[1] != reps.instances.shape[1]:
        raise ValueError("instance explainer width does not match the network's instance bag-layer")
    if e_sub.centroids.shape[1] != reps.subbags.shape[1]:
        raise ValueError("sub-bag explainer width does not match the network's sub-bag bag-layer")
    inst_feats = e_inst.features(reps.instances, reps.instance_owner, reps.n_subbags)
    sub_ids = e_inst.tree.predict(inst_feats)
    top_feats = group_features(sub_ids, reps.subbag_owner, reps.n_examples, e_sub.k, e_sub.feature_mode)
    return e_sub.tree.predict(top_feats), sub_ids


def fidelity(e_inst: Explainer, e_sub: Explainer, spec: NetworkSpec | None, X) -> float:
    """Fraction of examples on which the rule surrogate agrees with the network.

    ``X`` may be a dataset (representations are then computed with ``spec``)
    or precomputed :class:`Representations`.
    """
    reps = X if isinstance(X, Representations) else intermediate_representations(spec, X)
    pred, _ = surrogate_predict(e_inst, e_sub, reps)
    return float(np.mean(pred == reps.predictions))


@dataclass
class GridCell:
    k_sub: int
    k_inst: int
    fidelity: float | None
    error: str | None = None


@dataclass
class BestExplainer:
    e_inst: Explainer
    e_sub: Explainer
    fidelity: float
    grid: list = field(default_factory=list)

    @property
    def k_inst(self) -> int:
        return self.e_inst.k

    @property
    def k_sub(self) -> int:
        return self.e_sub.k


def default_feature_mode(spec: NetworkSpec) -> str:
    """Occurrence vectors when the instance-level aggregation is max, else frequencies."""
    aggs = {b.aggregator for b in spec.levels[0].bags}
    return "occurrence" if aggs == {"max"} else "frequency"


def find_best_explainer(
    spec: NetworkSpec,
    X_train,
    X_valid,
    k_max: int,
    *,
    feature_mode: str | None = None,
    max_depth: int | None = 6,
    min_leaf: int = 5,
    seed=0,
    n_restarts: int = 10,
) -> BestExplainer:
    """Grid-search ``k_sub, k_inst in [2, k_max]`` for the highest validation fidelity.

    For each ``k_sub`` the sub-bag explainer is trained on the network's own
    predictions; for each ``k_inst`` the instance explainer is trained to
    predict the sub-bag cluster of every training sub-bag. Cells that cannot be
    built (too few points) are reported in ``grid`` and skipped. Ties keep the
    lexicographically smallest ``(k_sub, k_inst)``.
    """
    if k_max < 2:
        raise ValueError(f"k_max must be >= 2, got {k_max}")
    mode = feature_mode or default_feature_mode(spec)
    if mode not in FEATURE_MODES:
        raise ValueError(f"feature_mode must be one of {FEATURE_MODES}, got {mode!r}")
    train = X_train if isinstance(X_train, Representations) else intermediate_representations(spec, X_train)
    valid = X_valid if isinstance(X_valid, Representations) else intermediate_representations(spec, X_valid)
    opts = dict(feature_mode=mode, max_depth=max_depth, min_leaf=min_leaf, seed=seed, n_restarts=n_restarts)

    inst_centroids = {}
    for k in range(2, k_max + 1):
        try:
            inst_centroids[k] = fit_centroids(train.instances, k, _seed_for(seed, 0, k), n_restarts)
        except ValueError as exc:
            inst_centroids[k] = exc

    grid, best = [], None
    for k_sub in range(2, k_max + 1):
        try:
            centroids = fit_centroids(train.subbags, k_sub, _seed_for(seed, 1, k_sub), n_restarts)
            e_sub = _build(
                train.subbags, train.subbag_owner, train.n_examples, train.predictions, k_sub,
                centroids=centroids, **opts,
            )
        except ValueError as exc:
            grid.extend(GridCell(k_sub, k, None, str(exc)) for k in range(2, k_max + 1))
            continue
        targets = e_sub.assign(train.subbags)
        for k_inst in range(2, k_max + 1):
            cent = inst_centroids[k_inst]
            if isinstance(cent, Exception):
                grid.append(GridCell(k_sub, k_inst, None, str(cent)))
                continue
            e_inst = _build(
                train.instances, train.instance_owner, train.n_subbags, targets, k_inst,
                centroids=cent, **opts,
            )
            fid = fidelity(e_inst, e_sub, None, valid)
            grid.append(GridCell(k_sub, k_inst, fid))
            if best is None or fid > best.fidelity:
                best = BestExplainer(e_inst, e_sub, fid)
    if best is None:
        raise ValueError("no grid cell could be built; reduce k_max or supply more data")
    best.grid = grid
    return best


# ---------------------------------------------------------------------------
# Rules and tracing
# ---------------------------------------------------------------------------


def _prefix(mode):
    return "o" if mode == "occurrence" else "f"


def class_names(num_classes: int) -> dict:
    if num_classes == 2:
        return {0: "negative", 1: "positive"}
    return {c: f"class{c}" for c in range(num_classes)}


def instance_rules(e_inst: Explainer) -> RuleSet:
    """Clauses of ``s``: instance-cluster statistics -> sub-bag cluster ``v``."""
    p = _prefix(e_inst.feature_mode)
    heads = {int(c): f"v{int(c) + 1}" for c in np.unique(e_inst.tree.value)}
    return extract_rules(
        e_inst.tree, head_name="s", feature_names=[f"{p}_u{i + 1}" for i in range(e_inst.k)],
        head_names=heads, binary_features=e_inst.feature_mode == "occurrence",
    )


def subbag_rules(e_sub: Explainer, num_classes: int = 2) -> RuleSet:
    """Clauses of ``t``: sub-bag-cluster statistics -> predicted class."""
    p = _prefix(e_sub.feature_mode)
    return extract_rules(
        e_sub.tree, head_name="t", feature_names=[f"{p}_v{i + 1}" for i in range(e_sub.k)],
        head_names=class_names(num_classes), binary_features=e_sub.feature_mode == "occurrence",
    )


def rules_text(e_inst: Explainer, e_sub: Explainer, num_classes: int = 2) -> str:
    return (
        "% s: sub-bag cluster from instance clusters\n"
        + instance_rules(e_inst).to_text()
        + "\n% t: top-bag label from sub-bag clusters\n"
        + subbag_rules(e_sub, num_classes).to_text()
        + "\n"
    )


def _positive_ids(rules: RuleSet, clause_index: int) -> set:
    """Features a clause requires to be present (o=1 or a lower bound)."""
    return {
        lit.feature
        for lit in rules.clauses[clause_index].body
        if (lit.op == "=" and lit.value == 1.0) or (lit.op == ">" and lit.value >= 0.0)
    }


@dataclass
class SurrogateModel:
    """The composed rule model ``t(s(r(x)))`` for a trained network."""

    spec: NetworkSpec
    e_inst: Explainer
    e_sub: Explainer

    def predict(self, X) -> np.ndarray:
        reps = intermediate_representations(self.spec, X)
        return surrogate_predict(self.e_inst, self.e_sub, reps)[0]


def trace_prediction(x, surrogate: SurrogateModel) -> dict:
    """Which clauses decided the surrogate's output for one top-bag, and why.

    The record lists each instance's cluster, the clause of ``s`` that fired
    for each sub-bag, the clause of ``t`` that fired for the top-bag, the
    cluster identifiers those clauses mention, and the sub-bags and instances
    whose clusters satisfy a presence literal of a fired clause.
    """
    reps = intermediate_representations(surrogate.spec, [x])
    e_inst, e_sub = surrogate.e_inst, surrogate.e_sub
    num_classes = surrogate.spec.num_classes
    s_rules, t_rules = instance_rules(e_inst), subbag_rules(e_sub, num_classes)
    inst_ids = e_inst.assign(reps.instances)
    inst_feats = group_features(inst_ids, reps.instance_owner, reps.n_subbags, e_inst.k, e_inst.feature_mode)
    sub_records, sub_ids = [], []
    for j in range(reps.n_subbags):
        ci = s_rules.fired(inst_feats[j])
        v = s_rules.clauses[ci].head
        sub_ids.append(v)
        members = np.nonzero(reps.instance_owner == j)[0]
        needed = _positive_ids(s_rules, ci)
        sub_records.append(
            {
                "subbag": j,
                "instance_clusters": [f"u{int(inst_ids[m]) + 1}" for m in members],
                "cluster": f"v{v + 1}",
                "clause": s_rules.clause_text(s_rules.clauses[ci]),
                "referenced": [f"u{f + 1}" for f in s_rules.referenced_features(ci)],
                "critical_instances": [
                    int(reps.instance_coords[m, 2]) for m in members if int(inst_ids[m]) in needed
                ],
            }
        )
    top_feats = group_features(np.array(sub_ids), reps.subbag_owner, 1, e_sub.k, e_sub.feature_mode)
    ti = t_rules.fired(top_feats[0])
    needed = _positive_ids(t_rules, ti)
    pred = t_rules.clauses[ti].head
    names = class_names(num_classes)
    return {
        "prediction": names.get(pred, str(pred)),
        "network_prediction": names.get(int(reps.predictions[0]), str(int(reps.predictions[0]))),
        "top_clause": t_rules.clause_text(t_rules.clauses[ti]),
        "top_referenced": [f"v{f + 1}" for f in t_rules.referenced_features(ti)],
        "critical_subbags": [j for j, v in enumerate(sub_ids) if v in needed],
        "subbags": sub_records,
    }


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def explainer_to_dict(e_inst: Explainer, e_sub: Explainer) -> dict:
    return {
        "k_inst": e_inst.k,
        "k_sub": e_sub.k,
        "centroids_inst": e_inst.centroids.tolist(),
        "centroids_sub": e_sub.centroids.tolist(),
        "tree_inst": e_inst.tree.to_dict(),
        "tree_sub": e_sub.tree.to_dict(),
        "feature_mode": e_inst.feature_mode,
    }


def explainer_from_dict(doc: dict) -> tuple:
    mode = doc["feature_mode"]
    e_inst = Explainer(np.asarray(doc["centroids_inst"], float), DecisionTree.from_dict(doc["tree_inst"]), mode)
    e_sub = Explainer(np.asarray(doc["centroids_sub"], float), DecisionTree.from_dict(doc["tree_sub"]), mode)
    if e_inst.k != doc["k_inst"] or e_sub.k != doc["k_sub"]:
        raise ValueError("explainer file: centroid counts disagree with k_inst/k_sub")
    return e_inst, e_sub


def save_explainer(e_inst: Explainer, e_sub: Explainer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(explainer_to_dict(e_inst, e_sub), fh, separators=(",", ":"))
        fh.write("\n")


def load_explainer(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        return explainer_from_dict(json.load(fh))


def write_grid(grid, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k_sub", "k_inst", "fidelity"])
        for cell in grid:
            writer.writerow([cell.k_sub, cell.k_inst, "" if cell.fidelity is None else repr(cell.fidelity)])


# ---------------------------------------------------------------------------
# Estimator
# ---------------------------------------------------------------------------


class RuleExplainer(BaseEstimator):
    """Fit the rule surrogate of a trained two-level bag network.

    Parameters
    ----------
    network : NetworkSpec or BagNetworkClassifier
        The trained network to explain.
    k_max : int, default=8
        Largest cluster count tried at either level.
    feature_mode : {"auto", "frequency", "occurrence"}, default="auto"
        Statistics fed to the trees. ``"auto"`` picks occurrence vectors when
        the instance-level aggregation is max.
    max_depth, min_leaf : tree regularisation.
    n_restarts : int, default=10
        k-means restarts per cluster count.
    random_state : int, default=0
    """

    def __init__(self, network=None, k_max=8, feature_mode="auto", max_depth=6, min_leaf=5,
                 n_restarts=10, random_state=0):
        self.network = network
        self.k_max = k_max
        self.feature_mode = feature_mode
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.n_restarts = n_restarts
        self.random_state = random_state

    def _spec(self) -> NetworkSpec:
        net = self.network
        if net is None:
            raise ValueError("RuleExplainer needs a trained network")
        if isinstance(net, NetworkSpec):
            return net
        check_is_fitted(net, "network_")
        return net.network_

    def fit(self, X, y=None, X_valid=None):
        """Search cluster counts on ``X_valid`` (``X`` itself when omitted). ``y`` is ignored:
        the surrogate imitates the network's predictions, not the ground truth."""
        spec = self._spec()
        mode = None if self.feature_mode == "auto" else self.feature_mode
        best = find_best_explainer(
            spec, X, X if X_valid is None else X_valid, self.k_max, feature_mode=mode,
            max_depth=self.max_depth, min_leaf=self.min_leaf, seed=self.random_state,
            n_restarts=self.n_restarts,
        )
        self.explainer_inst_, self.explainer_sub_ = best.e_inst, best.e_sub
        self.k_inst_, self.k_sub_ = best.k_inst, best.k_sub
        self.valid_fidelity_ = best.fidelity
        self.grid_ = best.grid
        return self

    @property
    def surrogate_(self) -> SurrogateModel:
        check_is_fitted(self, "explainer_inst_")
        return SurrogateModel(self._spec(), self.explainer_inst_, self.explainer_sub_)

    def predict(self, X):
        return self.surrogate_.predict(X)

    def score(self, X, y=None):
        """Fidelity to the network on ``X``."""
        check_is_fitted(self, "explainer_inst_")
        return fidelity(self.explainer_inst_, self.explainer_sub_, self._spec(), X)

    def rules(self) -> str:
        check_is_fitted(self, "explainer_inst_")
        return rules_text(self.explainer_inst_, self.explainer_sub_, self._spec().num_classes)

    def trace(self, x) -> dict:
        return trace_prediction(x, self.surrogate_)
