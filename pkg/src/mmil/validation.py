"""Input checking for bag-structured data, in the spirit of ``sklearn.utils.check_array``."""

from __future__ import annotations

import numpy as np

from .bagdata import Bag, MILDataset, MMILDataset, TopBag


def _to_matrix(bag, where: str) -> np.ndarray:
    try:
        arr = np.asarray(bag, dtype=float)
    except ValueError as exc:
        raise ValueError(f"ragged instances at {where}") from exc
    if arr.ndim != 2:
        raise ValueError(f"expected a bag of vectors at {where}, got array of shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"empty bag at {where}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite value at {where}")
    return arr


def nesting_depth(X) -> int:
    """Number of bag levels in ``X``: 2 for top-bags of sub-bags, 1 for flat bags."""
    if isinstance(X, (MMILDataset, MILDataset)):
        return X.depth
    if len(X) == 0:
        raise ValueError("cannot infer nesting depth of an empty collection")
    first = X[0]
    if isinstance(first, TopBag):
        return 2
    if isinstance(first, Bag):
        return 1
    if len(first) == 0:
        raise ValueError("empty bag at example 0")
    inner = first[0]
    if np.ndim(inner) == 0 or len(inner) == 0:
        raise ValueError("cannot infer nesting depth: example 0 starts with an empty or scalar entry")
    # a sub-bag's first element is a vector; an instance's first element is a scalar
    return 2 if np.ndim(inner[0]) >= 1 else 1


def check_bags(X, depth: int | None = None, feature_dim: int | None = None):
    """Normalise a collection of bags to float arrays and check its structure.

    Parameters
    ----------
    X : MMILDataset, MILDataset, sequence of TopBag/Bag, or nested sequences
        Top-bags as sequences of ``(n_j, d)`` instance matrices, or flat bags
        as ``(n, d)`` matrices.
    depth : int, optional
        Expected nesting depth (2 for MMIL, 1 for MIL). Inferred if omitted.
    feature_dim : int, optional
        Expected instance width.

    Returns
    -------
    bags : list
        ``list[list[ndarray]]`` for depth 2, ``list[ndarray]`` for depth 1.
    depth : int
    feature_dim : int
    """
    inferred = nesting_depth(X)
    if depth is not None and depth != inferred:
        raise ValueError(f"expected bags nested {depth} level(s) deep, got {inferred}")
    depth = inferred
    bags = []
    for i, ex in enumerate(X):
        if isinstance(ex, TopBag):
            ex = ex.subbags
        elif isinstance(ex, Bag):
            ex = ex.instances
        if depth == 2:
            if len(ex) == 0:
                raise ValueError(f"empty top-bag at example {i}")
            bags.append([_to_matrix(s, f"example {i}, subbag {j}") for j, s in enumerate(ex)])
        else:
            bags.append(_to_matrix(ex, f"example {i}"))
    if not bags:
        raise ValueError("no examples")
    widths = {m.shape[1] for b in bags for m in (b if depth == 2 else [b])}
    if len(widths) != 1:
        raise ValueError(f"inconsistent instance widths {sorted(widths)}")
    width = widths.pop()
    if feature_dim is not None and width != feature_dim:
        raise ValueError(f"feature_dim mismatch: data has {width}, expected {feature_dim}")
    return bags, depth, width


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be one-dimensional, got shape {y.shape}")
    if y.shape[0] != n_samples:
        raise ValueError(f"length mismatch: {n_samples} examples but {y.shape[0]} labels")
    return y


def as_dataset_labels(X):
    """Labels stored on a dataset-like ``X``, or None."""
    if isinstance(X, (MMILDataset, MILDataset)):
        return X.labels
    if len(X) and isinstance(X[0], (TopBag, Bag)):
        return np.array([ex.label for ex in X], dtype=int)
    return None
