"""Ranking evaluation for recovering deleted occurrences in a 0/1 matrix.

For region ``i`` the candidates ``Z_i`` are the items whose masked entry is 0
and the targets ``Q_i`` those among them whose true entry is 1. Candidates are
ranked by descending score (ties by ascending item index).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

MAP_VARIANTS = ("literal", "standard")


def mask_matrix(a, percent: float, seed=0):
    """Hide ``round(percent% * count_j)`` of the ones in every column ``j``.

    Returns ``(masked, skipped)`` where ``skipped`` lists columns without any
    ones. Rounding is half-up.
    """
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("occurrence matrix must be binary")
    if not 0 <= percent < 100:
        raise ValueError(f"percent must lie in [0, 100), got {percent}")
    rng = np.random.default_rng(seed)
    masked = a.astype(int).copy()
    skipped = []
    for j in range(a.shape[1]):
        ones = np.nonzero(a[:, j] == 1)[0]
        if ones.size == 0:
            skipped.append(j)
            continue
        n_flip = int(math.floor(percent / 100.0 * ones.size + 0.5))
        if n_flip:
            masked[rng.choice(ones, size=n_flip, replace=False), j] = 0
    return masked, skipped


def ranking(scores, candidates) -> np.ndarray:
    """Candidates sorted by descending score, ties by ascending index."""
    candidates = np.asarray(candidates, dtype=int)
    scores = np.asarray(scores, dtype=float)[candidates]
    return candidates[np.lexsort((candidates, -scores))]


def map_from_relevance(relevance, n_relevant: int | None = None, variant: str = "literal") -> float:
    """Score a ranked 0/1 relevance list.

    ``literal``: mean over ``t = 1..|Q|`` of precision at rank ``t``.
    ``standard``: mean of precision at the rank of each relevant item (usual AP).
    """
    rel = np.asarray(relevance, dtype=float)
    q = int(rel.sum()) if n_relevant is None else n_relevant
    if q == 0:
        raise ValueError("no relevant items: score undefined")
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, rel.size + 1)
    if variant == "literal":
        return float(precision[:q].mean())
    if variant == "standard":
        return float(precision[rel == 1].sum() / q)
    raise ValueError(f"variant must be one of {MAP_VARIANTS}, got {variant!r}")


def map_region(scores, truth_row, mask_row, variant: str = "literal") -> float:
    """Ranking score of one region; 1.0 when every target outranks every other candidate."""
    truth_row = np.asarray(truth_row)
    mask_row = np.asarray(mask_row)
    if truth_row.shape != mask_row.shape or np.shape(scores) != truth_row.shape:
        raise ValueError("scores, truth and mask rows must have equal length")
    candidates = np.nonzero(mask_row == 0)[0]
    if candidates.size == 0:
        raise ValueError("region has no masked-out candidates")
    order = ranking(scores, candidates)
    rel = truth_row[order]
    if rel.sum() == 0:
        raise ValueError("region has no deleted occurrences: score undefined")
    return map_from_relevance(rel, variant=variant)


def mean_map(values) -> float:
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        raise ValueError("no regions to average")
    return float(np.mean(values))


@dataclass
class RegionScore:
    region: int
    n_candidates: int
    n_targets: int
    score: float | None


def evaluate_matrix(scores, truth, masked, variant: str = "literal"):
    """Per-region scores (regions without targets get ``None``) and their mean."""
    scores, truth, masked = (np.asarray(m) for m in (scores, truth, masked))
    if not (scores.shape == truth.shape == masked.shape):
        raise ValueError(f"shape mismatch: scores {scores.shape}, truth {truth.shape}, masked {masked.shape}")
    if np.any(masked > truth):
        raise ValueError("masked matrix has ones where the truth has zeros")
    rows = []
    for i in range(truth.shape[0]):
        z = int(np.sum(masked[i] == 0))
        q = int(np.sum((masked[i] == 0) & (truth[i] == 1)))
        value = map_region(scores[i], truth[i], masked[i], variant) if q else None
        rows.append(RegionScore(i, z, q, value))
    return rows, mean_map([r.score for r in rows])


def read_matrix(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row and not row[0].startswith("#")]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: rows have differing lengths {sorted(widths)}")
    return np.array(rows)


def write_matrix(m, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(m):
            writer.writerow([int(v) if float(v).is_integer() else repr(float(v)) for v in row])


def write_report(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["region", "Z", "Q", "mAP"])
        for r in rows:
            writer.writerow([r.region, r.n_candidates, r.n_targets, "" if r.score is None else repr(r.score)])
