"""Nested-bag datasets: containers, validation, flattening, IO and a synthetic generator.

A multi-multi-instance (MMIL) example is a *top-bag*: a multiset of *sub-bags*,
each a multiset of instance vectors. Multisets are stored as sequences; every
consumer in this package is permutation-invariant, so order carries no meaning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TopBag",
    "Bag",
    "MMILDataset",
    "MILDataset",
    "DatasetError",
    "SevenNotThreeLatent",
    "validate",
    "flatten",
    "generate_seven_not_three",
    "seven_not_three_subbag_label",
    "seven_not_three_topbag_label",
    "dataset_to_dict",
    "dataset_from_dict",
    "save_dataset",
    "load_dataset",
    "save_latent",
    "load_latent",
    "datasets_equal",
]


class DatasetError(ValueError):
    """Raised when a dataset file or object violates the dataset schema.

    ``violations`` holds one message per problem found.
    """

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


def _as_subbag(instances) -> np.ndarray | tuple[np.ndarray, ...]:
    # Ragged input is kept as a tuple of rows so validate() can name the bad instance.
    try:
        arr = np.asarray(instances, dtype=float)
    except ValueError:
        return tuple(np.asarray(row, dtype=float) for row in instances)
    if arr.ndim == 1 and arr.size == 0:
        return arr.reshape(0, 0)
    if arr.ndim != 2:
        return tuple(np.atleast_1d(np.asarray(row, dtype=float)) for row in instances)
    return arr


@dataclass(frozen=True, eq=False)
class TopBag:
    """One MMIL example: sub-bags of instance vectors plus the observed label."""

    subbags: tuple
    label: int
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "subbags", tuple(_as_subbag(s) for s in self.subbags))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "id", str(self.id))

    @property
    def n_instances(self) -> int:
        return sum(len(s) for s in self.subbags)


@dataclass(frozen=True, eq=False)
class Bag:
    """One MIL example: a flat bag of instance vectors."""

    instances: np.ndarray
    label: int
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "instances", _as_subbag(self.instances))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "id", str(self.id))


@dataclass(frozen=True, eq=False)
class MMILDataset:
    examples: tuple
    feature_dim: int
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return MMILDataset(self.examples[idx], self.feature_dim, self.num_classes)
        return self.examples[idx]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=int)

    @property
    def depth(self) -> int:
        return 2

    def subset(self, indices: Iterable[int]) -> "MMILDataset":
        return MMILDataset(
            tuple(self.examples[i] for i in indices), self.feature_dim, self.num_classes
        )


@dataclass(frozen=True, eq=False)
class MILDataset:
    examples: tuple
    feature_dim: int
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return MILDataset(self.examples[idx], self.feature_dim, self.num_classes)
        return self.examples[idx]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=int)

    @property
    def depth(self) -> int:
        return 1

    def subset(self, indices: Iterable[int]) -> "MILDataset":
        return MILDataset(
            tuple(self.examples[i] for i in indices), self.feature_dim, self.num_classes
        )


def _check_bag(instances, where: str, feature_dim: int, kind: str) -> list[str]:
    problems = []
    if len(instances) == 0:
        return [f"empty {kind} at {where}"]
    for ell, inst in enumerate(instances):
        inst = np.asarray(inst)
        if inst.ndim != 1 or inst.shape[0] != feature_dim:
            got = inst.shape[0] if inst.ndim == 1 else inst.shape
            problems.append(
                f"instance length {got} != feature_dim {feature_dim} at {where}, instance {ell}"
            )
        elif not np.all(np.isfinite(inst)):
            problems.append(f"non-finite value at {where}, instance {ell}")
    return problems


def validate(dataset: MMILDataset | MILDataset) -> list[str]:
    """Return every invariant violation in ``dataset``; an empty list means valid."""
    problems = []
    if not isinstance(dataset.feature_dim, (int, np.integer)) or dataset.feature_dim < 1:
        problems.append(f"feature_dim must be a positive integer, got {dataset.feature_dim!r}")
    if not isinstance(dataset.num_classes, (int, np.integer)) or dataset.num_classes < 2:
        problems.append(f"num_classes must be an integer >= 2, got {dataset.num_classes!r}")
    if len(dataset.examples) == 0:
        problems.append("dataset has no examples")
    if problems:
        return problems
    seen = set()
    for ex in dataset.examples:
        name = f"example {ex.id}"
        if ex.id in seen:
            problems.append(f"duplicate id {ex.id!r}")
        seen.add(ex.id)
        if not 0 <= ex.label < dataset.num_classes:
            problems.append(
                f"label {ex.label} out of range [0, {dataset.num_classes}) at {name}"
            )
        if isinstance(ex, TopBag):
            if len(ex.subbags) == 0:
                problems.append(f"empty top-bag at {name}")
            for j, sb in enumerate(ex.subbags):
                problems.extend(
                    _check_bag(sb, f"{name}, subbag {j}", dataset.feature_dim, "sub-bag")
                )
        else:
            problems.extend(_check_bag(ex.instances, name, dataset.feature_dim, "bag"))
    return problems


def _require_valid(dataset):
    problems = validate(dataset)
    if problems:
        raise DatasetError(f"invalid dataset: {problems[0]}", problems)


def flatten(dataset: MMILDataset) -> MILDataset:
    """Merge the sub-bags of every top-bag into one flat bag (labels and ids kept)."""
    _require_valid(dataset)
    flat = []
    for ex in dataset.examples:
        flat.append(Bag(np.concatenate([np.asarray(s) for s in ex.subbags], axis=0), ex.label, ex.id))
    return MILDataset(tuple(flat), dataset.feature_dim, dataset.num_classes)


# ---------------------------------------------------------------------------
# Synthetic "seven and not three" task
# ---------------------------------------------------------------------------

SEVEN, THREE = 7, 3


def seven_not_three_subbag_label(classes: Iterable[int]) -> int:
    classes = set(int(c) for c in classes)
    return int(SEVEN in classes and THREE not in classes)


def seven_not_three_topbag_label(subbag_labels: Iterable[int]) -> int:
    return int(any(subbag_labels))


@dataclass
class SevenNotThreeLatent:
    """Latent labels of a generated dataset, keyed by example id."""

    instance_classes: dict = field(default_factory=dict)
    subbag_labels: dict = field(default_factory=dict)


def generate_seven_not_three(
    num_topbags: int,
    class_count: int = 10,
    noise_std: float = 0.0,
    seed: int = 0,
    cardinality: tuple[int, int] = (2, 6),
) -> tuple[MMILDataset, SevenNotThreeLatent]:
    """Sample a balanced dataset for the "contains a 7 and no 3" task.

    Instances are one-hot vectors of their latent class plus isotropic Gaussian
    noise of scale ``noise_std``. A sub-bag is positive iff it holds a class-7
    instance and no class-3 instance; a top-bag is positive iff any sub-bag is.
    Top-bag and sub-bag cardinalities are uniform on ``cardinality`` (inclusive).
    Labels are balanced exactly by rejecting candidates whose class quota is full.
    """
    if class_count < 8:
        raise ValueError(f"class_count must be >= 8 so classes 3 and 7 exist, got {class_count}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if num_topbags < 1:
        raise ValueError(f"num_topbags must be >= 1, got {num_topbags}")
    lo, hi = cardinality
    rng = np.random.default_rng(seed)
    quota = {1: num_topbags // 2, 0: num_topbags - num_topbags // 2}
    examples, latent = [], SevenNotThreeLatent()
    while len(examples) < num_topbags:
        n_sub = int(rng.integers(lo, hi + 1))
        classes = [rng.integers(0, class_count, size=int(rng.integers(lo, hi + 1))) for _ in range(n_sub)]
        sub_labels = [seven_not_three_subbag_label(c) for c in classes]
        label = seven_not_three_topbag_label(sub_labels)
        if quota[label] == 0:
            continue
        quota[label] -= 1
        subbags = []
        for c in classes:
            x = np.zeros((len(c), class_count))
            x[np.arange(len(c)), c] = 1.0
            if noise_std > 0:
                x += noise_std * rng.standard_normal(x.shape)
            subbags.append(x)
        ex_id = f"ex{len(examples)}"
        examples.append(TopBag(tuple(subbags), label, ex_id))
        latent.instance_classes[ex_id] = [[int(v) for v in c] for c in classes]
        latent.subbag_labels[ex_id] = sub_labels
    return MMILDataset(tuple(examples), class_count, 2), latent


# ---------------------------------------------------------------------------
# JSON IO
# ---------------------------------------------------------------------------


def _rows(bag) -> list:
    return [[float(v) for v in np.asarray(row).ravel()] for row in bag]


def dataset_to_dict(dataset: MMILDataset | MILDataset) -> dict:
    out = []
    for ex in dataset.examples:
        if isinstance(ex, TopBag):
            out.append({"id": ex.id, "label": ex.label, "subbags": [_rows(s) for s in ex.subbags]})
        else:
            out.append({"id": ex.id, "label": ex.label, "bag": _rows(ex.instances)})
    return {
        "feature_dim": int(dataset.feature_dim),
        "num_classes": int(dataset.num_classes),
        "examples": out,
    }


def _field(obj: dict, key: str, where: str, kind):
    if not isinstance(obj, dict):
        raise DatasetError(f"schema error: {where} must be an object")
    if key not in obj:
        raise DatasetError(f"schema error: missing field {key!r} in {where}", [f"missing {key}"])
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise DatasetError(f"schema error: field {key!r} in {where} must be an integer")
    if kind is list and not isinstance(value, list):
        raise DatasetError(f"schema error: field {key!r} in {where} must be an array")
    return value


def _numeric_bag(rows, where: str) -> list:
    if not isinstance(rows, list):
        raise DatasetError(f"schema error: {where} must be an array of instances")
    for ell, row in enumerate(rows):
        if not isinstance(row, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in row
        ):
            raise DatasetError(f"schema error: {where}, instance {ell} must be an array of numbers")
    return rows


def dataset_from_dict(doc: dict, *, check: bool = True) -> MMILDataset | MILDataset:
    """Build a dataset from its JSON document, raising DatasetError on schema problems."""
    feature_dim = _field(doc, "feature_dim", "dataset", int)
    num_classes = _field(doc, "num_classes", "dataset", int)
    raw = _field(doc, "examples", "dataset", list)
    examples = []
    nested = None
    for i, ex in enumerate(raw):
        where = f"examples[{i}]"
        ex_id = str(_field(ex, "id", where, str))
        label = _field(ex, "label", where, int)
        is_nested = "subbags" in ex
        if nested is None:
            nested = is_nested
        elif nested != is_nested:
            raise DatasetError(f"schema error: {where} mixes 'subbags' and 'bag' examples")
        if is_nested:
            subbags = _field(ex, "subbags", where, list)
            subbags = [_numeric_bag(s, f"{where}.subbags[{j}]") for j, s in enumerate(subbags)]
            examples.append(TopBag(tuple(subbags), label, ex_id))
        else:
            bag = _numeric_bag(_field(ex, "bag", where, list), f"{where}.bag")
            examples.append(Bag(bag, label, ex_id))
    cls = MILDataset if nested is False else MMILDataset
    dataset = cls(tuple(examples), feature_dim, num_classes)
    if check:
        _require_valid(dataset)
    return dataset


def _dump(doc, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def save_dataset(dataset: MMILDataset | MILDataset, path) -> None:
    _dump(dataset_to_dict(dataset), path)


def load_dataset(path) -> MMILDataset | MILDataset:
    """Read a dataset file; malformed JSON and schema violations raise DatasetError."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(
            f"parse error in {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return dataset_from_dict(doc)


def latent_path_for(path) -> Path:
    path = Path(path)
    name = path.name[: -len(".json")] if path.name.endswith(".json") else path.name
    return path.with_name(name + ".latent.json")


def save_latent(latent: SevenNotThreeLatent, path) -> None:
    _dump(
        {"instance_classes": latent.instance_classes, "subbag_labels": latent.subbag_labels},
        path,
    )


def load_latent(path) -> SevenNotThreeLatent:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return SevenNotThreeLatent(doc["instance_classes"], doc["subbag_labels"])


def datasets_equal(a, b, *, atol: float = 0.0) -> bool:
    """Structural equality: same metadata, ids, labels and instance values in order."""
    if type(a) is not type(b) or a.feature_dim != b.feature_dim or a.num_classes != b.num_classes:
        return False
    if len(a) != len(b):
        return False
    for x, y in zip(a.examples, b.examples):
        if x.id != y.id or x.label != y.label:
            return False
        xs = x.subbags if isinstance(x, TopBag) else (x.instances,)
        ys = y.subbags if isinstance(y, TopBag) else (y.instances,)
        if len(xs) != len(ys):
            return False
        for p, q in zip(xs, ys):
            p, q = np.asarray(p), np.asarray(q)
            if p.shape != q.shape:
                return False
            same = np.allclose(p, q, rtol=0, atol=atol) if atol else np.array_equal(p, q)
            if not same:
                return False
    return True


def cardinality_summary(dataset: MMILDataset) -> dict:
    sizes = [len(s) for ex in dataset.examples for s in ex.subbags]
    tops = [len(ex.subbags) for ex in dataset.examples]
    return {
        "topbags": len(dataset),
        "subbags": len(sizes),
        "instances": int(sum(sizes)),
        "mean_subbag_size": float(np.mean(sizes)) if sizes else math.nan,
        "mean_topbag_size": float(np.mean(tops)) if tops else math.nan,
    }
