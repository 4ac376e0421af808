"""Turn graph learning problems into bag datasets.

Node classification: each labelled node becomes a top-bag whose sub-bags are the
node itself and each of its neighbours; a sub-bag holds that node's tokens (as
one-hot vectors) or its single feature vector. Graph classification: each graph
becomes a top-bag with one sub-bag per node, holding the node's closed
neighbourhood described by degree features.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bagdata import MILDataset, MMILDataset, TopBag, flatten

OOV = "<unk>"


@dataclass
class Graph:
    """An undirected graph with optional node attributes and labels.

    ``features`` maps a node to a real vector or to a list of tokens.
    ``labels`` holds node labels (node tasks); ``label`` the graph label
    (graph tasks). Edges are symmetrised, deduplicated and stripped of self-loops.
    """

    nodes: list
    edges: list = field(default_factory=list)
    features: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    label: int | None = None
    years: dict = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        self.nodes = list(self.nodes)
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise ValueError("duplicate node identifiers")
        order = {v: i for i, v in enumerate(self.nodes)}
        adj = {v: set() for v in self.nodes}
        for u, v in self.edges:
            if u not in known or v not in known:
                missing = u if u not in known else v
                raise ValueError(f"edge ({u}, {v}) references unknown node {missing!r}")
            if u != v:
                adj[u].add(v)
                adj[v].add(u)
        self._adj = {v: sorted(ns, key=order.__getitem__) for v, ns in adj.items()}
        self.edges = sorted(
            {tuple(sorted((u, v), key=order.__getitem__)) for u in adj for v in adj[u]},
            key=lambda e: (order[e[0]], order[e[1]]),
        )

    def neighbors(self, v) -> list:
        return self._adj[v]

    def degree(self, v) -> int:
        return len(self._adj[v])

    def closed_neighborhood(self, v) -> list:
        return [v] + self._adj[v]


def build_vocabulary(graph: Graph, nodes=None) -> dict:
    """Token -> column index from the tokens of ``nodes`` (all nodes by default).

    Column 0 is reserved for tokens outside the vocabulary.
    """
    nodes = graph.nodes if nodes is None else nodes
    tokens = sorted({str(t) for v in nodes for t in _tokens_or_empty(graph.features.get(v))})
    vocab = {OOV: 0}
    for t in tokens:
        vocab[t] = len(vocab)
    return vocab


def _tokens_or_empty(feat):
    if feat is None or _is_vector(feat):
        return []
    return feat


def _is_vector(feat) -> bool:
    if isinstance(feat, np.ndarray):
        return feat.dtype.kind in "fiu"
    return len(feat) > 0 and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in feat)


def has_token_features(graph: Graph) -> bool:
    return any(not _is_vector(f) for f in graph.features.values() if f is not None and len(f))


def _node_instances(graph: Graph, v, vocab) -> np.ndarray:
    feat = graph.features.get(v)
    if feat is None or len(feat) == 0:
        raise ValueError(f"node {v!r} has no features")
    if _is_vector(feat):
        return np.asarray(feat, dtype=float)[None, :]
    if vocab is None:
        raise ValueError("token features need a vocabulary")
    out = np.zeros((len(feat), len(vocab)))
    out[np.arange(len(feat)), [vocab.get(str(t), 0) for t in feat]] = 1.0
    return out


def node_to_mmil(graph: Graph, nodes=None, vocabulary=None, num_classes: int | None = None) -> MMILDataset:
    """One top-bag per labelled node: sub-bags for the node and each neighbour."""
    nodes = [v for v in graph.nodes if v in graph.labels] if nodes is None else list(nodes)
    if not nodes:
        raise ValueError("no labelled nodes to decompose")
    if vocabulary is None and has_token_features(graph):
        vocabulary = build_vocabulary(graph)
    examples = []
    for v in nodes:
        if v not in graph.labels:
            raise ValueError(f"node {v!r} has no label")
        subbags = tuple(_node_instances(graph, u, vocabulary) for u in graph.closed_neighborhood(v))
        examples.append(TopBag(subbags, int(graph.labels[v]), str(v)))
    widths = {s.shape[1] for ex in examples for s in ex.subbags}
    if len(widths) != 1:
        raise ValueError(f"node feature vectors have differing lengths {sorted(widths)}")
    if num_classes is None:
        num_classes = max(2, max(int(c) for c in graph.labels.values()) + 1)
    return MMILDataset(tuple(examples), widths.pop(), num_classes)


def node_to_mil(graph: Graph, nodes=None, vocabulary=None, num_classes: int | None = None) -> MILDataset:
    """Flat bag of all neighbourhood tokens per labelled node."""
    return flatten(node_to_mmil(graph, nodes, vocabulary, num_classes))


def max_degree(graphs) -> int:
    return max((g.degree(v) for g in graphs for v in g.nodes), default=0)


def degree_vector(degree: int, max_deg: int, variant: str = "strict") -> np.ndarray:
    """Entries ``i = 1..max_deg`` equal ``1/sqrt(degree)`` when ``i < degree``
    (``"strict"``) or ``i <= degree`` (``"inclusive"``), else 0."""
    if variant not in ("strict", "inclusive"):
        raise ValueError(f"degree variant must be 'strict' or 'inclusive', got {variant!r}")
    i = np.arange(1, max_deg + 1)
    on = i < degree if variant == "strict" else i <= degree
    return np.where(on, 1.0 / np.sqrt(max(degree, 1)), 0.0)


def degree_features(graphs, variant: str = "strict", max_deg: int | None = None) -> list:
    """Per-graph dicts mapping each node to its degree feature vector."""
    graphs = list(graphs)
    max_deg = max_degree(graphs) if max_deg is None else max_deg
    if max_deg < 1:
        raise ValueError("degree features need at least one edge (maximum degree >= 1)")
    return [{v: degree_vector(g.degree(v), max_deg, variant) for v in g.nodes} for g in graphs]


def graph_to_mmil(graphs, variant: str = "strict", num_classes: int | None = None) -> MMILDataset:
    """One top-bag per graph; one sub-bag per node holding its closed neighbourhood."""
    graphs = list(graphs)
    for g in graphs:
        if not g.nodes:
            raise ValueError(f"graph {g.id!r} is empty")
        if g.label is None:
            raise ValueError(f"graph {g.id!r} has no label")
    feats = degree_features(graphs, variant)
    examples = []
    for gi, (g, f) in enumerate(zip(graphs, feats)):
        subbags = tuple(np.stack([f[u] for u in g.closed_neighborhood(v)]) for v in g.nodes)
        examples.append(TopBag(subbags, int(g.label), g.id or f"g{gi}"))
    if num_classes is None:
        num_classes = max(2, max(int(g.label) for g in graphs) + 1)
    return MMILDataset(tuple(examples), examples[0].subbags[0].shape[1], num_classes)


def temporal_split(years, fractions=(0.4, 0.2, 0.4)) -> dict:
    """Split items by year so train holds the oldest ~fractions[0] of them.

    ``yr1`` (``yr2``) is the smallest year whose cumulative share reaches
    ``fractions[0]`` (``fractions[0] + fractions[1]``). Train is ``year <= yr1``,
    validation ``yr1 < year <= yr2`` and test ``year > yr2``. ``years`` is a
    sequence (indices are returned) or a mapping (keys are returned).
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    keys = list(years.keys()) if isinstance(years, dict) else list(range(len(years)))
    values = np.array([years[k] for k in keys]) if isinstance(years, dict) else np.asarray(years)
    if values.size == 0:
        raise ValueError("no years given")
    uniq, counts = np.unique(values, return_counts=True)
    cum = np.cumsum(counts)
    n = values.size
    eps = 1e-9 * n

    def threshold(frac):
        return uniq[int(np.argmax(cum >= frac * n - eps))]

    yr1 = threshold(fractions[0])
    yr2 = threshold(fractions[0] + fractions[1])
    parts = {
        "train": values <= yr1,
        "valid": (values > yr1) & (values <= yr2),
        "test": values > yr2,
    }
    out = {"yr1": yr1.item(), "yr2": yr2.item()}
    for name, mask in parts.items():
        if not mask.any():
            raise ValueError(f"temporal split leaves the {name} split empty (yr1={yr1}, yr2={yr2})")
        out[name] = [keys[i] for i in np.nonzero(mask)[0]]
    return out


# ---------------------------------------------------------------------------
# File readers
# ---------------------------------------------------------------------------


def _csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            yield [c.strip() for c in row]


def read_edges(path) -> list:
    edges = []
    for lineno, row in enumerate(_csv_rows(path), 1):
        if len(row) < 2:
            raise ValueError(f"{path}: row {lineno} needs two node ids")
        edges.append((row[0], row[1]))
    return edges


def read_node_features(path) -> dict:
    return {row[0]: [float(v) for v in row[1:]] for row in _csv_rows(path)}


def read_node_texts(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {str(k): [str(t) for t in v] for k, v in doc.items()}


def read_mapping(path, cast=int) -> dict:
    return {row[0]: cast(row[1]) for row in _csv_rows(path)}


def load_graph(edges, features=None, texts=None, labels=None, years=None, nodes=None) -> Graph:
    """Assemble a node-task graph from the CSV/JSON inputs."""
    edge_list = read_edges(edges)
    feats = {}
    if features:
        feats.update(read_node_features(features))
    if texts:
        feats.update(read_node_texts(texts))
    label_map = read_mapping(labels) if labels else {}
    year_map = read_mapping(years) if years else {}
    names = list(dict.fromkeys(
        (nodes or []) + list(feats) + [u for e in edge_list for u in e] + list(label_map)
    ))
    return Graph(names, edge_list, feats, label_map, years=year_map)


def load_graph_collection(edges, graph_index, labels) -> list:
    """Split one edge list into graphs using a ``node,graph`` index and ``graph,label`` labels."""
    owner = read_mapping(graph_index, cast=str)
    label_map = read_mapping(labels)
    members = {}
    for node, gid in owner.items():
        members.setdefault(gid, []).append(node)
    edge_sets = {gid: [] for gid in members}
    for u, v in read_edges(edges):
        if owner.get(u) != owner.get(v) or u not in owner:
            raise ValueError(f"edge ({u}, {v}) crosses graphs or names an unindexed node")
        edge_sets[owner[u]].append((u, v))
    return [
        Graph(members[gid], edge_sets[gid], label=label_map[gid], id=str(gid))
        for gid in members
    ]


def save_vocabulary(vocab: dict, path) -> None:
    Path(path).write_text(json.dumps(vocab, sort_keys=True) + "\n", encoding="utf-8")
