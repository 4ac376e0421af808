import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmil.bagdata import datasets_equal, flatten
from mmil.graphadapt import (
    Graph,
    build_vocabulary,
    degree_features,
    degree_vector,
    graph_to_mmil,
    load_graph,
    load_graph_collection,
    node_to_mil,
    node_to_mmil,
    temporal_split,
)


def path_graph(n, tokens=None):
    nodes = [f"n{i}" for i in range(n)]
    feats = {v: (tokens or ["a", "b"]) for v in nodes}
    return Graph(nodes, list(zip(nodes, nodes[1:])), feats, {v: i % 2 for i, v in enumerate(nodes)})


def star(leaves=4):
    nodes = ["c"] + [f"l{i}" for i in range(leaves)]
    return Graph(nodes, [("c", v) for v in nodes[1:]], label=1, id="star")


def triangle():
    return Graph(["a", "b", "c"], [("a", "b"), ("b", "c"), ("c", "a")], label=0, id="k3")


def test_edges_are_cleaned():
    g = Graph(["a", "b"], [("a", "b"), ("b", "a"), ("a", "a")])
    assert g.edges == [("a", "b")] and g.degree("a") == 1
    with pytest.raises(ValueError, match="unknown node"):
        Graph(["a"], [("a", "z")])


class TestNodeDecomposition:
    def test_degree_three_node(self):
        g = Graph(list("vabc"), [("v", "a"), ("v", "b"), ("v", "c")], {x: [1.0, 0.0] for x in "vabc"}, {"v": 1})
        ds = node_to_mmil(g)
        assert len(ds) == 1 and len(ds[0].subbags) == 4

    def test_isolated_node(self):
        g = Graph(["v"], [], {"v": ["a", "b"]}, {"v": 0})
        assert len(node_to_mmil(g)[0].subbags) == 1
        flat = node_to_mil(g)
        vocab = build_vocabulary(g)
        np.testing.assert_array_equal(flat[0].instances.argmax(axis=1), [vocab["a"], vocab["b"]])

    def test_path_instance_count(self):
        g = path_graph(5)
        ds = node_to_mmil(g)
        expected = sum((g.degree(v) + 1) * 2 for v in g.nodes)
        assert sum(len(s) for ex in ds for s in ex.subbags) == expected == 26

    def test_out_of_vocabulary_tokens(self):
        g = Graph(["x", "y"], [("x", "y")], {"x": ["a"], "y": ["zzz"]}, {"x": 0, "y": 1})
        vocab = build_vocabulary(g, ["x"])
        ds = node_to_mmil(g, vocabulary=vocab)
        assert ds.feature_dim == 2 and ds[1].subbags[0][0, 0] == 1.0

    def test_vector_features(self):
        g = Graph(["x", "y"], [("x", "y")], {"x": [0.5, 1.0], "y": [2.0, 3.0]}, {"x": 0, "y": 1})
        ds = node_to_mmil(g)
        np.testing.assert_array_equal(ds[0].subbags[1], [[2.0, 3.0]])

    def test_unlabelled_node_rejected(self):
        g = path_graph(3)
        with pytest.raises(ValueError, match="no label"):
            node_to_mmil(g, nodes=["n0", "zz"])


class TestGraphDecomposition:
    def test_triangle(self):
        ds = graph_to_mmil([triangle()])
        assert [len(s) for s in ds[0].subbags] == [3, 3, 3]

    def test_star(self):
        ds = graph_to_mmil([star()])
        assert sorted(len(s) for s in ds[0].subbags) == [2, 2, 2, 2, 5]

    def test_single_edge(self):
        ds = graph_to_mmil([Graph(["a", "b"], [("a", "b")], label=1)])
        assert [len(s) for s in ds[0].subbags] == [2, 2]


class TestDegreeFeatures:
    def test_strict(self):
        np.testing.assert_array_equal(degree_vector(4, 6), [0.5, 0.5, 0.5, 0, 0, 0])
        assert not degree_vector(1, 6).any()

    def test_inclusive(self):
        v = degree_vector(1, 3, "inclusive")
        np.testing.assert_array_equal(v, [1.0, 0, 0])

    def test_equal_degrees_maximise_dot_product(self):
        vecs = {d: degree_vector(d, 8) for d in range(2, 9)}
        for d, v in vecs.items():
            same_norm = [w for w in vecs.values() if math.isclose(w @ w, v @ v)]
            assert v @ v >= max(v @ w for w in same_norm) - 1e-15

    def test_max_degree_over_collection(self):
        feats = degree_features([triangle(), star()])
        assert len(feats[0]["a"]) == 4

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            degree_vector(2, 3, "loose")


def random_graph(rng, n, p):
    nodes = list(range(n))
    edges = [(u, v) for u, v in itertools.combinations(nodes, 2) if rng.random() < p]
    return Graph(nodes, edges, {v: [float(v), 1.0] for v in nodes}, {v: int(rng.integers(0, 2)) for v in nodes},
                 label=int(rng.integers(0, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_random_graph_counts(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(3, 12)), 0.3)
    if max(g.degree(v) for v in g.nodes) == 0:
        g = Graph(g.nodes, [(0, 1)], g.features, g.labels, label=g.label)
    ds = graph_to_mmil([g])
    assert sum(len(s) for s in ds[0].subbags) == sum(g.degree(v) + 1 for v in g.nodes)
    assert datasets_equal(node_to_mil(g), flatten(node_to_mmil(g)))


class TestTemporalSplit:
    def test_uniform_years(self):
        out = temporal_split(list(range(1, 11)))
        assert (out["yr1"], out["yr2"]) == (4, 6)
        assert out["train"] == [0, 1, 2, 3] and out["valid"] == [4, 5]

    def test_all_equal_years(self):
        with pytest.raises(ValueError, match="empty"):
            temporal_split([2000] * 10)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1990, 2000), min_size=3, max_size=60))
    def test_partition_and_ordering(self, years):
        try:
            out = temporal_split(years)
        except ValueError:
            return
        parts = [out["train"], out["valid"], out["test"]]
        assert sorted(i for p in parts for i in p) == list(range(len(years)))
        tr, va, te = ([years[i] for i in p] for p in parts)
        assert max(tr) < min(va) and max(va) < min(te)

    def test_mapping_input(self):
        out = temporal_split({"a": 1, "b": 2, "c": 3, "d": 4, "e": 5}, (0.4, 0.2, 0.4))
        assert out["train"] == ["a", "b"] and out["test"] == ["d", "e"]


def test_file_readers(tmp_path):
    (tmp_path / "e.csv").write_text("a,b\nb,c\n")
    (tmp_path / "f.csv").write_text("a,1,0\nb,0,1\nc,1,1\n")
    (tmp_path / "l.csv").write_text("a,0\nb,1\nc,0\n")
    g = load_graph(tmp_path / "e.csv", features=tmp_path / "f.csv", labels=tmp_path / "l.csv")
    assert g.nodes == ["a", "b", "c"] and g.degree("b") == 2
    (tmp_path / "gi.csv").write_text("a,g1\nb,g1\nc,g2\nd,g2\n")
    (tmp_path / "gl.csv").write_text("g1,0\ng2,1\n")
    (tmp_path / "ge.csv").write_text("a,b\nc,d\n")
    graphs = load_graph_collection(tmp_path / "ge.csv", tmp_path / "gi.csv", tmp_path / "gl.csv")
    assert [g.id for g in graphs] == ["g1", "g2"] and graphs[1].label == 1
