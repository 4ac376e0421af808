import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import literal_map, standard_ap
from mmil.metrics import (
    evaluate_matrix,
    map_from_relevance,
    map_region,
    mask_matrix,
    mean_map,
    ranking,
    read_matrix,
    write_matrix,
    write_report,
)


class TestMask:
    def test_half_of_four(self):
        a = np.array([[1], [1], [1], [1], [0]])
        masked, skipped = mask_matrix(a, 50, seed=0)
        assert masked.sum() == 2 and skipped == []

    def test_zero_percent_is_identity(self):
        a = np.random.default_rng(0).integers(0, 2, (6, 5))
        assert np.array_equal(mask_matrix(a, 0, seed=1)[0], a)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000), st.floats(0, 99))
    def test_flips_only_ones_with_exact_counts(self, seed, percent):
        a = np.random.default_rng(seed).integers(0, 2, (7, 4))
        masked, skipped = mask_matrix(a, percent, seed)
        assert np.all(masked <= a)
        for j in range(4):
            ones = int(a[:, j].sum())
            assert ones - masked[:, j].sum() == int(np.floor(percent / 100 * ones + 0.5))
            assert (j in skipped) == (ones == 0)

    def test_seeded(self):
        a = np.ones((10, 3), int)
        assert np.array_equal(mask_matrix(a, 30, 4)[0], mask_matrix(a, 30, 4)[0])


class TestMap:
    def test_perfect_ranking_is_exactly_one(self):
        for n in range(1, 7):
            for q in range(1, n + 1):
                rel = [1] * q + [0] * (n - q)
                assert map_from_relevance(rel) == 1.0
                assert map_from_relevance(rel, variant="standard") == 1.0

    def test_matches_formula_on_every_ranking(self):
        for n in range(1, 7):
            for rel in itertools.product((0, 1), repeat=n):
                if not any(rel):
                    continue
                assert map_from_relevance(rel) == pytest.approx(literal_map(rel), abs=1e-15)
                assert map_from_relevance(rel, variant="standard") == pytest.approx(standard_ap(rel), abs=1e-15)

    def test_region_uses_score_ranking_over_all_permutations(self):
        truth = np.array([0, 1, 0])
        mask = np.zeros(3, int)
        for perm in itertools.permutations(range(3)):
            scores = np.array(perm, float)
            order = sorted(range(3), key=lambda i: (-scores[i], i))
            assert map_region(scores, truth, mask) == pytest.approx(literal_map(truth[order]))

    def test_equal_scores_rank_by_index(self):
        truth, mask = np.array([0, 0, 1, 1, 0]), np.zeros(5, int)
        assert list(ranking(np.zeros(5), range(5))) == [0, 1, 2, 3, 4]
        assert map_region(np.zeros(5), truth, mask) == pytest.approx(literal_map([0, 0, 1, 1, 0]))

    def test_masked_items_are_not_candidates(self):
        truth = np.array([1, 1, 0, 1])
        mask = np.array([1, 0, 0, 0])  # item 0 still visible: not a candidate
        scores = np.array([9.0, 1.0, 2.0, 0.5])
        # candidates 1,2,3 ranked 2,1,3 -> relevance 0,1,1
        assert map_region(scores, truth, mask) == pytest.approx(literal_map([0, 1, 1]))

    def test_no_targets(self):
        with pytest.raises(ValueError, match="undefined"):
            map_region(np.zeros(3), np.zeros(3), np.zeros(3))

    def test_variants_differ(self):
        rel = [0, 1, 1]
        assert map_from_relevance(rel) == pytest.approx(0.25)
        assert map_from_relevance(rel, variant="standard") == pytest.approx((1 / 2 + 2 / 3) / 2)
        with pytest.raises(ValueError):
            map_from_relevance(rel, variant="other")


class TestMean:
    def test_examples(self):
        assert mean_map([0.3]) == 0.3
        assert mean_map([0.0, 1.0]) == 0.5
        assert mean_map([0.2, 0.9, 0.4]) == pytest.approx(mean_map([0.4, 0.2, 0.9]))

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_map([None])


def test_matrix_evaluation_and_files(tmp_path):
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 2, (5, 8))
    masked, _ = mask_matrix(truth, 50, 1)
    scores = rng.random((5, 8))
    rows, mean = evaluate_matrix(scores, truth, masked)
    scored = [r.score for r in rows if r.score is not None]
    assert mean == pytest.approx(np.mean(scored))
    write_matrix(truth, tmp_path / "t.csv")
    assert np.array_equal(read_matrix(tmp_path / "t.csv"), truth)
    write_report(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "region,Z,Q,mAP"
    with pytest.raises(ValueError, match="shape"):
        evaluate_matrix(scores[:, :3], truth, masked)
