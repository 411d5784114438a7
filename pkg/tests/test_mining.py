"""Score computation and percentile-threshold mining."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajmine.errors import ConfigError
from trajmine.flow import new_flow
from trajmine.mining import (
    ScoreTable,
    mine,
    mine_all,
    mined_from_csv,
    mined_to_csv,
    score_examples,
    scores_from_csv,
    scores_to_csv,
    subsets_summary,
)

LOG_2PI = np.log(2.0 * np.pi)


def identity_model(dim):
    model = new_flow(dim, seed=0)
    for _, a in model.param_arrays():
        a[...] = 0.0
    return model


def make_table(c_x, c_z, lam=0.5):
    c_x = np.asarray(c_x, dtype=np.float64)
    c_z = np.asarray(c_z, dtype=np.float64)
    return ScoreTable(
        example_index=np.arange(c_x.shape[0], dtype=np.int64),
        hist_logdensity=c_x,
        full_logdensity=c_z,
        hardness=c_z - lam * c_x,
        lam=lam,
    )


class TestScoreExamples:
    def test_lambda_zero_hardness_equals_full(self):
        model = identity_model(4)
        feats = np.random.default_rng(0).standard_normal((20, 4))
        table = score_examples(model, model, feats, feats, lam=0.0)
        np.testing.assert_array_equal(table.hardness, table.full_logdensity)

    def test_hardness_arithmetic(self):
        table = make_table([-2.0], [-10.0], lam=0.5)
        assert table.hardness[0] == -9.0

    def test_identity_flow_zero_vectors_d130(self):
        model = identity_model(130)
        feats = np.zeros((3, 130))
        table = score_examples(model, model, feats, feats, lam=0.5)
        np.testing.assert_allclose(table.hist_logdensity, -65.0 * LOG_2PI, rtol=1e-12)
        np.testing.assert_allclose(table.full_logdensity, -65.0 * LOG_2PI, rtol=1e-12)
        assert table.hist_logdensity[0] == pytest.approx(-119.4625, abs=1e-3)

    def test_dimension_mismatch_is_config_error(self):
        feats = np.zeros((5, 4))
        with pytest.raises(ConfigError):
            score_examples(identity_model(6), identity_model(4), feats, feats, 0.5)

    def test_misaligned_rows_rejected(self):
        with pytest.raises(ConfigError):
            score_examples(identity_model(4), identity_model(4),
                           np.zeros((5, 4)), np.zeros((6, 4)), 0.5)


class TestMine:
    def test_sort_oracle_case(self):
        scores = np.array([5.0, 1.0, 4.0, 2.0, 3.0])
        threshold, idx = mine(scores, 0.4)
        assert threshold == 3.0
        np.testing.assert_array_equal(idx, [1, 3])

    def test_full_selection(self):
        threshold, idx = mine(np.array([3.0, 1.0, 2.0]), 1.0)
        np.testing.assert_array_equal(idx, [0, 1, 2])
        assert threshold == np.inf

    def test_5_percent_of_2000(self):
        scores = np.random.default_rng(0).standard_normal(2000)
        _, idx = mine(scores, 0.05)
        assert idx.shape[0] == 100
        # oracle: numpy partial sort
        np.testing.assert_array_equal(np.sort(idx), np.sort(np.argsort(scores)[:100]))

    def test_ties_break_by_ascending_index(self):
        _, idx = mine(np.zeros(10), 0.3)
        np.testing.assert_array_equal(idx, [0, 1, 2])

    def test_bad_ratio(self):
        for r in (0.0, -0.5, 1.01):
            with pytest.raises(ValueError):
                mine(np.ones(5), r)

    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=4, max_size=60),
           st.sampled_from([0.05, 0.1, 0.25, 0.5, 0.9]))
    @settings(max_examples=60, deadline=None)
    def test_selected_scores_never_exceed_threshold(self, values, ratio):
        scores = np.asarray(values)
        threshold, idx = mine(scores, ratio)
        assert idx.shape[0] == int(np.floor(ratio * scores.shape[0]))
        if idx.size:
            assert scores[idx].max() <= threshold


class TestMineAll:
    def test_lambda_zero_sets_equal(self):
        rng = np.random.default_rng(2)
        table = make_table(rng.standard_normal(50), rng.standard_normal(50), lam=0.0)
        subsets = mine_all(table, 0.2)
        np.testing.assert_array_equal(subsets.hard_idx, subsets.rare_full_idx)

    def test_all_equal_scores_tie_rule(self):
        table = make_table(np.zeros(10), np.zeros(10))
        subsets = mine_all(table, 0.3)
        for idx in subsets.named().values():
            np.testing.assert_array_equal(idx, [0, 1, 2])

    def test_nesting_across_ratios(self):
        rng = np.random.default_rng(3)
        table = make_table(rng.standard_normal(200), rng.standard_normal(200))
        small = mine_all(table, 0.05)
        large = mine_all(table, 0.10)
        for name in small.named():
            assert set(small.named()[name]) <= set(large.named()[name])

    def test_rank_invariance_under_constant_shift(self):
        rng = np.random.default_rng(4)
        c_x, c_z = rng.standard_normal(100), rng.standard_normal(100)
        a = mine_all(make_table(c_x, c_z), 0.15)
        b = mine_all(make_table(c_x, c_z + 123.45), 0.15)
        np.testing.assert_array_equal(a.rare_full_idx, b.rare_full_idx)

    def test_cardinality(self):
        rng = np.random.default_rng(5)
        table = make_table(rng.standard_normal(777), rng.standard_normal(777))
        for r in (0.05, 0.1, 0.15, 0.2):
            subsets = mine_all(table, r)
            for idx in subsets.named().values():
                assert idx.shape[0] == int(np.floor(r * 777))


class TestSerialization:
    def test_scores_roundtrip(self):
        rng = np.random.default_rng(6)
        table = make_table(rng.standard_normal(20), rng.standard_normal(20), lam=0.7)
        text = scores_to_csv(table, config_hash="h1")
        back, h = scores_from_csv(text)
        assert h == "h1" and back.lam == 0.7
        np.testing.assert_array_equal(back.hist_logdensity, table.hist_logdensity)
        np.testing.assert_array_equal(back.hardness, table.hardness)

    def test_mined_roundtrip(self):
        rng = np.random.default_rng(7)
        table = make_table(rng.standard_normal(40), rng.standard_normal(40))
        subsets = mine_all(table, 0.25)
        text = mined_to_csv(table, subsets, config_hash="h2")
        back, h = mined_from_csv(text)
        assert h == "h2" and back.ratio == 0.25
        for name in subsets.named():
            np.testing.assert_array_equal(back.named()[name], subsets.named()[name])
        assert back.thr_hard == subsets.thr_hard

    def test_summary_keys(self):
        table = make_table(np.arange(10.0), np.arange(10.0))
        summary = subsets_summary(mine_all(table, 0.2))
        assert set(summary) == {"r", "lambda", "delta_x", "delta_z", "delta_y", "sizes"}
        assert summary["sizes"] == {"rare_hist": 2, "rare_full": 2, "hard": 2}
