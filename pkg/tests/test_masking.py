import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapretrain.masking import (DecoderStrategy, MaskPlan, MaskStrategy, ScanKind,
                                build_mask_plan, build_visibility, oracle_visibility,
                                round_half_up, scan_permutation, visibility_batch)

ALL = list(DecoderStrategy)


def test_half_ratio_on_4x4_masks_eight():
    for strategy in MaskStrategy:
        plan = build_mask_plan(4, 4, 0.5, strategy, seed=1)
        assert plan.count == 8, strategy


def test_zero_ratio_is_empty():
    plan = build_mask_plan(8, 8, 0.0, "random", seed=3)
    assert plan.count == 0 and all(r == () for r in plan.masked)


def test_ratio_out_of_range():
    with pytest.raises(ValueError):
        build_mask_plan(4, 4, 1.5, "random")


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.floats(0, 1), st.sampled_from(list(MaskStrategy)),
       st.integers(0, 1000))
def test_plan_invariants(m, n, ratio, strategy, seed):
    plan = build_mask_plan(m, n, ratio, strategy, seed)
    assert plan.count == round_half_up(ratio * m * n)
    for row in plan.masked:
        assert list(row) == sorted(set(row))
        assert all(0 <= j < n for j in row)
    again = build_mask_plan(m, n, ratio, strategy, seed)
    assert again == plan


def test_sequential_masks_row_suffixes():
    plan = build_mask_plan(4, 8, 0.5, "sequential")
    assert plan.masked == ((4, 5, 6, 7),) * 4


def test_sequential_spreads_remainder_over_rows():
    plan = build_mask_plan(3, 4, 5 / 12, "sequential")
    assert plan.masked == ((2, 3), (2, 3), (3,))


def test_diagonal_masks_whole_wrapped_diagonals():
    plan = build_mask_plan(4, 4, 0.5, "diagonal", seed=None)
    flat = plan.flat().reshape(4, 4)
    diag = {(j - i) % 4 for i, j in zip(*np.nonzero(flat))}
    assert diag == {0, 1}


def test_ar_suffix_follows_order():
    row = build_mask_plan(2, 2, 0.25, "ar_suffix", order="row_first")
    col = build_mask_plan(2, 2, 0.25, "ar_suffix", order="column_first")
    assert row.masked == ((), (1,))
    assert col.masked == ((), (1,))
    col2 = build_mask_plan(2, 3, 2 / 6, "ar_suffix", order="column_first")
    assert col2.masked == ((2,), (2,))


def test_random_inclusion_frequency_within_three_sigma():
    m = n = 8
    ratio, draws = 0.5, 10_000
    rng = np.random.default_rng(7)
    seeds = rng.integers(0, 2**63 - 1, size=draws)
    counts = np.zeros(m * n)
    for s in seeds:
        counts += build_mask_plan(m, n, ratio, "random", int(s)).flat()
    freq = counts / draws
    sigma = np.sqrt(ratio * (1 - ratio) / draws)
    assert np.abs(freq - ratio).max() <= 3 * sigma


# -- visibility ------------------------------------------------------------------

def test_map_matrix_worked_example():
    plan = MaskPlan(2, 2, ((1,), (0,)), 0.5, MaskStrategy.RANDOM)
    vis = build_visibility(plan, "MAP").allowed
    expected = np.zeros((4, 4), bool)
    # token 2 is masked, so it also sees the visible token 3 of its own row
    for q, keys in {0: [0], 1: [0, 1], 2: [0, 1, 2, 3], 3: [0, 1, 3]}.items():
        expected[q, keys] = True
    np.testing.assert_array_equal(vis, expected)
    np.testing.assert_array_equal(oracle_visibility(plan, "MAP").allowed, expected)


def test_map_with_empty_plan_is_row_block_causal():
    plan = build_mask_plan(3, 4, 0.0, "random")
    vis = build_visibility(plan, DecoderStrategy.MAP).allowed
    row = np.arange(12) // 4
    np.testing.assert_array_equal(vis, row[None, :] <= row[:, None])


def test_mae_all_true_and_ar_lower_triangular():
    plan = build_mask_plan(3, 3, 0.5, "random", 0)
    assert build_visibility(plan, "MAE").allowed.all()
    np.testing.assert_array_equal(oracle_visibility(plan, "AR").allowed, np.tril(np.ones((9, 9), bool)))


def test_strategy_name_parsing():
    assert DecoderStrategy.parse("local_mae") is DecoderStrategy.LOCAL_MAE
    assert DecoderStrategy.parse("map") is DecoderStrategy.MAP
    with pytest.raises(ValueError):
        DecoderStrategy.parse("bert")


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0, 1), st.integers(0, 10**6))
def test_visibility_properties(m, n, ratio, seed):
    plan = build_mask_plan(m, n, ratio, "random", seed)
    L = m * n
    row = np.arange(L) // n
    masked = plan.flat()
    vis = {s: build_visibility(plan, s).allowed for s in ALL}
    # no future rows for MAP
    assert not (vis[DecoderStrategy.MAP] & (row[None, :] > row[:, None])).any()
    # same-row MAP keys: exactly unmasked + self
    same = row[None, :] == row[:, None]
    expected_same = same & (~masked[None, :] | np.eye(L, dtype=bool))
    np.testing.assert_array_equal(vis[DecoderStrategy.MAP] & same, expected_same)
    # lattice: AR and localMAE and MAP are within MAE; localMAE is MAE restricted to a row
    for s in ALL:
        assert (vis[s] <= vis[DecoderStrategy.MAE]).all()
        assert vis[s].any(axis=1).all()
    np.testing.assert_array_equal(vis[DecoderStrategy.LOCAL_MAE], vis[DecoderStrategy.MAE] & same)


@pytest.mark.parametrize("m,n", [(1, 3), (2, 2), (2, 3), (3, 2)])
@pytest.mark.parametrize("order", list(ScanKind))
def test_exhaustive_small_grids_match_oracle(m, n, order):
    L = m * n
    for bits in itertools.product([False, True], repeat=L):
        plan = MaskPlan.from_flat(np.array(bits), m, n)
        for s in ALL:
            for self_visible in (True, False):
                a = build_visibility(plan, s, order, self_visible).allowed
                b = oracle_visibility(plan, s, order, self_visible).allowed
                np.testing.assert_array_equal(a, b)


def test_single_row_map_equals_local_mae_without_masks():
    plan = build_mask_plan(1, 5, 0.0, "random")
    np.testing.assert_array_equal(build_visibility(plan, "MAP").allowed,
                                  build_visibility(plan, "localMAE").allowed)


def test_ar_column_order_is_row_order_on_transposed_grid():
    m, n = 3, 4
    plan = build_mask_plan(m, n, 0.0, "random")
    plan_t = build_mask_plan(n, m, 0.0, "random")
    col = build_visibility(plan, "AR", order="column_first").allowed
    row_t = build_visibility(plan_t, "AR", order="row_first").allowed
    # token (i, j) of the grid is token (j, i) of the transpose
    to_t = np.arange(m * n).reshape(m, n).T.reshape(-1)     # transposed index -> original index
    back = np.empty_like(to_t)
    back[to_t] = np.arange(m * n)
    np.testing.assert_array_equal(col, row_t[np.ix_(back, back)])


def test_batch_visibility_matches_single():
    rng = np.random.default_rng(0)
    flats = rng.random((5, 12)) < 0.5
    batch = visibility_batch(flats, 3, 4, "MAP")
    for f, v in zip(flats, batch):
        np.testing.assert_array_equal(v, build_visibility(MaskPlan.from_flat(f, 3, 4), "MAP").allowed)


def test_csv_and_pbm_dumps():
    plan = MaskPlan(2, 2, ((1,), (0,)), 0.5, MaskStrategy.RANDOM)
    vis = build_visibility(plan, "MAP")
    assert vis.to_csv() == "1,0,0,0\n1,1,0,0\n1,1,1,1\n1,1,0,1\n"
    assert vis.to_pbm().splitlines()[:3] == ["P1", "4 4", "1 0 0 0"]


def test_scan_permutation_column_first_2x2():
    assert scan_permutation(2, 2, "column_first").tolist() == [0, 2, 1, 3]
    assert scan_permutation(2, 3, "row_first").tolist() == list(range(6))
