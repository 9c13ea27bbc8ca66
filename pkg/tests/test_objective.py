import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapretrain import numerics as nx
from mapretrain.backbone import EncoderConfig
from mapretrain.data import make_targets
from mapretrain.masking import (MaskPlan, MaskStrategy, build_mask_plan, build_visibility,
                                visibility_batch)
from mapretrain.objective import (DecoderConfig, MapModel, map_loss, pilot_ar_objective,
                                  pilot_ar_plan, teacher_forcing_equivalence)


def tiny_model(seed=0, m=4, n=4, pattern="MT", order="row_first", depth=1):
    enc = EncoderConfig(rows=m, cols=n, patch_dim=4, dim=8, pattern=pattern, scan_order=order,
                        d_state=4, heads=2, mlp_ratio=2)
    return MapModel(enc, DecoderConfig(dim=8, depth=depth, heads=2, mlp_ratio=2),
                    np.random.default_rng(seed))


# -- loss ------------------------------------------------------------------------

def test_loss_zero_when_prediction_matches():
    rng = np.random.default_rng(0)
    target = rng.standard_normal((2, 4, 3)).astype(np.float32)
    masked = np.array([[1, 0, 1, 0], [0, 0, 1, 1]], bool)
    rep = map_loss(nx.tensor(target), target, masked, cols=2)
    assert rep.total == 0.0 and rep.count == 4 and not rep.empty


def test_loss_hand_arithmetic():
    # two masked tokens, D = 1, errors 1 and 3 -> (1 + 9) / 2
    pred = nx.tensor(np.array([[1.0], [0.0], [3.0], [0.0]]))
    masked = np.array([True, False, True, False])
    rep = map_loss(pred, np.zeros((4, 1)), masked, cols=2)
    assert rep.total == 5.0
    np.testing.assert_allclose(rep.per_row, [1.0, 9.0])
    assert rep.row_counts.tolist() == [1, 1]


def test_loss_ignores_unmasked_predictions():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal((6, 2))
    target = rng.standard_normal((6, 2))
    masked = np.array([1, 0, 0, 1, 1, 0], bool)
    base = map_loss(nx.tensor(pred), target, masked, 3).total
    pred[~masked] += 100.0
    assert map_loss(nx.tensor(pred), target, masked, 3).total == base


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 1.0))   # 0.1 * 9 rounds to at least one token
def test_loss_gradient_exactly_zero_off_mask(seed, ratio):
    rng = np.random.default_rng(seed)
    masked = np.stack([build_mask_plan(3, 3, ratio, "random", int(s)).flat()
                       for s in rng.integers(0, 2**31, 2)])
    pred = nx.Tensor(rng.standard_normal((2, 9, 4)), requires_grad=True)
    rep = map_loss(pred, rng.standard_normal((2, 9, 4)), masked, 3)
    nx.backward(rep.loss)
    assert np.all(pred.grad[~masked] == 0.0)
    assert np.any(pred.grad[masked] != 0.0)


def test_total_is_count_weighted_mean_of_rows():
    rng = np.random.default_rng(2)
    masked = build_mask_plan(4, 4, 0.5, "random", 9).flat()
    rep = map_loss(nx.tensor(rng.standard_normal((16, 3))), rng.standard_normal((16, 3)), masked, 4)
    w = rep.row_counts / rep.row_counts.sum()
    assert rep.total == pytest.approx(float(w @ rep.per_row), rel=1e-6)
    assert rep.total >= 0


def test_empty_plan_flags_and_warns():
    with pytest.warns(UserWarning):
        rep = map_loss(nx.tensor(np.ones((4, 2))), np.zeros((4, 2)), np.zeros(4, bool), 2)
    assert rep.empty and rep.total == 0.0 and rep.count == 0


def test_loss_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        map_loss(nx.tensor(np.ones((4, 2))), np.zeros((4, 3)), np.zeros(4, bool), 2)


def test_loss_accepts_reconstruction_target():
    x = np.random.default_rng(3).random((4, 4))
    tgt = make_targets(x)
    rep = map_loss(nx.tensor(tgt.values), tgt, np.ones(4, bool), 2)
    assert rep.total == 0.0


# -- decoding --------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_teacher_forcing_matches_row_by_row(seed):
    model = tiny_model(seed, depth=2)
    x = np.random.default_rng(seed).random((16, 4)).astype(np.float32)
    plan = build_mask_plan(4, 4, 0.5, "random", seed)
    assert teacher_forcing_equivalence(model, x, plan) <= 1e-5


def test_teacher_forcing_single_row_is_exact():
    model = tiny_model(1, m=1, n=5)
    x = np.random.default_rng(1).random((5, 4)).astype(np.float32)
    plan = build_mask_plan(1, 5, 0.6, "random", 2)
    assert teacher_forcing_equivalence(model, x, plan) == 0.0


def test_teacher_forcing_detects_future_row_leak():
    model = tiny_model(2)
    x = np.random.default_rng(2).random((16, 4)).astype(np.float32)
    plan = build_mask_plan(4, 4, 0.5, "random", 5)
    vis = build_visibility(plan, "MAP").allowed.copy()
    q = int(np.flatnonzero(plan.flat()[:4])[0])      # a masked query in row 0
    vis[q, 15] = True                                # peeks at the last row
    assert teacher_forcing_equivalence(model, x, plan, vis) > 1e-3


def test_zeroing_future_rows_leaves_past_predictions():
    model = tiny_model(3, pattern="MMTM")
    rng = np.random.default_rng(3)
    x = rng.random((1, 16, 4)).astype(np.float32)
    masked = build_mask_plan(4, 4, 0.5, "random", 1).flat()[None]
    vis = visibility_batch(masked, 4, 4, "MAP")
    with nx.no_grad():
        enc = model.encoder(x, masked)
        base = model.decoder(enc, vis).data
        for i in range(3):
            cut = enc.data.copy()
            cut[:, (i + 1) * 4:] = 0.0
            out = model.decoder(nx.tensor(cut), vis).data
            np.testing.assert_allclose(out[:, :(i + 1) * 4], base[:, :(i + 1) * 4], atol=1e-6)


def test_mae_visibility_is_plain_decoding():
    model = tiny_model(4)
    x = np.random.default_rng(4).random((2, 16, 4)).astype(np.float32)
    masked = np.stack([build_mask_plan(4, 4, 0.5, "random", s).flat() for s in (1, 2)])
    with nx.no_grad():
        enc = model.encoder(x, masked)
        a = model.decoder(enc, visibility_batch(masked, 4, 4, "MAE")).data
        b = model.decoder(enc, np.ones((16, 16), bool)).data
    np.testing.assert_array_equal(a, b)


def test_single_row_map_equals_local_mae_predictions():
    model = tiny_model(5, m=1, n=6)
    x = np.random.default_rng(5).random((1, 6, 4)).astype(np.float32)
    masked = np.zeros((1, 6), bool)
    with nx.no_grad():
        a = model(x, masked, visibility_batch(masked, 1, 6, "MAP")).data
        b = model(x, masked, visibility_batch(masked, 1, 6, "localMAE")).data
    np.testing.assert_array_equal(a, b)


def test_decode_dimension_mismatch():
    model = tiny_model()
    x = np.zeros((1, 16, 4), np.float32)
    with pytest.raises(nx.ContractError):
        model(x, np.zeros((1, 16), bool), np.ones((9, 9), bool))


def test_every_strategy_runs_through_one_path():
    model = tiny_model(6)
    rng = np.random.default_rng(6)
    x = rng.random((2, 16, 4)).astype(np.float32)
    masked = np.stack([build_mask_plan(4, 4, 0.5, "random", s).flat() for s in (3, 4)])
    for s in ("AR", "MAE", "localMAE", "MAP"):
        rep = map_loss(model(x, masked, visibility_batch(masked, 4, 4, s)), make_targets(x),
                       masked, 4)
        assert np.isfinite(rep.total) and rep.count == 16


# -- pilot AR objective ----------------------------------------------------------

def test_pilot_single_masked_token():
    model = tiny_model(7)
    x = np.random.default_rng(7).random((2, 16, 4)).astype(np.float32)
    rep = pilot_ar_objective(model, x, make_targets(x), masked_tokens=1)
    assert rep.count == 2             # one per image
    assert rep.row_counts.tolist() == [0, 0, 0, 2]


def test_pilot_plan_follows_order():
    plan = pilot_ar_plan(2, 3, masked_tokens=2, order="column_first")
    assert plan.masked == ((2,), (2,))
    assert pilot_ar_plan(2, 3, ratio=0.5).masked == ((), (0, 1, 2))
    with pytest.raises(ValueError):
        pilot_ar_plan(2, 2, masked_tokens=5)


def test_pilot_ar_causal_set_on_2x2():
    plan = MaskPlan(2, 2, ((), ()), 0.0, MaskStrategy.RANDOM)
    vis = build_visibility(plan, "AR", "row_first").allowed
    # the query's own key only carries the mask token, so it conditions on nothing
    assert set(np.flatnonzero(vis[3]).tolist()) - {3} == {0, 1, 2}
    assert set(np.flatnonzero(vis[1]).tolist()) - {1} == {0}


def test_pilot_loss_has_gradients():
    model = tiny_model(8)
    x = np.random.default_rng(8).random((2, 16, 4)).astype(np.float32)
    rep = pilot_ar_objective(model, x, make_targets(x), ratio=0.25, order="column_first")
    nx.backward(rep.loss)
    g = model.encoder.patch_embed.weight.grad
    assert g is not None and np.abs(g).sum() > 0
    assert rep.count == 8
