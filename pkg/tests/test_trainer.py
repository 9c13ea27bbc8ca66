import csv
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapretrain import numerics as nx
from mapretrain.config import TrainConfig
from mapretrain.trainer import (AdamW, Checkpoint, CheckpointError, IncompatibleCheckpointError,
                                Pretrainer, TrainingDiverged, adamw_update, clip_grad_norm,
                                cosine_lr, finetune, load_checkpoint, parse_grid, pcg64_bytes,
                                pcg64_from_bytes, pretrain, run_ablation_grid, save_checkpoint)

TINY = dict(num_images=64, image_size=16, patch=4, dim=16, pattern="MT", dec_dim=16,
            dec_depth=1, d_state=4, batch_size=16, epochs=1, finetune_epochs=1)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


# -- optimizer -------------------------------------------------------------------

def reference_adamw(theta, grads, lr, b1, b2, eps, wd):
    """Scalar loop straight from the update equations."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        theta = theta - lr * wd * theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adamw_zero_grad_no_decay_is_identity():
    theta = np.array([1.5, -2.0])
    out, _, _ = adamw_update(theta, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1)
    np.testing.assert_array_equal(out, theta)


def test_adamw_first_step_is_lr():
    out, m, v = adamw_update(np.array([0.0]), np.array([1.0]), np.zeros(1), np.zeros(1), 1, lr=0.1)
    assert out[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert (m[0], v[0]) == pytest.approx((0.1, 0.001))


def test_adamw_zero_grad_decay_is_pure_shrink():
    theta = np.array([2.0, -3.0])
    out, _, _ = adamw_update(theta, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1, wd=0.5)
    np.testing.assert_allclose(out, theta * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-5, 5), min_size=1, max_size=6),
       st.floats(1e-4, 0.5), st.floats(0.0, 0.3))
def test_adamw_matches_reference(theta, grads, lr, wd):
    arr, m, v = np.array([theta]), np.zeros(1), np.zeros(1)
    for t, g in enumerate(grads, start=1):
        arr, m, v = adamw_update(arr, np.array([g]), m, v, t, lr, 0.9, 0.999, 1e-8, wd)
    assert abs(arr[0] - reference_adamw(theta, grads, lr, 0.9, 0.999, 1e-8, wd)) <= 1e-12


def test_adamw_skips_non_finite_and_counts():
    p = nx.Tensor(np.ones(3), requires_grad=True)
    opt = AdamW({"w": p})
    p.grad = np.array([1.0, np.nan, 0.0], dtype=p.dtype)
    assert opt.step(0.1) is False
    assert opt.skipped == 1 and opt.t == 0
    np.testing.assert_array_equal(p.data, np.ones(3))
    p.grad = np.ones(3, dtype=p.dtype)
    assert opt.step(0.1) and opt.t == 1


def test_weight_decay_spares_vectors():
    w = nx.Tensor(np.ones((2, 2)), requires_grad=True)
    b = nx.Tensor(np.ones(2), requires_grad=True)
    opt = AdamW({"w": w, "b": b}, weight_decay=0.5)
    w.grad, b.grad = np.zeros((2, 2), np.float32), np.zeros(2, np.float32)
    opt.step(0.1)
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_array_equal(b.data, 1.0)


def test_clip_grad_norm_global():
    a = nx.Tensor(np.zeros(2), requires_grad=True)
    b = nx.Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0], np.float32), np.array([4.0], np.float32)
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0, 0.8], rtol=1e-6)
    assert clip_grad_norm({"a": a, "b": b}, 10.0) == pytest.approx(1.0, rel=1e-6)


# -- schedule --------------------------------------------------------------------

def test_cosine_lr_landmarks():
    assert cosine_lr(10, 10, 110, 0.5) == 0.5
    assert abs(cosine_lr(110, 10, 110, 0.5)) <= 1e-12
    assert cosine_lr(60, 10, 110, 0.5) == pytest.approx(0.25, abs=1e-15)
    assert cosine_lr(0, 10, 110, 0.5) == 0.0
    assert cosine_lr(5, 10, 110, 0.5) == 0.25
    assert cosine_lr(0, 0, 5, 1.0) == 1.0


@given(st.integers(0, 50), st.integers(1, 500))
def test_cosine_lr_monotone_after_warmup(warmup, extra):
    total = warmup + extra
    lrs = [cosine_lr(s, warmup, total, 1e-3) for s in range(warmup, total + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(total + 1, warmup, total, 1e-3)


# -- checkpoint format -----------------------------------------------------------

def test_checkpoint_byte_layout(tmp_path):
    rng = np.random.default_rng(0).bit_generator
    ck = Checkpoint({"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)},
                    {"t": np.array(3, dtype=np.int64)}, 7, pcg64_bytes(rng))
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, ck)
    raw = p.read_bytes()
    assert raw[:8] == b"MAPCKPT1"
    assert struct.unpack_from("<I", raw, 8)[0] == 1
    (clen,) = struct.unpack_from("<I", raw, 12)
    assert raw[16:16 + clen] == b'{"a": 1}'
    o = 16 + clen
    assert struct.unpack_from("<IH", raw, o) == (1, 1)
    assert raw[o + 6:o + 7] == b"w"
    assert struct.unpack_from("<BQQB", raw, o + 7) == (2, 2, 3, 0)
    data = np.frombuffer(raw, "<f4", 6, o + 7 + struct.calcsize("<BQQB"))
    np.testing.assert_array_equal(data, np.arange(6))
    assert struct.unpack_from("<Q", raw, len(raw) - 40)[0] == 7
    back = load_checkpoint(p)
    assert back.step == 7 and back.config == {"a": 1} and back.rng_state == ck.rng_state
    np.testing.assert_array_equal(back.tensors["w"], ck.tensors["w"])


@pytest.mark.parametrize("mutate,match", [(lambda b: b"NOTACKPT" + b[8:], "magic"),
                                          (lambda b: b[:8] + struct.pack("<I", 9) + b[12:], "version"),
                                          (lambda b: b[:-5], "truncated"),
                                          (lambda b: b + b"\0", "trailing")])
def test_checkpoint_corruption(tmp_path, mutate, match):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, Checkpoint({}, {"w": np.ones(2, np.float32)}, {}, 0, bytes(32)))
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(p)


def test_rng_state_round_trip():
    g = np.random.Generator(np.random.PCG64(123))
    g.integers(0, 2**63 - 1, size=3)
    h = pcg64_from_bytes(pcg64_bytes(g.bit_generator))
    assert g.integers(0, 2**63 - 1) == h.integers(0, 2**63 - 1)


# -- pretraining -----------------------------------------------------------------

def test_pretrain_smoke_writes_valid_outputs(tmp_path):
    res = pretrain(tiny_cfg(), tmp_path)
    ck = load_checkpoint(res.checkpoint)
    assert ck.step == 4 and ck.config["pattern"] == "MT"
    assert any(k.startswith("encoder.") for k in ck.tensors)
    rows = list(csv.reader(open(res.metrics)))
    assert rows[0] == ["epoch", "step", "total_mse", "row_0", "row_1", "row_2", "row_3"]
    assert len(rows) == 2 and float(rows[1][2]) > 0


def test_same_seed_same_metrics(tmp_path):
    cfg = tiny_cfg(epochs=2)
    a = pretrain(cfg, tmp_path / "a")
    b = pretrain(cfg, tmp_path / "b")
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    c = pretrain(cfg.replace(seed=1), tmp_path / "c")
    assert c.metrics.read_bytes() != a.metrics.read_bytes()


def test_resume_is_bitwise(tmp_path):
    cfg = tiny_cfg(epochs=2)
    full = Pretrainer(cfg)
    full.run(max_steps=3)
    full.save(tmp_path / "mid.ckpt")
    full.run(max_steps=2)
    resumed = Pretrainer.resume(tmp_path / "mid.ckpt")
    resumed.run(max_steps=2)
    assert resumed.step == full.step == 5
    for name, p in full.params.items():
        assert np.array_equal(p.data, resumed.params[name].data), name
    assert resumed.checkpoint().rng_state == full.checkpoint().rng_state


def test_resume_continues_metrics_file(tmp_path):
    cfg = tiny_cfg(epochs=2)
    ref = pretrain(cfg, tmp_path / "ref")
    part = pretrain(cfg, tmp_path / "part", max_steps=6)
    pretrain(cfg, tmp_path / "part", resume=part.checkpoint)
    assert (tmp_path / "part" / "metrics.csv").read_bytes() == ref.metrics.read_bytes()


def test_too_many_skips_fail_loudly(monkeypatch):
    tr = Pretrainer(tiny_cfg(epochs=2))
    monkeypatch.setattr(tr.opt, "grads", lambda: {n: np.full(p.shape, np.nan, np.float32)
                                                  for n, p in tr.params.items()})
    with pytest.raises(TrainingDiverged):
        tr.run()
    assert tr.opt.skipped == 1


@pytest.mark.parametrize("decoder,strategy", [("AR", "ar_suffix"), ("MAE", "random"),
                                              ("localMAE", "diagonal"), ("MAP", "sequential")])
def test_every_objective_trains(decoder, strategy):
    tr = Pretrainer(tiny_cfg(decoder=decoder, mask_strategy=strategy))
    rep = tr.train_step()
    assert np.isfinite(rep.total) and rep.count > 0


# -- finetuning ------------------------------------------------------------------

def test_finetune_from_scratch_and_from_checkpoint(tmp_path):
    cfg = tiny_cfg(mode="finetune")
    scratch = finetune(cfg)
    assert scratch.init == "scratch" and 0 <= scratch.accuracy <= 1
    pre = pretrain(tiny_cfg(), tmp_path)
    warm = finetune(cfg, pre.checkpoint)
    assert warm.steps == scratch.steps


@pytest.mark.parametrize("field,value", [("pattern", "TM"), ("dim", 32), ("scan_order", "column_first")])
def test_finetune_incompatible_checkpoint_names_field(tmp_path, field, value):
    pre = pretrain(tiny_cfg(), tmp_path)
    with pytest.raises(IncompatibleCheckpointError) as info:
        finetune(tiny_cfg(mode="finetune", **{field: value}), pre.checkpoint)
    assert info.value.field == field and field in str(info.value)


def test_frozen_random_probe_beats_chance():
    cfg = TrainConfig(num_images=240, image_size=16, patch=4, dim=32, pattern="MMMT",
                      freeze_backbone=True, finetune_epochs=15, finetune_lr=1e-2, batch_size=32,
                      mode="finetune")
    rep = finetune(cfg)
    assert rep.accuracy > 0.25 + 0.15, rep


def test_frozen_probe_only_moves_head():
    cfg = tiny_cfg(mode="finetune", freeze_backbone=True)
    rep = finetune(cfg)
    ref = finetune(cfg.replace(finetune_epochs=0))
    for name, p in rep.classifier.encoder.named_parameters().items():
        assert np.array_equal(p.data, ref.classifier.encoder.named_parameters()[name].data)


# -- ablation grids --------------------------------------------------------------

def test_named_grids_shapes():
    assert [c for c, _ in parse_grid("decoder_mask")] == ["AR", "MAE", "localMAE", "MAP"]
    cells = parse_grid("scan_order")
    assert len(cells) == 4
    assert {(o["scan_order"], o["ar_order"]) for _, o in cells} == {
        (s, a) for s in ("row_first", "column_first") for a in ("row_first", "column_first")}
    assert parse_grid("") == []


def test_custom_grid_is_cartesian():
    cells = parse_grid("mask_ratio=0.25,0.75; decoder=MAP,MAE")
    assert len(cells) == 4 and cells[0][1] == {"mask_ratio": 0.25, "decoder": "MAP"}


def test_empty_grid_writes_header_only(tmp_path):
    out = tmp_path / "res.csv"
    assert run_ablation_grid(tiny_cfg(), [], out) == []
    assert out.read_text() == "cell,status,final_mse,epoch1_mse,accuracy,seconds,error\n"


def test_grid_records_failures_and_continues(tmp_path):
    grid = parse_grid("decoder_mask")[2:] + [("broken", {"heads": 3})]
    rows = run_ablation_grid(tiny_cfg(), grid, tmp_path / "r.csv", tmp_path / "w")
    assert [r["status"] for r in rows] == ["ok", "ok", "error"]
    assert "heads" in rows[-1]["error"]
    table = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["cell"] for r in table] == ["localMAE", "MAP", "broken"]
    assert all(0 <= float(r["accuracy"]) <= 1 for r in table[:2])
