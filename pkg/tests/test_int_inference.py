"""Integer-engine tests: the BN+activation threshold fold checked
exhaustively against the float predicate, trace-level agreement between
the int64 and float64 engines, freeze semantics, and checkpoint bytes
(round trips plus corruption detection at known offsets)."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mognet import int_inference as ii
from mognet import tensor_core as tc
from mognet.blocks import ModelConfig, build_model
from mognet.errors import CheckpointError, ConfigError, EngineMismatchError, ShapeError
from mognet.quantizers import levels_of, qrelu_levels
from mognet.training import recalibrate_bn

HDR = 46  # magic + version + 8 x u32 + u64


def small_config(**over):
    base = dict(n=8, groups=2, k=2, stage_count=2, class_count=4,
                in_channels=3, input_hw=8, master_seed=101)
    base.update(over)
    return ModelConfig(**base)


def warmed_model(cfg, rng, batches=3):
    """Build a model and give its BN layers data-derived statistics so the
    frozen network is not stuck on the (0, 1) init."""
    model = build_model(cfg)
    images = rng.random((batches * 16, cfg.in_channels, cfg.input_hw, cfg.input_hw))
    recalibrate_bn(model, images, batch_size=16)
    return model


def level_inputs(rng, cfg, n):
    top = levels_of(cfg.k)
    values = rng.integers(0, top + 1, size=(n, cfg.in_channels, cfg.input_hw, cfg.input_hw))
    return ii.QuantTensor.from_levels(values, cfg.k)


# ---------------------------------------------------------------------------
# threshold fold


def real_predicate(accs, bn, k):
    """The exact float expression the real engine applies per accumulator."""
    top = np.float64(levels_of(k))
    return qrelu_levels(tc.batch_norm_inference(accs / top, bn), k)


def mixed_bn(rng, channels=6):
    """BN stats covering the awkward slopes: zero, negative, near-zero
    gamma and a variance small enough to make the affine very steep."""
    gamma = rng.normal(size=channels)
    gamma[0] = 0.0
    gamma[1] = -abs(gamma[1]) - 0.2
    gamma[2] = 1e-6
    var = np.abs(rng.normal(size=channels)) + 0.05
    var[3] = 1e-12
    return tc.BNParams(gamma, rng.normal(size=channels) * 0.5,
                       rng.normal(size=channels) * 0.3, var)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_fold_matches_float_predicate_for_every_accumulator(rng, k):
    bn = mixed_bn(rng)
    c = bn.gamma.shape[0]
    bound = 96
    bank = ii.fold_bn_qrelu(bn, k, levels_of(k), bound)
    accs = np.arange(-bound, bound + 1, dtype=np.int64)
    grid = np.broadcast_to(accs, (1, c, 1, accs.size))
    got = ii.requantize(np.ascontiguousarray(grid), bank)
    want = real_predicate(grid.astype(np.float64), bn, k)
    assert np.array_equal(got, want)


def test_fold_bank_shape_and_order(rng):
    bn = mixed_bn(rng)
    bank = ii.fold_bn_qrelu(bn, 3, 7, 64)
    assert bank.thresholds.shape == (6, 7)
    assert bank.thresholds.dtype == np.int64
    # tables are stored ascending regardless of slope sign
    assert (np.diff(bank.thresholds, axis=1) >= 0).all()
    assert bank.positive.tolist() == [True, False, True, True, bn.gamma[4] >= 0, bn.gamma[5] >= 0]


def test_fold_zero_slope_channel_is_constant(rng):
    bn = tc.BNParams(np.zeros(1), np.array([0.7]), np.zeros(1), np.ones(1))
    bank = ii.fold_bn_qrelu(bn, 2, 3, 50)
    accs = np.arange(-50, 51, dtype=np.int64).reshape(1, 1, 1, -1)
    out = ii.requantize(accs, bank)
    assert (out == out.ravel()[0]).all()
    # and the constant is what the float path says
    assert out.ravel()[0] == real_predicate(np.zeros((1, 1, 1, 1)), bn, 2).ravel()[0]


def test_fold_monotone_in_accumulator(rng):
    bn = mixed_bn(rng)
    bank = ii.fold_bn_qrelu(bn, 3, 7, 80)
    accs = np.arange(-80, 81, dtype=np.int64)
    out = ii.requantize(np.ascontiguousarray(np.broadcast_to(accs, (1, 6, 1, accs.size))), bank)
    steps = np.diff(out, axis=3)
    for c in range(6):
        if bank.positive[c]:
            assert (steps[0, c] >= 0).all()
        else:
            assert (steps[0, c] <= 0).all()


@given(
    gamma=st.floats(-3, 3),
    beta=st.floats(-2, 2),
    mean=st.floats(-2, 2),
    var=st.floats(1e-9, 4.0),
    k=st.sampled_from([1, 2, 3]),
)
@settings(max_examples=60, deadline=None)
def test_fold_single_channel_property(gamma, beta, mean, var, k):
    bn = tc.BNParams(np.array([gamma]), np.array([beta]), np.array([mean]), np.array([var]))
    bound = 40
    bank = ii.fold_bn_qrelu(bn, k, levels_of(k), bound)
    accs = np.arange(-bound, bound + 1, dtype=np.int64).reshape(1, 1, 1, -1)
    got = ii.requantize(accs, bank)
    assert np.array_equal(got, real_predicate(accs.astype(np.float64), bn, k))


def test_requantize_rejects_wrong_channel_count(rng):
    bank = ii.fold_bn_qrelu(mixed_bn(rng), 2, 3, 30)
    with pytest.raises(ShapeError, match="does not match bank"):
        ii.requantize(np.zeros((1, 2, 1, 1), dtype=np.int64), bank)


def test_gate_is_strict_at_half():
    # hw * top = 12; a level sum of exactly 6 averages to 1/2 and must not fire
    sums = np.array([[5, 6, 7]], dtype=np.int64)
    assert ii._gate(sums, hw=4, top=3).tolist() == [[False, False, True]]


# ---------------------------------------------------------------------------
# freeze


def test_freeze_code_alphabets_and_dtype(rng):
    model = warmed_model(small_config(), rng)
    frozen = ii.freeze(model)
    assert frozen.stem.codes.dtype == np.int8
    assert set(np.unique(frozen.stem.codes)) <= {-1, 0, 1}
    assert set(np.unique(frozen.head.codes)) <= {-1, 1}
    for mrb in frozen.mrbs:
        for cflog in (mrb.cflog1, mrb.cflog2):
            assert set(np.unique(cflog.pw_in.codes)) <= {-1, 1}
            assert set(np.unique(cflog.gconv.codes)) <= {-1, 0, 1}
            assert cflog.gconv.groups == model.config.groups
            assert set(np.unique(cflog.pw_ca.codes)) <= {-1, 1}


def test_freeze_keeps_ca_kernel_bit_for_bit(rng):
    model = warmed_model(small_config(), rng)
    frozen = ii.freeze(model)
    live = model.ca_layers()
    flat = [c for mrb in frozen.mrbs for c in (mrb.cflog1, mrb.cflog2)]
    assert len(live) == len(flat)
    for layer, fz in zip(live, flat):
        assert np.array_equal(fz.pw_ca.codes, layer.weight.astype(np.int8))


def test_freeze_snaps_bn_to_float32(rng):
    model = warmed_model(small_config(), rng)
    frozen = ii.freeze(model)
    live = model.stem_bn.params
    for name in ("gamma", "beta", "moving_mean", "moving_var"):
        want = getattr(live, name).astype(np.float32).astype(np.float64)
        got = getattr(frozen.stem_bn, name)
        assert got.dtype == np.float64
        assert np.array_equal(got, want)


def test_freeze_is_deterministic(rng):
    model = warmed_model(small_config(), rng)
    a, b = ii.freeze(model), ii.freeze(model)
    assert np.array_equal(a.stem.codes, b.stem.codes)
    assert np.array_equal(a.head.codes, b.head.codes)
    assert np.array_equal(a.stem_bn.gamma, b.stem_bn.gamma)


def test_validate_accumulators_reports_every_requant_point(rng):
    frozen = ii.freeze(warmed_model(small_config(), rng))
    bounds = ii.validate_accumulators(frozen)
    assert set(bounds) == {"stem", "mrb0.cflog1", "mrb0.cflog2",
                           "mrb1.cflog1", "mrb1.cflog2", "head"}
    top = levels_of(frozen.config.k)
    assert bounds["stem"] == tc.accumulator_bound(frozen.stem.codes, top)
    chain = tc.accumulator_bound(frozen.mrbs[0].cflog1.pw_in.codes, top)
    chain = tc.accumulator_bound(frozen.mrbs[0].cflog1.gconv.codes, chain)
    chain = tc.accumulator_bound(frozen.mrbs[0].cflog1.pw_ca.codes, chain)
    assert bounds["mrb0.cflog1"] == chain


def test_validate_accumulators_enforces_budget(rng, monkeypatch):
    frozen = ii.freeze(warmed_model(small_config(), rng))
    monkeypatch.setattr(ii, "INT_ACC_BITS", 8)
    with pytest.raises(ConfigError, match="exceeds the signed 8-bit budget"):
        ii.validate_accumulators(frozen)


# ---------------------------------------------------------------------------
# QuantTensor


def test_quant_tensor_accepts_integer_levels():
    qt = ii.QuantTensor.from_levels(np.array([[0, 3]], dtype=np.int32), 2)
    assert qt.values.dtype == np.int64
    assert qt.k == 2


def test_quant_tensor_rejects_float_dtype():
    with pytest.raises(ShapeError, match="integer levels"):
        ii.QuantTensor.from_levels(np.zeros((1, 3)), 2)


def test_quant_tensor_rejects_out_of_range():
    with pytest.raises(ShapeError, match="out of range"):
        ii.QuantTensor.from_levels(np.array([4], dtype=np.int64), 2)
    with pytest.raises(ShapeError, match="out of range"):
        ii.QuantTensor.from_levels(np.array([-1], dtype=np.int64), 2)


def test_quant_tensor_allows_empty():
    qt = ii.QuantTensor.from_levels(np.zeros((0, 3, 4, 4), dtype=np.int64), 3)
    assert qt.values.size == 0


# ---------------------------------------------------------------------------
# engines


@pytest.mark.parametrize("k", [1, 2, 3])
def test_engines_agree_on_every_traced_tensor(rng, k):
    cfg = small_config(k=k, master_seed=100 + k)
    frozen = ii.freeze(warmed_model(cfg, rng))
    x = level_inputs(rng, cfg, 64)
    ir = ii.int_forward(x, frozen, collect_trace=True)
    rr = ii.real_forward(x, frozen, collect_trace=True)
    assert ii.compare_traces(ir, rr) == []
    assert np.array_equal(ir.labels, rr.labels)
    assert ir.scores.dtype == np.int64
    assert rr.scores.dtype == np.float64


def test_trace_has_one_entry_per_checkpointed_tensor(rng):
    cfg = small_config()
    frozen = ii.freeze(warmed_model(cfg, rng))
    x = level_inputs(rng, cfg, 4)
    ir = ii.int_forward(x, frozen, collect_trace=True)
    assert set(ir.trace) == {
        "stem.act",
        "mrb0.h1", "mrb0.i1", "mrb0.out", "mrb0.pool",
        "mrb1.h1", "mrb1.i1", "mrb1.out", "mrb1.pool",
        "head.acc",
    }
    # without the flag no trace is built
    assert ii.int_forward(x, frozen).trace == {}


def test_int_trace_values_stay_on_the_level_grid(rng):
    cfg = small_config(k=2)
    frozen = ii.freeze(warmed_model(cfg, rng))
    ir = ii.int_forward(level_inputs(rng, cfg, 8), frozen, collect_trace=True)
    top = levels_of(cfg.k)
    for name in ("stem.act", "mrb0.h1", "mrb1.i1"):
        arr = ir.trace[name]
        assert arr.dtype == np.int64
        assert arr.min() >= 0 and arr.max() <= top


def test_compare_traces_flags_tampered_tensor_and_labels(rng):
    cfg = small_config()
    frozen = ii.freeze(warmed_model(cfg, rng))
    x = level_inputs(rng, cfg, 8)
    ir = ii.int_forward(x, frozen, collect_trace=True)
    rr = ii.real_forward(x, frozen, collect_trace=True)
    bent = ii.ForwardResult(ir.scores, ir.labels.copy(), dict(ir.trace))
    bent.trace["mrb0.i1"] = bent.trace["mrb0.i1"] + 1
    bent.labels[0] = (bent.labels[0] + 1) % cfg.class_count
    flagged = ii.compare_traces(bent, rr)
    assert "mrb0.i1" in flagged and "labels" in flagged
    assert "stem.act" not in flagged


def test_fixed_point_head_matches_float_argmax(rng):
    bn = tc.BNParams(rng.normal(size=4) + 1.5, rng.normal(size=4),
                     rng.normal(size=4) * 0.2, np.abs(rng.normal(size=4)) + 0.5)
    acc = rng.integers(-200, 200, size=(16, 4, 2, 2)).astype(np.int64)
    k = 2
    fx = ii.fixed_point_scores(acc, bn, k)
    logits = tc.global_avg_pool(tc.batch_norm_inference(acc / np.float64(levels_of(k)), bn))
    gaps = np.sort(logits, axis=1)
    assert (gaps[:, -1] - gaps[:, -2] > 1e-3).all()  # no fixed-point coin flips
    assert np.array_equal(fx.argmax(axis=1), logits.argmax(axis=1))


def test_fixed_point_head_overflow_guard():
    bn = tc.BNParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))
    acc = np.full((1, 2, 1, 1), 2**50, dtype=np.int64)
    with pytest.raises(ConfigError, match="overflow"):
        ii.fixed_point_scores(acc, bn, 2)


def test_engine_input_validation(rng):
    cfg = small_config()
    frozen = ii.freeze(warmed_model(cfg, rng))
    wrong_k = ii.QuantTensor.from_levels(
        np.zeros((1, 3, 8, 8), dtype=np.int64), cfg.k + 1)
    with pytest.raises(ConfigError, match="k="):
        ii.int_forward(wrong_k, frozen)
    wrong_hw = ii.QuantTensor.from_levels(np.zeros((1, 3, 4, 4), dtype=np.int64), cfg.k)
    with pytest.raises(ShapeError, match="engine input shape"):
        ii.real_forward(wrong_hw, frozen)


def test_dual_engine_labels_happy_path(rng):
    cfg = small_config(k=1)
    frozen = ii.freeze(warmed_model(cfg, rng))
    x = level_inputs(rng, cfg, 32)
    labels = ii.dual_engine_labels(x, frozen)
    assert np.array_equal(labels, ii.int_forward(x, frozen).labels)


def test_dual_engine_labels_reports_first_disagreement(rng, monkeypatch):
    cfg = small_config()
    frozen = ii.freeze(warmed_model(cfg, rng))
    x = level_inputs(rng, cfg, 8)
    real = ii.real_forward(x, frozen)
    fake_labels = real.labels.copy()
    fake_labels[[1, 3]] = (fake_labels[[1, 3]] + 1) % cfg.class_count
    fake = ii.ForwardResult(real.scores, fake_labels, {})
    monkeypatch.setattr(ii, "int_forward", lambda *a, **kw: fake)
    with pytest.raises(EngineMismatchError, match=r"2 of 8 samples; first at index 1"):
        ii.dual_engine_labels(x, frozen)


# ---------------------------------------------------------------------------
# checkpoints

# n = 12 is chosen so two sections end mid-byte: the grouped conv packs
# 162 codes (2 left over in the last byte) and the 12-bit seed row leaves
# 4 pad bits.  That exercises the padding checks on real offsets.
CKPT_CFG = dict(n=12, groups=2, k=2, stage_count=1, class_count=2,
                in_channels=3, input_hw=8, master_seed=55)


def ckpt_blob(rng, tmp_path):
    cfg = ModelConfig(**CKPT_CFG)
    model = warmed_model(cfg, rng)
    path = tmp_path / "model.mgnc"
    frozen = ii.export_checkpoint(model, str(path))
    return cfg, frozen, path, bytearray(path.read_bytes())


def section_offsets(cfg):
    stem_bytes = (2 * cfg.n * cfg.in_channels * 9 + 7) // 8
    bn_bytes = 16 * cfg.n
    m = cfg.n // 2
    pw_bytes = (m * cfg.n + 7) // 8
    gconv_codes = m * (m // cfg.groups) * 9
    assert gconv_codes % 4 == 2 and cfg.n % 8 == 4  # the pad bits we rely on
    stem_bn = HDR + stem_bytes
    gconv = stem_bn + bn_bytes + pw_bytes
    seed = gconv + (2 * gconv_codes + 7) // 8
    return {"stem": HDR, "stem_bn": stem_bn, "gconv": gconv, "seed": seed,
            "seed_end": seed + (cfg.n + 7) // 8}


def test_checkpoint_round_trip_is_byte_identical(rng, tmp_path):
    cfg, frozen, path, blob = ckpt_blob(rng, tmp_path)
    loaded = ii.import_checkpoint(str(path))
    path2 = tmp_path / "again.mgnc"
    ii.export_checkpoint(loaded, str(path2))
    assert path2.read_bytes() == bytes(blob)
    assert loaded.config == cfg


def test_checkpoint_preserves_integer_forward(rng, tmp_path):
    cfg, frozen, path, _ = ckpt_blob(rng, tmp_path)
    loaded = ii.import_checkpoint(str(path))
    x = level_inputs(rng, cfg, 32)
    before = ii.int_forward(x, frozen)
    after = ii.int_forward(x, loaded)
    assert np.array_equal(before.scores, after.scores)
    assert np.array_equal(before.labels, after.labels)


def test_checkpoint_export_is_deterministic(rng, tmp_path):
    cfg = ModelConfig(**CKPT_CFG)
    model = warmed_model(cfg, rng)
    p1, p2 = tmp_path / "a.mgnc", tmp_path / "b.mgnc"
    ii.export_checkpoint(model, str(p1))
    ii.export_checkpoint(model, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def corrupt(blob, tmp_path, name="bad.mgnc"):
    p = tmp_path / name
    p.write_bytes(bytes(blob))
    return str(p)


def test_checkpoint_rejects_bad_magic(rng, tmp_path):
    _, _, _, blob = ckpt_blob(rng, tmp_path)
    blob[0] ^= 0xFF
    with pytest.raises(CheckpointError, match="bad magic"):
        ii.import_checkpoint(corrupt(blob, tmp_path))


def test_checkpoint_rejects_unknown_version(rng, tmp_path):
    _, _, _, blob = ckpt_blob(rng, tmp_path)
    blob[4:6] = struct.pack("<H", 9)
    with pytest.raises(CheckpointError, match="version 9"):
        ii.import_checkpoint(corrupt(blob, tmp_path))


def test_checkpoint_rejects_truncation(rng, tmp_path):
    _, _, _, blob = ckpt_blob(rng, tmp_path)
    with pytest.raises(CheckpointError, match="truncated checkpoint"):
        ii.import_checkpoint(corrupt(blob[:-1], tmp_path))


def test_checkpoint_rejects_trailing_bytes(rng, tmp_path):
    _, _, _, blob = ckpt_blob(rng, tmp_path)
    with pytest.raises(CheckpointError, match="1 trailing bytes"):
        ii.import_checkpoint(corrupt(blob + b"\x00", tmp_path))


def test_checkpoint_rejects_invalid_header(rng, tmp_path):
    _, _, _, blob = ckpt_blob(rng, tmp_path)
    blob[6:10] = struct.pack("<I", 7)  # odd channel count never validates
    with pytest.raises(CheckpointError, match="header invalid"):
        ii.import_checkpoint(corrupt(blob, tmp_path))


def test_checkpoint_rejects_invalid_ternary_pattern(rng, tmp_path):
    cfg, _, _, blob = ckpt_blob(rng, tmp_path)
    off = section_offsets(cfg)["stem"]
    blob[off] = 0b00000010  # first code becomes the reserved 10 pattern
    with pytest.raises(CheckpointError, match=f"bit pattern 10 at byte {off}"):
        ii.import_checkpoint(corrupt(blob, tmp_path))


def test_checkpoint_rejects_nonzero_ternary_padding(rng, tmp_path):
    cfg, _, _, blob = ckpt_blob(rng, tmp_path)
    offs = section_offsets(cfg)
    blob[offs["seed"] - 1] |= 0b00010000  # pad slot of the gconv section's last byte
    with pytest.raises(CheckpointError,
                       match=f"padding bits in ternary section at byte {offs['gconv']}"):
        ii.import_checkpoint(corrupt(blob, tmp_path))


def test_checkpoint_rejects_nonzero_bit_padding(rng, tmp_path):
    cfg, _, _, blob = ckpt_blob(rng, tmp_path)
    offs = section_offsets(cfg)
    blob[offs["seed_end"] - 1] |= 0b10000000  # beyond the 12 seed cells
    with pytest.raises(CheckpointError,
                       match=f"padding bits in bit section at byte {offs['seed']}"):
        ii.import_checkpoint(corrupt(blob, tmp_path))


def test_checkpoint_rejects_negative_bn_variance(rng, tmp_path):
    cfg, _, _, blob = ckpt_blob(rng, tmp_path)
    off = section_offsets(cfg)["stem_bn"]
    var_off = off + 3 * 4 * cfg.n  # fourth float32 vector of the section
    blob[var_off:var_off + 4] = struct.pack("<f", -1.0)
    with pytest.raises(CheckpointError, match=f"negative BN variance in stem BN at byte {off}"):
        ii.import_checkpoint(corrupt(blob, tmp_path))


def test_checkpoint_missing_file():
    with pytest.raises(CheckpointError, match="cannot read checkpoint"):
        ii.import_checkpoint("/nonexistent/nowhere.mgnc")
