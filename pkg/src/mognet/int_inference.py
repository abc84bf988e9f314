"""Integer-only inference and checkpoint serialization.

Two inference engines run frozen models:

* :func:`int_forward` -- int64 arithmetic end to end.  Batch norm plus
  the k-bit activation of each layer are folded into per-channel integer
  threshold tables; requantization is a counting operation over those
  tables, the halving op is a bit shift (or an OR for k == 1), and the
  classifier head is evaluated in 32.16 fixed point.
* :func:`real_forward` -- a float64 simulation that carries integer
  quantization *levels* between layers and divides by (2^k - 1) exactly
  once in front of each batch norm.  Every accumulator it produces is an
  integer-valued float well below 2^53, so its values are exact and the
  two engines can be compared bit for bit.

The threshold fold searches, per channel and output level, for the
smallest (largest, for negative BN slope) integer accumulator whose
*real-engine* activation reaches that level, evaluating the very same
float64 expression the real engine applies.  That makes agreement a
construction property rather than a tolerance.

Checkpoints serialize the frozen model: a fixed header, ternary codes at
2 bits each, binary codes at 1 bit, BN vectors as float32, and CA layers
as their seed rows only (kernels are regenerated on load).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .blocks import Model, ModelConfig
from .ca_weights import CAConfig, generate_kernel
from .errors import CheckpointError, ConfigError, EngineMismatchError, ShapeError
from .quantizers import levels_of, qrelu_levels

INT_ACC_BITS = 32  # the deployment contract for conv accumulators
FX_FRAC_BITS = 16


# ---------------------------------------------------------------------------
# frozen model


@dataclass
class FrozenConv:
    kind: str  # "ternary" | "binary" | "ca"
    codes: np.ndarray  # int8, (c_out, c_in // groups, kh, kw)
    groups: int = 1


@dataclass
class FrozenCflog:
    pw_in: FrozenConv
    gconv: FrozenConv
    ca_config: CAConfig
    pw_ca: FrozenConv


@dataclass
class FrozenMrb:
    cflog1: FrozenCflog
    bn1: tc.BNParams
    cflog2: FrozenCflog
    bn2: tc.BNParams


@dataclass
class FrozenModel:
    config: ModelConfig
    stem: FrozenConv
    stem_bn: tc.BNParams
    mrbs: list[FrozenMrb]
    head: FrozenConv
    head_bn: tc.BNParams


def _round_f32(p: tc.BNParams) -> tc.BNParams:
    """Snap BN vectors to float32 precision (kept as float64 arrays).

    Freezing rounds once so that the live model, the checkpoint, and
    everything reloaded from it evaluate identical coefficients.
    """
    return tc.BNParams(
        gamma=p.gamma.astype(np.float32).astype(np.float64),
        beta=p.beta.astype(np.float32).astype(np.float64),
        moving_mean=p.moving_mean.astype(np.float32).astype(np.float64),
        moving_var=p.moving_var.astype(np.float32).astype(np.float64),
        eps=p.eps,
    )


def _freeze_cflog(cflog) -> FrozenCflog:
    return FrozenCflog(
        pw_in=FrozenConv("binary", cflog.pw_in.quantized().astype(np.int8)),
        gconv=FrozenConv("ternary", cflog.gconv.quantized().astype(np.int8), cflog.gconv.groups),
        ca_config=cflog.pw_ca.config,
        pw_ca=FrozenConv("ca", cflog.pw_ca.weight.astype(np.int8)),
    )


def freeze(model: Model) -> FrozenModel:
    """Quantize weights to int8 codes and round BN state to float32."""
    frozen = FrozenModel(
        config=model.config,
        stem=FrozenConv("ternary", model.stem.quantized().astype(np.int8)),
        stem_bn=_round_f32(model.stem_bn.params),
        mrbs=[
            FrozenMrb(
                cflog1=_freeze_cflog(b.cflog1),
                bn1=_round_f32(b.bn1.params),
                cflog2=_freeze_cflog(b.cflog2),
                bn2=_round_f32(b.bn2.params),
            )
            for b in model.mrbs
        ],
        head=FrozenConv("binary", model.head.quantized().astype(np.int8)),
        head_bn=_round_f32(model.head_bn.params),
    )
    validate_accumulators(frozen)
    return frozen


def _cflog_bound(cflog: FrozenCflog, in_bound: int) -> int:
    b = tc.accumulator_bound(cflog.pw_in.codes, in_bound)
    b = tc.accumulator_bound(cflog.gconv.codes, b)
    return tc.accumulator_bound(cflog.pw_ca.codes, b)


def validate_accumulators(frozen: FrozenModel) -> dict[str, int]:
    """Worst-case |accumulator| per requantization point.  Raises if any
    exceeds the signed 32-bit contract (computation itself runs in int64,
    so an overflow here is a config error, never silent wraparound)."""
    top = levels_of(frozen.config.k)
    bounds = {"stem": tc.accumulator_bound(frozen.stem.codes, top)}
    for i, mrb in enumerate(frozen.mrbs):
        bounds[f"mrb{i}.cflog1"] = _cflog_bound(mrb.cflog1, top)
        bounds[f"mrb{i}.cflog2"] = _cflog_bound(mrb.cflog2, top)
    bounds["head"] = tc.accumulator_bound(frozen.head.codes, top)
    limit = 2 ** (INT_ACC_BITS - 1) - 1
    for name, b in bounds.items():
        if b > limit:
            raise ConfigError(
                f"{name}: worst-case accumulator {b} exceeds the signed {INT_ACC_BITS}-bit budget"
            )
    return bounds


# ---------------------------------------------------------------------------
# quantized tensors


@dataclass
class QuantTensor:
    """Integer activation levels on the k-bit grid [0, 2^k - 1]."""

    values: np.ndarray
    k: int

    @classmethod
    def from_levels(cls, values: np.ndarray, k: int) -> "QuantTensor":
        values = np.asarray(values)
        if not np.issubdtype(values.dtype, np.integer):
            raise ShapeError(f"QuantTensor needs integer levels, got dtype {values.dtype}")
        top = levels_of(k)
        if values.size and (values.min() < 0 or values.max() > top):
            raise ShapeError(
                f"levels out of range for k={k}: [{values.min()}, {values.max()}] vs [0, {top}]"
            )
        return cls(values.astype(np.int64), k)


# ---------------------------------------------------------------------------
# BN + activation fold


@dataclass
class ThresholdBank:
    """Per-channel requantization tables.

    ``thresholds[c]`` holds 2^k - 1 integers in ascending order.  For a
    positive-slope channel the output level of an accumulator ``a`` is
    the number of thresholds <= a; for a negative slope it is the number
    of thresholds >= a.  Constant channels are encoded with out-of-range
    thresholds, so ties (several levels jumped in one accumulator step)
    need no special casing anywhere.
    """

    thresholds: np.ndarray  # int64 (C, 2^k - 1)
    positive: np.ndarray  # bool (C,)
    k: int
    acc_bound: int


def fold_bn_qrelu(bn: tc.BNParams, k: int, accumulator_scale: int, acc_bound: int) -> ThresholdBank:
    """Fold inference BN plus the k-bit activation into threshold tables.

    ``accumulator_scale`` is the integer factor relating accumulators to
    real pre-BN values (inputs carry levels scaled by 2^k - 1, and convs
    are linear, so it is 2^k - 1 at every requantization point).
    """
    scale, shift = tc.bn_affine(bn)
    top = levels_of(k)
    denom = np.float64(accumulator_scale)
    c_n = scale.shape[0]
    lo, hi = -int(acc_bound), int(acc_bound)

    def level_at(acc: int, c: int) -> int:
        # Mirrors real_forward exactly: divide, affine, quantize.
        y = (np.float64(acc) / denom) * scale[c] + shift[c]
        return int(qrelu_levels(y, k))

    thresholds = np.empty((c_n, top), dtype=np.int64)
    positive = np.empty(c_n, dtype=bool)
    for c in range(c_n):
        a = scale[c]
        positive[c] = a >= 0
        if a == 0.0:
            lv0 = level_at(0, c)
            thresholds[c, :lv0] = lo - 1
            thresholds[c, lv0:] = hi + 1
            continue
        ts = []
        for lv in range(1, top + 1):
            if a > 0:
                # smallest reachable acc whose level reaches lv
                if level_at(hi, c) < lv:
                    ts.append(hi + 1)
                    continue
                if level_at(lo, c) >= lv:
                    ts.append(lo)
                    continue
                bad, good = lo, hi  # level(bad) < lv <= level(good)
                while good - bad > 1:
                    mid = (bad + good) // 2
                    if level_at(mid, c) >= lv:
                        good = mid
                    else:
                        bad = mid
                ts.append(good)
            else:
                # largest reachable acc whose level reaches lv
                if level_at(lo, c) < lv:
                    ts.append(lo - 1)
                    continue
                if level_at(hi, c) >= lv:
                    ts.append(hi)
                    continue
                good, bad = lo, hi  # level(good) >= lv > level(bad)
                while bad - good > 1:
                    mid = (good + bad) // 2
                    if level_at(mid, c) >= lv:
                        good = mid
                    else:
                        bad = mid
                ts.append(good)
        thresholds[c] = ts if positive[c] else ts[::-1]
    return ThresholdBank(thresholds, positive, k, int(acc_bound))


def requantize(acc: np.ndarray, bank: ThresholdBank) -> np.ndarray:
    """Map int64 accumulators to activation levels via threshold counting."""
    if acc.ndim != 4 or acc.shape[1] != bank.thresholds.shape[0]:
        raise ShapeError(
            f"accumulator shape {acc.shape} does not match bank with {bank.thresholds.shape[0]} channels"
        )
    top = bank.thresholds.shape[1]
    out = np.empty_like(acc)
    for c in range(acc.shape[1]):
        flat = acc[:, c].ravel()
        if bank.positive[c]:
            lv = np.searchsorted(bank.thresholds[c], flat, side="right")
        else:
            lv = top - np.searchsorted(bank.thresholds[c], flat, side="left")
        out[:, c] = lv.reshape(acc[:, c].shape)
    return out


@dataclass
class BankSet:
    stem: ThresholdBank
    mrbs: list[tuple[ThresholdBank, ThresholdBank]]


def prepare_banks(frozen: FrozenModel) -> BankSet:
    k = frozen.config.k
    top = levels_of(k)
    stem = fold_bn_qrelu(
        frozen.stem_bn, k, top, tc.accumulator_bound(frozen.stem.codes, top)
    )
    mrbs = []
    for mrb in frozen.mrbs:
        b1 = fold_bn_qrelu(mrb.bn1, k, top, _cflog_bound(mrb.cflog1, top))
        b2 = fold_bn_qrelu(mrb.bn2, k, top, _cflog_bound(mrb.cflog2, top))
        mrbs.append((b1, b2))
    return BankSet(stem, mrbs)


# ---------------------------------------------------------------------------
# engines


def _conv(x: np.ndarray, layer: FrozenConv) -> np.ndarray:
    return tc.conv2d(x, layer.codes, groups=layer.groups, padding="same")


def _cflog(x: np.ndarray, cflog: FrozenCflog) -> np.ndarray:
    a = _conv(x, cflog.pw_in)
    a = _conv(a, cflog.gconv)
    return _conv(a, cflog.pw_ca)


def _gate(level_sums: np.ndarray, hw: int, top: int) -> np.ndarray:
    """Channel gate on exact level sums: GAP(x) > 1/2 of the top code."""
    return 2 * level_sums > hw * top


@dataclass
class ForwardResult:
    scores: np.ndarray  # (N, classes); int64 fixed point or float64
    labels: np.ndarray  # (N,)
    trace: dict[str, np.ndarray]


def fixed_point_scores(acc: np.ndarray, bn: tc.BNParams, k: int) -> np.ndarray:
    """Classifier scores in 32.16 fixed point, int64 arithmetic only.

    Real-engine logits are mean(BN(acc / top)); scaled by
    top * H * W * 2^16 they become A_fx * sum(acc) + B_fx * top * H * W
    with A_fx, B_fx the rounded fixed-point BN affine.  Scaling is
    order-preserving, so argmax matches up to fixed-point rounding.
    """
    scale, shift = tc.bn_affine(bn)
    top = levels_of(k)
    hw = acc.shape[2] * acc.shape[3]
    a_fx = np.rint(scale * (1 << FX_FRAC_BITS)).astype(np.int64)
    b_fx = np.rint(shift * (1 << FX_FRAC_BITS)).astype(np.int64)
    sums = acc.sum(axis=(2, 3))
    worst = int(np.abs(a_fx).max(initial=0)) * int(np.abs(sums).max(initial=1)) + int(
        np.abs(b_fx).max(initial=0)
    ) * top * hw
    if worst >= 2**62:
        raise ConfigError(f"fixed-point head would overflow int64 (worst-case {worst})")
    return a_fx[None, :] * sums + b_fx[None, :] * (top * hw)


def _check_engine_input(x: QuantTensor, frozen: FrozenModel) -> None:
    if x.k != frozen.config.k:
        raise ConfigError(f"input is k={x.k} but model expects k={frozen.config.k}")
    cfg = frozen.config
    if x.values.ndim != 4 or x.values.shape[1:] != (cfg.in_channels, cfg.input_hw, cfg.input_hw):
        raise ShapeError(
            f"engine input shape {x.values.shape} does not match model "
            f"(N, {cfg.in_channels}, {cfg.input_hw}, {cfg.input_hw})"
        )


def int_forward(
    x: QuantTensor, frozen: FrozenModel, banks: BankSet | None = None, collect_trace: bool = False
) -> ForwardResult:
    """Run the frozen model on integer levels; int64 arithmetic throughout."""
    _check_engine_input(x, frozen)
    banks = banks or prepare_banks(frozen)
    k = frozen.config.k
    top = levels_of(k)
    trace: dict[str, np.ndarray] = {}

    def put(name: str, arr: np.ndarray) -> None:
        if collect_trace:
            trace[name] = arr

    h = requantize(_conv(x.values, frozen.stem), banks.stem)
    put("stem.act", h)
    for i, (mrb, (bank1, bank2)) in enumerate(zip(frozen.mrbs, banks.mrbs)):
        h1 = requantize(_cflog(h, mrb.cflog1), bank1)
        put(f"mrb{i}.h1", h1)
        i1 = requantize(_cflog(h1, mrb.cflog2), bank2)
        put(f"mrb{i}.i1", i1)
        y = h + i1
        i0 = np.bitwise_or(h, i1) if k == 1 else y >> 1
        s = _gate(h.sum(axis=(2, 3)), h.shape[2] * h.shape[3], top)
        h = np.where(s[:, :, None, None], i1, i0)
        put(f"mrb{i}.out", h)
        h, _ = tc.maxpool2x2(h)
        put(f"mrb{i}.pool", h)
    acc = _conv(h, frozen.head)
    put("head.acc", acc)
    scores = fixed_point_scores(acc, frozen.head_bn, k)
    return ForwardResult(scores, scores.argmax(axis=1), trace)


def real_forward(
    x: QuantTensor, frozen: FrozenModel, collect_trace: bool = False
) -> ForwardResult:
    """Float64 twin of :func:`int_forward`.

    Activations travel as integer *levels* held in float64; each BN input
    is produced by a single division of the accumulator by 2^k - 1.  All
    conv sums stay far below 2^53, so every traced tensor is exact and
    directly comparable to the integer engine's.
    """
    _check_engine_input(x, frozen)
    k = frozen.config.k
    top_f = np.float64(levels_of(k))
    top = levels_of(k)
    trace: dict[str, np.ndarray] = {}

    def put(name: str, arr: np.ndarray) -> None:
        if collect_trace:
            trace[name] = arr

    def requant_real(acc_lv: np.ndarray, bn: tc.BNParams) -> np.ndarray:
        return qrelu_levels(tc.batch_norm_inference(acc_lv / top_f, bn), k)

    xf = x.values.astype(np.float64)
    h = requant_real(_conv(xf, frozen.stem), frozen.stem_bn)
    put("stem.act", h)
    for i, mrb in enumerate(frozen.mrbs):
        h1 = requant_real(_cflog(h, mrb.cflog1), mrb.bn1)
        put(f"mrb{i}.h1", h1)
        i1 = requant_real(_cflog(h1, mrb.cflog2), mrb.bn2)
        put(f"mrb{i}.i1", i1)
        y = h + i1
        i0 = np.ceil(y / 2.0) if k == 1 else np.floor(y / 2.0)
        s = _gate(h.sum(axis=(2, 3)), h.shape[2] * h.shape[3], top)
        h = np.where(s[:, :, None, None], i1, i0)
        put(f"mrb{i}.out", h)
        h, _ = tc.maxpool2x2(h)
        put(f"mrb{i}.pool", h)
    acc = _conv(h, frozen.head)
    put("head.acc", acc)
    logits = tc.global_avg_pool(tc.batch_norm_inference(acc / top_f, frozen.head_bn))
    return ForwardResult(logits, logits.argmax(axis=1), trace)


def compare_traces(int_result: ForwardResult, real_result: ForwardResult) -> list[str]:
    """Names of traced tensors where the engines disagree (expected: none).

    Real-engine traces are integer-valued float64 arrays, so equality is
    exact, not approximate.
    """
    mismatches = []
    for name, int_arr in int_result.trace.items():
        real_arr = real_result.trace[name]
        if int_arr.shape != real_arr.shape or not np.array_equal(
            int_arr.astype(np.float64), real_arr
        ):
            mismatches.append(name)
    if not np.array_equal(int_result.labels, real_result.labels):
        mismatches.append("labels")
    return mismatches


def dual_engine_labels(
    x: QuantTensor, frozen: FrozenModel, banks: BankSet | None = None
) -> np.ndarray:
    """Labels from both engines; raises on the first disagreement."""
    ir = int_forward(x, frozen, banks)
    rr = real_forward(x, frozen)
    diff = np.flatnonzero(ir.labels != rr.labels)
    if diff.size:
        raise EngineMismatchError(
            f"engines disagree on {diff.size} of {ir.labels.size} samples; first at index {int(diff[0])}"
        )
    return ir.labels


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Layout (little endian), lengths fully determined by the header:
#   magic "MGNC" | u16 version | u32 x8 (n, groups, k, stage_count,
#   class_count, in_channels, input_hw, ca_rule) | u64 master_seed
#   stem ternary codes      2 bits/code, 4 codes/byte, LSB first
#   stem BN                 4 float32 vectors (gamma, beta, mean, var)
#   per stage, twice (cflog1 then cflog2):
#     pw_in binary codes    1 bit/code (+1 -> 1), LSB first
#     gconv ternary codes   2 bits/code
#     CA seed row           1 bit/cell
#     BN                    4 float32 vectors
#   head binary codes       1 bit/code
#   head BN                 4 float32 vectors
# Ternary bit patterns: 00 = 0, 01 = +1, 11 = -1 (10 is invalid).
# Pad bits at the end of a section must be zero.

MAGIC = b"MGNC"
VERSION = 1


def _pack_ternary(codes: np.ndarray) -> bytes:
    flat = codes.astype(np.int8).ravel()
    two_bit = np.where(flat == 0, 0, np.where(flat == 1, 1, 3)).astype(np.uint8)
    pad = (-len(two_bit)) % 4
    if pad:
        two_bit = np.concatenate([two_bit, np.zeros(pad, dtype=np.uint8)])
    quads = two_bit.reshape(-1, 4)
    return (quads[:, 0] | quads[:, 1] << 2 | quads[:, 2] << 4 | quads[:, 3] << 6).astype(np.uint8).tobytes()


def _unpack_ternary(raw: bytes, count: int, base_offset: int) -> np.ndarray:
    data = np.frombuffer(raw, dtype=np.uint8)
    two_bit = np.empty(len(data) * 4, dtype=np.uint8)
    for sl in range(4):
        two_bit[sl::4] = (data >> (2 * sl)) & 3
    if (two_bit[count:] != 0).any():
        raise CheckpointError(f"nonzero padding bits in ternary section at byte {base_offset}")
    two_bit = two_bit[:count]
    bad = np.flatnonzero(two_bit == 2)
    if bad.size:
        raise CheckpointError(
            f"invalid ternary bit pattern 10 at byte {base_offset + int(bad[0]) // 4}"
        )
    return np.select([two_bit == 1, two_bit == 3], [1, -1], 0).astype(np.int8)


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(raw: bytes, count: int, base_offset: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if (bits[count:] != 0).any():
        raise CheckpointError(f"nonzero padding bits in bit section at byte {base_offset}")
    return bits[:count]


def _bn_bytes(p: tc.BNParams) -> bytes:
    return b"".join(
        v.astype("<f4").tobytes() for v in (p.gamma, p.beta, p.moving_mean, p.moving_var)
    )


def export_checkpoint(model: Model | FrozenModel, path: str) -> FrozenModel:
    """Serialize a model (frozen on the fly if needed) to ``path``."""
    frozen = freeze(model) if isinstance(model, Model) else model
    cfg = frozen.config
    out = [MAGIC, struct.pack("<H", VERSION)]
    out.append(
        struct.pack(
            "<8IQ",
            cfg.n,
            cfg.groups,
            cfg.k,
            cfg.stage_count,
            cfg.class_count,
            cfg.in_channels,
            cfg.input_hw,
            cfg.ca_rule,
            cfg.master_seed,
        )
    )
    out.append(_pack_ternary(frozen.stem.codes))
    out.append(_bn_bytes(frozen.stem_bn))
    for mrb in frozen.mrbs:
        for cflog, bn in ((mrb.cflog1, mrb.bn1), (mrb.cflog2, mrb.bn2)):
            out.append(_pack_bits(cflog.pw_in.codes.ravel() == 1))
            out.append(_pack_ternary(cflog.gconv.codes))
            out.append(_pack_bits(cflog.ca_config.resolved_seed()))
            out.append(_bn_bytes(bn))
    out.append(_pack_bits(frozen.head.codes.ravel() == 1))
    out.append(_bn_bytes(frozen.head_bn))
    blob = b"".join(out)
    with open(path, "wb") as fh:
        fh.write(blob)
    return frozen


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at byte {self.off}, "
                f"only {len(self.data) - self.off} left"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def bn(self, channels: int, what: str) -> tc.BNParams:
        base = self.off
        raw = self.take(16 * channels, what)
        vecs = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(4, channels)
        p = tc.BNParams(vecs[0].copy(), vecs[1].copy(), vecs[2].copy(), vecs[3].copy())
        if (p.moving_var < 0).any():
            raise CheckpointError(f"negative BN variance in {what} at byte {base}")
        return p

    def ternary(self, shape: tuple, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        base = self.off
        raw = self.take((count * 2 + 7) // 8, what)
        return _unpack_ternary(raw, count, base).reshape(shape)

    def binary(self, shape: tuple, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        base = self.off
        raw = self.take((count + 7) // 8, what)
        bits = _unpack_bits(raw, count, base)
        return (bits.astype(np.int8) * 2 - 1).reshape(shape)

    def seed_row(self, width: int, what: str) -> np.ndarray:
        base = self.off
        raw = self.take((width + 7) // 8, what)
        return _unpack_bits(raw, width, base)


def import_checkpoint(path: str) -> FrozenModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {e}") from e
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    header = struct.unpack("<8IQ", r.take(40, "config header"))
    cfg = ModelConfig(
        n=header[0],
        groups=header[1],
        k=header[2],
        stage_count=header[3],
        class_count=header[4],
        in_channels=header[5],
        input_hw=header[6],
        ca_rule=header[7],
        master_seed=header[8],
    )
    try:
        cfg.validate()
    except ConfigError as e:
        raise CheckpointError(f"checkpoint header invalid: {e}") from e
    n, m = cfg.n, cfg.n // 2
    stem = FrozenConv("ternary", r.ternary((n, cfg.in_channels, 3, 3), "stem codes"))
    stem_bn = r.bn(n, "stem BN")
    mrbs = []
    for i in range(cfg.stage_count):
        parts = []
        for half in (1, 2):
            tag = f"mrb{i}.cflog{half}"
            pw = FrozenConv("binary", r.binary((m, n, 1, 1), f"{tag}.pw_in codes"))
            gc = FrozenConv(
                "ternary",
                r.ternary((m, m // cfg.groups, 3, 3), f"{tag}.gconv codes"),
                cfg.groups,
            )
            seed = r.seed_row(n, f"{tag} CA seed")
            ca_cfg = CAConfig(width=n, steps=m, rule=cfg.ca_rule, seed_row=seed)
            ca = FrozenConv("ca", generate_kernel(ca_cfg)[:, :, None, None])
            bn = r.bn(n, f"mrb{i}.bn{half}")
            parts.append((FrozenCflog(pw, gc, ca_cfg, ca), bn))
        mrbs.append(FrozenMrb(parts[0][0], parts[0][1], parts[1][0], parts[1][1]))
    head = FrozenConv("binary", r.binary((cfg.class_count, n, 1, 1), "head codes"))
    head_bn = r.bn(cfg.class_count, "head BN")
    if r.off != len(blob):
        raise CheckpointError(f"{len(blob) - r.off} trailing bytes after byte {r.off}")
    frozen = FrozenModel(cfg, stem, stem_bn, mrbs, head, head_bn)
    validate_accumulators(frozen)
    return frozen
