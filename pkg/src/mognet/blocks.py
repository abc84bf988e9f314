"""Model building blocks and the full network.

Layout of the network built by :class:`Model`:

    stem 3x3 ternary conv (in_channels -> n) -> BN -> activation
    stage_count times: [residual block -> 2x2 maxpool]
    head 1x1 binary conv (n -> class_count) -> BN -> global avg pool

All convolutions are bias-free; batch norm carries the only additive
terms.  The residual block ("MRB") multiplexes per channel between an
additive half-rate path and a two-conv bottleneck path, steered by a
thresholded global-average-pool gate.

Layers are plain classes that cache whatever their manual backward pass
needs on ``self``; ``backward`` consumes the cache and returns the
gradient w.r.t. the layer input.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor_core as tc
from .ca_weights import CAConfig, default_seed, generate_kernel
from .errors import ConfigError, ShapeError
from .quantizers import (
    binarize,
    bitshift_forward,
    qrelu_forward,
    ste_mask,
    TernarySpec,
    ternary_quantize,
)

# When enabled, every quantized forward asserts its weight codes stay in
# the allowed alphabet.  Cheap, but off by default outside debug runs.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CflogConfig:
    """Factorised conv block: pointwise binary (c_in -> latent), grouped
    3x3 ternary (latent -> latent), fixed CA pointwise (latent -> c_out),
    with no nonlinearity in between."""

    c_in: int
    c_out: int
    latent: int
    groups: int

    def validate(self) -> None:
        if self.latent < 1:
            raise ConfigError(f"latent must be >= 1, got {self.latent}")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.latent % self.groups != 0:
            raise ConfigError(f"latent={self.latent} must divide by groups={self.groups}")


@dataclass
class ModelConfig:
    n: int
    groups: int
    k: int
    stage_count: int = 3
    class_count: int = 10
    in_channels: int = 3
    input_hw: int = 32
    master_seed: int = 0
    ca_rule: int = 30

    def validate(self) -> None:
        if self.n < 4 or self.n % 2 != 0:
            raise ConfigError(f"field n: width must be an even integer >= 4, got {self.n}")
        if self.groups < 1:
            raise ConfigError(f"field groups: must be >= 1, got {self.groups}")
        if (self.n // 2) % self.groups != 0:
            raise ConfigError(
                f"field groups: latent width n/2={self.n // 2} must divide by groups={self.groups}"
            )
        if not 1 <= self.k <= 8:
            raise ConfigError(f"field k: bit width must be in [1, 8], got {self.k}")
        if self.stage_count < 1:
            raise ConfigError(f"field stage_count: must be >= 1, got {self.stage_count}")
        if self.class_count < 2:
            raise ConfigError(f"field class_count: must be >= 2, got {self.class_count}")
        if self.in_channels < 1:
            raise ConfigError(f"field in_channels: must be >= 1, got {self.in_channels}")
        down = 1 << self.stage_count
        if self.input_hw < down or self.input_hw % down != 0:
            raise ConfigError(
                f"field input_hw: {self.input_hw} must be a positive multiple of 2^stage_count={down}"
            )
        if not 0 <= self.ca_rule <= 255:
            raise ConfigError(f"field ca_rule: must be in [0, 255], got {self.ca_rule}")
        if self.master_seed < 0:
            raise ConfigError(f"field master_seed: must be >= 0, got {self.master_seed}")

    def cflog(self) -> CflogConfig:
        return CflogConfig(c_in=self.n, c_out=self.n, latent=self.n // 2, groups=self.groups)


# ---------------------------------------------------------------------------
# functional pieces shared by the float model and the integer engine


def tgap(x: np.ndarray, tgap_max: float) -> np.ndarray:
    """Channel selector: 1 where GAP(x) strictly exceeds half of
    ``tgap_max``, else 0.  Shape (N, C).  A non-positive ceiling selects
    nothing (guards the all-negative full-precision corner)."""
    g = tc.global_avg_pool(x)
    if tgap_max <= 0.0:
        return np.zeros_like(g)
    return (g > 0.5 * tgap_max).astype(np.float64)


def mux(i0: np.ndarray, i1: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Per-channel 2-way multiplexer: channel c of the output is taken
    from i1 where s[:, c] == 1 and from i0 otherwise."""
    if i0.shape != i1.shape:
        raise ShapeError(f"mux inputs disagree: {i0.shape} vs {i1.shape}")
    if s.shape != i0.shape[:2]:
        raise ShapeError(f"mux selector shape {s.shape} does not match channels {i0.shape[:2]}")
    sel = s.astype(bool)[:, :, None, None]
    return np.where(sel, i1, i0)


def cflog_forward(
    x: np.ndarray,
    pw_codes: np.ndarray,
    g_codes: np.ndarray,
    ca_codes: np.ndarray,
    groups: int,
) -> np.ndarray:
    """Three chained convs with no activation in between.  Works on
    float inputs (training / real engine) and int64 inputs (integer
    engine) alike."""
    a = tc.conv2d(x, pw_codes, groups=1, padding="same")
    a = tc.conv2d(a, g_codes, groups=groups, padding="same")
    return tc.conv2d(a, ca_codes, groups=1, padding="same")


# ---------------------------------------------------------------------------
# layers


class QuantConv:
    """Conv layer whose effective weights are quantized codes of a real
    proxy tensor.  ``kind`` selects the codebook: 'ternary' {-1, 0, +1}
    with a tertile-derived step size, or 'binary' {-1, +1}."""

    def __init__(
        self,
        name: str,
        kind: str,
        c_in: int,
        c_out: int,
        ksize: int,
        groups: int = 1,
        rng: np.random.Generator | None = None,
    ):
        if kind not in ("ternary", "binary"):
            raise ConfigError(f"QuantConv kind must be 'ternary' or 'binary', got {kind!r}")
        self.name = name
        self.kind = kind
        self.groups = groups
        rng = rng or np.random.Generator(np.random.PCG64(0))
        self.proxy = rng.uniform(-0.5, 0.5, size=(c_out, c_in // groups, ksize, ksize))
        self.spec = TernarySpec()
        if kind == "ternary":
            self.spec.refresh(self.proxy)
        self.grad: np.ndarray | None = None
        self._x: np.ndarray | None = None
        self._wq: np.ndarray | None = None

    def quantized(self) -> np.ndarray:
        if self.kind == "ternary":
            return ternary_quantize(self.proxy, self.spec.s)
        return binarize(self.proxy)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        wq = self.quantized()
        if _DEBUG_CHECKS:
            allowed = (-1.0, 0.0, 1.0) if self.kind == "ternary" else (-1.0, 1.0)
            if not np.isin(wq, allowed).all():
                raise AssertionError(f"{self.name}: quantized weights left the {self.kind} alphabet")
        self._x = x if training else None
        self._wq = wq
        return tc.conv2d(x, wq, groups=self.groups, padding="same")

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise ShapeError(f"{self.name}: backward called without a cached training forward")
        gw = tc.conv2d_grad_weight(
            self._x, gout, self.groups, "same", 1, self.proxy.shape[2], self.proxy.shape[3]
        )
        # Straight-through: the code is treated as identity inside the
        # clip range, so gradients vanish wherever |proxy| > 1.
        self.grad = gw * ste_mask(self.proxy)
        return tc.conv2d_grad_input(
            gout, self._wq, self.groups, "same", 1, self._x.shape[2], self._x.shape[3]
        )


class CAConv:
    """Fixed pointwise conv whose +-1 weights come from a cellular
    automaton run.  Nothing here is trainable."""

    def __init__(self, name: str, ca_config: CAConfig):
        self.name = name
        self.config = ca_config
        self.weight = generate_kernel(ca_config)[:, :, None, None]  # int8, (c_out, c_in, 1, 1)
        self._hw: tuple[int, int] | None = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._hw = (x.shape[2], x.shape[3])
        return tc.conv2d(x, self.weight, groups=1, padding="same")

    def backward(self, gout: np.ndarray) -> np.ndarray:
        return tc.conv2d_grad_input(gout, self.weight, 1, "same", 1, *self._hw)


class BatchNormLayer:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.params = tc.BNParams.identity(channels)
        self.dgamma: np.ndarray | None = None
        self.dbeta: np.ndarray | None = None
        self._cache: dict | None = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if training:
            y, self._cache = tc.batch_norm_train(x, self.params)
            return y
        self._cache = None
        return tc.batch_norm_inference(x, self.params)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called without a cached training forward")
        gx, self.dgamma, self.dbeta = tc.batch_norm_backward(gy, self._cache)
        return gx


class Cflog:
    """The factorised conv block (see :class:`CflogConfig`)."""

    def __init__(self, name: str, cfg: CflogConfig, ca_config: CAConfig, rng: np.random.Generator):
        cfg.validate()
        if ca_config.width != cfg.c_out or ca_config.steps != cfg.latent:
            raise ConfigError(
                f"{name}: CA kernel is {ca_config.width}x{ca_config.steps}, "
                f"block needs {cfg.c_out}x{cfg.latent}"
            )
        self.name = name
        self.cfg = cfg
        self.pw_in = QuantConv(f"{name}.pw_in", "binary", cfg.c_in, cfg.latent, 1, rng=rng)
        self.gconv = QuantConv(f"{name}.gconv", "ternary", cfg.latent, cfg.latent, 3, groups=cfg.groups, rng=rng)
        self.pw_ca = CAConv(f"{name}.pw_ca", ca_config)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        a = self.pw_in.forward(x, training)
        a = self.gconv.forward(a, training)
        return self.pw_ca.forward(a, training)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        g = self.pw_ca.backward(gout)
        g = self.gconv.backward(g)
        return self.pw_in.backward(g)


class Mrb:
    """MUX residual block.

    I1 is the two-conv bottleneck path, I0 the halved additive path
    built from x + I1; a per-channel GAP gate picks between them.  The
    gate is a control signal: no gradient flows through the selector.
    """

    def __init__(
        self,
        name: str,
        n: int,
        groups: int,
        k: int,
        ca1: CAConfig,
        ca2: CAConfig,
        rng: np.random.Generator,
    ):
        cfg = CflogConfig(c_in=n, c_out=n, latent=n // 2, groups=groups)
        self.name = name
        self.k = k
        self.cflog1 = Cflog(f"{name}.cflog1", cfg, ca1, rng)
        self.bn1 = BatchNormLayer(f"{name}.bn1", n)
        self.cflog2 = Cflog(f"{name}.cflog2", cfg, ca2, rng)
        self.bn2 = BatchNormLayer(f"{name}.bn2", n)
        self._cache: dict | None = None

    def forward(self, x: np.ndarray, training: bool = False, quantized_acts: bool = True) -> np.ndarray:
        b1 = self.bn1.forward(self.cflog1.forward(x, training), training)
        h1 = qrelu_forward(b1, self.k) if quantized_acts else np.maximum(b1, 0.0)
        b2 = self.bn2.forward(self.cflog2.forward(h1, training), training)
        i1 = qrelu_forward(b2, self.k) if quantized_acts else np.maximum(b2, 0.0)
        y = x + i1
        if quantized_acts:
            i0 = bitshift_forward(y, self.k)
            ceiling = 1.0
        else:
            # Full-precision phase: the halving op is bypassed and the
            # gate ceiling tracks the live activation range per batch.
            i0 = y
            ceiling = float(tc.global_avg_pool(x).max()) if x.size else 0.0
        s = tgap(x, ceiling)
        out = mux(i0, i1, s)
        if training:
            self._cache = {"b1": b1, "b2": b2, "y": y, "s": s, "quantized_acts": quantized_acts}
        else:
            self._cache = None
        return out

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called without a cached training forward")
        c = self._cache
        sel = c["s"][:, :, None, None]
        qa = c["quantized_acts"]
        g_i0 = gout * (1.0 - sel)
        # The halving op passes gradients straight through (see
        # quantizers.bitshift_backward), so g_y is g_i0 in both phases.
        g_y = g_i0
        g_i1 = gout * sel + g_y
        mask2 = ste_mask(c["b2"]) if qa else c["b2"] > 0
        g_h1 = self.cflog2.backward(self.bn2.backward(g_i1 * mask2))
        mask1 = ste_mask(c["b1"]) if qa else c["b1"] > 0
        g_x_conv = self.cflog1.backward(self.bn1.backward(g_h1 * mask1))
        return g_y + g_x_conv


def mrb_forward(
    x: np.ndarray, block: Mrb, training: bool = False, quantized_acts: bool = True
) -> np.ndarray:
    return block.forward(x, training=training, quantized_acts=quantized_acts)


# ---------------------------------------------------------------------------
# full model


class Model:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.Generator(np.random.PCG64(config.master_seed))
        ca_seeds = [
            int(child.generate_state(1)[0])
            for child in np.random.SeedSequence(config.master_seed).spawn(2 * config.stage_count)
        ]
        n = config.n
        self.stem = QuantConv("stem", "ternary", config.in_channels, n, 3, rng=rng)
        self.stem_bn = BatchNormLayer("stem_bn", n)
        self.mrbs: list[Mrb] = []
        for i in range(config.stage_count):
            ca1 = CAConfig(
                width=n, steps=n // 2, rule=config.ca_rule,
                seed_row=default_seed(n, ca_seeds[2 * i]),
            )
            ca2 = CAConfig(
                width=n, steps=n // 2, rule=config.ca_rule,
                seed_row=default_seed(n, ca_seeds[2 * i + 1]),
            )
            self.mrbs.append(Mrb(f"mrb{i}", n, config.groups, config.k, ca1, ca2, rng))
        self.head = QuantConv("head", "binary", n, config.class_count, 1, rng=rng)
        self.head_bn = BatchNormLayer("head_bn", config.class_count)
        self._cache: dict | None = None

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"model expects (N, {self.config.in_channels}, H, W) input, got {x.shape}"
            )
        if x.shape[2] != self.config.input_hw or x.shape[3] != self.config.input_hw:
            raise ShapeError(
                f"model configured for {self.config.input_hw}x{self.config.input_hw} inputs, got {x.shape[2]}x{x.shape[3]}"
            )

    def forward(self, x: np.ndarray, training: bool = False, quantized_acts: bool = True) -> np.ndarray:
        self._check_input(x)
        k = self.config.k
        b0 = self.stem_bn.forward(self.stem.forward(x, training), training)
        h = qrelu_forward(b0, k) if quantized_acts else np.maximum(b0, 0.0)
        pool_caches = []
        for block in self.mrbs:
            h = block.forward(h, training=training, quantized_acts=quantized_acts)
            hin = h.shape[2:]
            h, idx = tc.maxpool2x2(h)
            pool_caches.append((idx, hin))
        acc = self.head.forward(h, training)
        bh = self.head_bn.forward(acc, training)
        logits = tc.global_avg_pool(bh)
        if training:
            self._cache = {
                "b0": b0,
                "pools": pool_caches,
                "head_hw": bh.shape[2:],
                "quantized_acts": quantized_acts,
            }
        else:
            self._cache = None
        return logits

    def backward(self, glogits: np.ndarray) -> None:
        if self._cache is None:
            raise ShapeError("model backward called without a cached training forward")
        c = self._cache
        hh, hw = c["head_hw"]
        g = np.repeat(
            np.repeat(glogits[:, :, None, None] / (hh * hw), hh, axis=2), hw, axis=3
        )
        g = self.head.backward(self.head_bn.backward(g))
        for block, (idx, hin) in zip(reversed(self.mrbs), reversed(c["pools"])):
            g = tc.maxpool2x2_backward(g, idx, *hin)
            g = block.backward(g)
        mask0 = ste_mask(c["b0"]) if c["quantized_acts"] else c["b0"] > 0
        self.stem.backward(self.stem_bn.backward(g * mask0))

    # -- traversal ----------------------------------------------------------

    def quant_layers(self) -> list[QuantConv]:
        out = [self.stem]
        for block in self.mrbs:
            out += [block.cflog1.pw_in, block.cflog1.gconv, block.cflog2.pw_in, block.cflog2.gconv]
        out.append(self.head)
        return out

    def ternary_layers(self) -> list[QuantConv]:
        return [q for q in self.quant_layers() if q.kind == "ternary"]

    def bn_layers(self) -> list[BatchNormLayer]:
        out = [self.stem_bn]
        for block in self.mrbs:
            out += [block.bn1, block.bn2]
        out.append(self.head_bn)
        return out

    def ca_layers(self) -> list[CAConv]:
        out = []
        for block in self.mrbs:
            out += [block.cflog1.pw_ca, block.cflog2.pw_ca]
        return out


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def count_trainable(model: Model) -> int:
    """Number of trainable scalars: proxy weights plus BN affine pairs."""
    total = sum(q.proxy.size for q in model.quant_layers())
    total += sum(bn.params.gamma.size + bn.params.beta.size for bn in model.bn_layers())
    return total


# ---------------------------------------------------------------------------
# model-size accounting


def compression_rate(c_in: int, c_out: int, groups: int) -> Fraction:
    """Trainable-parameter ratio of the factorised block vs a dense 3x3
    conv, as an exact rational: (c_in/c_out) * (1/18 + 1/(4*groups)).
    """
    if c_in < 2 or c_in % 2 != 0:
        raise ConfigError(f"c_in must be even and >= 2, got {c_in}")
    if c_out < 1 or groups < 1:
        raise ConfigError(f"c_out and groups must be >= 1, got {c_out}, {groups}")
    m = Fraction(c_in, 2)
    counted = Fraction(c_in) * m + Fraction(9) * m * m / groups
    ratio = counted / Fraction(9 * c_in * c_out)
    closed = Fraction(c_in, c_out) * (Fraction(1, 18) + Fraction(1, 4 * groups))
    assert ratio == closed  # algebraically identical; guards future edits
    return closed


@dataclass
class SizeRow:
    name: str
    kind: str
    params: int
    bits: int


@dataclass
class SizeReport:
    rows: list[SizeRow]

    @property
    def total_bits(self) -> int:
        return sum(r.bits for r in self.rows)

    @property
    def megabits(self) -> float:
        return self.total_bits / 1e6

    def format(self) -> str:
        lines = [
            f"layer={r.name} kind={r.kind} params={r.params} bits={r.bits}"
            for r in self.rows
        ]
        lines.append(f"total_bits={self.total_bits}")
        lines.append(f"total_megabits={self.megabits:.6f}")
        return "\n".join(lines)


def size_report(config: ModelConfig) -> SizeReport:
    """Serialized-size budget per layer.

    Packing assumptions (matching the checkpoint writer): ternary codes
    2 bits, binary codes 1 bit, BN as four float32 vectors, CA layers as
    their seed row only (1 bit per cell; the rule lives in the header).
    """
    config.validate()
    n, g = config.n, config.groups
    m = n // 2
    rows: list[SizeRow] = []

    def bn_row(name: str, channels: int) -> SizeRow:
        return SizeRow(name, "batchnorm", 4 * channels, 4 * channels * 32)

    stem_params = n * config.in_channels * 9
    rows.append(SizeRow("stem", "ternary", stem_params, 2 * stem_params))
    rows.append(bn_row("stem_bn", n))
    for i in range(config.stage_count):
        for half in (1, 2):
            pw = m * n
            gc = m * (m // g) * 9
            rows.append(SizeRow(f"mrb{i}.cflog{half}.pw_in", "binary", pw, pw))
            rows.append(SizeRow(f"mrb{i}.cflog{half}.gconv", "ternary", gc, 2 * gc))
            rows.append(SizeRow(f"mrb{i}.cflog{half}.pw_ca", "ca-seed", 0, n))
            rows.append(bn_row(f"mrb{i}.bn{half}", n))
    head_params = n * config.class_count
    rows.append(SizeRow("head", "binary", head_params, head_params))
    rows.append(bn_row("head_bn", config.class_count))
    return SizeReport(rows)
