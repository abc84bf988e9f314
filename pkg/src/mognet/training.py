"""Quantization-aware training: Adam on proxy weights, per-epoch step-size
refresh from weight tertiles, and the optional full-precision warm-up stage.

The training loop follows a strict per-epoch order:

1. prologue: recompute every ternary layer's step size from the current
   proxy tertiles (degenerate layers keep their previous step and warn);
2. minibatch loop: forward with freshly quantized weights, manual
   backward, Adam step on proxies and BN affines, then clip proxies to
   [-1, 1];
3. epilogue: decay the learning rate once the schedule says so.

Everything is driven by one ``numpy.random.Generator``, so a (seed,
config, data) triple pins the whole run bit for bit.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .blocks import Model, QuantConv, set_debug_checks
from .errors import ConfigError, DataError, MognetError


@dataclass
class TrainConfig:
    epochs_stage1: int = 0
    epochs_stage2: int = 30
    batch_size: int = 50
    lr: float = 1e-3
    lr_decay_rate: float = 0.9
    decay_start_stage1: int = 120
    decay_start_stage2: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    pad4_random_crop: bool = True
    horizontal_flip: bool = True
    target_accuracy: float = 0.0
    eval_each_epoch: bool = False
    eval_min_batch_accuracy: float = 0.0
    debug_checks: bool = False
    synth_samples: int = 200
    synth_seed: int = 1234

    def validate(self) -> None:
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("field epochs_stage1/epochs_stage2: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"field batch_size: must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"field lr: must be >= 0, got {self.lr}")
        if not 0 < self.lr_decay_rate <= 1:
            raise ConfigError(f"field lr_decay_rate: must be in (0, 1], got {self.lr_decay_rate}")
        if self.decay_start_stage1 < 1 or self.decay_start_stage2 < 1:
            raise ConfigError("field decay_start_stage1/decay_start_stage2: must be >= 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("field beta1/beta2: must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError(f"field adam_eps: must be > 0, got {self.adam_eps}")
        if self.rng_seed < 0:
            raise ConfigError(f"field rng_seed: must be >= 0, got {self.rng_seed}")
        if not 0 <= self.target_accuracy <= 1:
            raise ConfigError(f"field target_accuracy: must be in [0, 1], got {self.target_accuracy}")
        if not 0 <= self.eval_min_batch_accuracy <= 1:
            raise ConfigError(
                f"field eval_min_batch_accuracy: must be in [0, 1], got {self.eval_min_batch_accuracy}"
            )
        if self.synth_samples < 2:
            raise ConfigError(f"field synth_samples: must be >= 2, got {self.synth_samples}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))


def adaptive_moment_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One Adam update, in place on ``param``.  Bias-corrected first and
    second moments; a fresh state starts at t=0."""
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** state.t)
    vhat = state.v / (1.0 - beta2 ** state.t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    b = logits.shape[0]
    if labels.shape != (b,):
        raise DataError(f"labels shape {labels.shape} does not match batch {b}")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(sez[:, 0]) - z[np.arange(b), labels]))
    grad = ez / sez
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


# ---------------------------------------------------------------------------
# proxy bookkeeping


class ProxyStore:
    """Registry over the model's quantized conv layers: proxy tensors,
    ternary step sizes, and the clip that keeps proxies inside the
    straight-through window."""

    def __init__(self, model: Model):
        self.layers: list[QuantConv] = model.quant_layers()

    def refresh_step_sizes(self) -> list[str]:
        """Epoch prologue: recompute each ternary step size from the live
        proxy tertiles.  Returns the names of layers whose distribution
        was degenerate (those keep their previous step size)."""
        kept = []
        for layer in self.layers:
            if layer.kind != "ternary":
                continue
            if not layer.spec.refresh(layer.proxy):
                kept.append(layer.name)
                warnings.warn(
                    f"{layer.name}: weight tertiles collapsed to zero, keeping step size {layer.spec.s}",
                    RuntimeWarning,
                )
        return kept

    def clip(self) -> None:
        for layer in self.layers:
            np.clip(layer.proxy, -1.0, 1.0, out=layer.proxy)

    def step_sizes(self) -> dict[str, float]:
        return {l.name: l.spec.s for l in self.layers if l.kind == "ternary"}


def named_parameters(model: Model):
    """Stable-ordered (name, param, grad_fn) triples for the optimizer."""
    for q in model.quant_layers():
        yield f"{q.name}.proxy", q.proxy, (lambda q=q: q.grad)
    for bn in model.bn_layers():
        yield f"{bn.name}.gamma", bn.params.gamma, (lambda bn=bn: bn.dgamma)
        yield f"{bn.name}.beta", bn.params.beta, (lambda bn=bn: bn.dbeta)


# ---------------------------------------------------------------------------
# augmentation


def pad_crop(images: np.ndarray, offsets: np.ndarray, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` on each side then crop back to the original size
    at the per-image (dy, dx) offsets; offset (pad, pad) is the identity."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def hflip(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = images.copy()
    out[mask] = out[mask][:, :, :, ::-1]
    return out


def augment(batch: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Pad-4 random crop then coin-flip horizontal mirror.  Draw order is
    fixed (offsets first, flips second) so runs reproduce exactly."""
    x = batch
    if cfg.pad4_random_crop:
        offsets = rng.integers(0, 2 * 4 + 1, size=(batch.shape[0], 2))
        x = pad_crop(x, offsets)
    if cfg.horizontal_flip:
        x = hflip(x, rng.random(batch.shape[0]) < 0.5)
    return x


# ---------------------------------------------------------------------------
# training loops


@dataclass
class EpochMetrics:
    stage: str
    epoch: int
    loss: float
    accuracy: float  # on the (possibly augmented) training batches
    lr: float
    step_sizes: dict[str, float] = field(default_factory=dict)
    eval_accuracy: float | None = None  # clean pass over the training set


def _check_data(model: Model, data: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    images, labels = data
    n = images.shape[0]
    if n == 0:
        raise DataError("empty training set")
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match {n} images")
    if labels.min() < 0 or labels.max() >= model.config.class_count:
        raise DataError(
            f"labels must be in [0, {model.config.class_count}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def train_btq(
    model: Model,
    data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    *,
    quantized_acts: bool = True,
    epochs: int | None = None,
    decay_start: int | None = None,
    stage_tag: str = "stage2",
    rng: np.random.Generator | None = None,
) -> list[EpochMetrics]:
    """Quantization-aware training of ``model`` in place.

    One stage of the schedule: ``quantized_acts`` picks between the
    hard k-bit activations (main stage) and the ReLU/identity warm-up.
    Weights are quantized in the forward pass of both stages.  Stops
    early once ``cfg.target_accuracy`` (if non-zero) is reached.
    """
    cfg.validate()
    images, labels = _check_data(model, data)
    n = images.shape[0]
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    decay_start = cfg.decay_start_stage2 if decay_start is None else decay_start
    rng = rng or np.random.Generator(np.random.PCG64(cfg.rng_seed))
    set_debug_checks(cfg.debug_checks)
    store = ProxyStore(model)
    params = list(named_parameters(model))
    states = {name: AdamState.zeros(p.shape) for name, p, _ in params}
    lr = cfg.lr
    metrics: list[EpochMetrics] = []
    for epoch in range(1, epochs + 1):
        store.refresh_step_sizes()
        order = rng.permutation(n)
        losses: list[float] = []
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = augment(images[idx], cfg, rng)
            yb = labels[idx]
            logits = model.forward(xb, training=True, quantized_acts=quantized_acts)
            loss, glogits = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise MognetError(
                    f"training diverged: non-finite loss in epoch {epoch} ({stage_tag})"
                )
            model.backward(glogits)
            for name, p, grad_fn in params:
                adaptive_moment_step(
                    p, grad_fn(), states[name], lr, cfg.beta1, cfg.beta2, cfg.adam_eps
                )
            store.clip()
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == yb).sum())
        acc = correct / n
        eval_acc = None
        if cfg.eval_each_epoch and acc >= cfg.eval_min_batch_accuracy:
            # population BN stats first, else the clean pass misreads a
            # network whose moving averages lag the weights
            recalibrate_bn(model, images, quantized_acts=quantized_acts)
            eval_acc = evaluate_float(model, (images, labels), quantized_acts=quantized_acts)
        metrics.append(
            EpochMetrics(
                stage_tag, epoch, float(np.mean(losses)), acc, lr, store.step_sizes(), eval_acc
            )
        )
        if epoch >= decay_start:
            lr *= cfg.lr_decay_rate
        stop_acc = eval_acc if eval_acc is not None else acc
        if cfg.target_accuracy > 0.0 and stop_acc >= cfg.target_accuracy:
            break
    # leave the model with statistics that describe the data it was
    # trained on, whatever the eval cadence was
    recalibrate_bn(model, images, quantized_acts=quantized_acts)
    return metrics


def two_stage_train(
    model: Model, data: tuple[np.ndarray, np.ndarray], cfg: TrainConfig
) -> list[EpochMetrics]:
    """Optional full-precision-activation warm-up followed by the hard
    quantized stage.  Weights carry over between stages untouched; the
    optimizer and learning-rate schedule restart per stage."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
    metrics: list[EpochMetrics] = []
    if cfg.epochs_stage1 > 0:
        metrics += train_btq(
            model,
            data,
            cfg,
            quantized_acts=False,
            epochs=cfg.epochs_stage1,
            decay_start=cfg.decay_start_stage1,
            stage_tag="stage1",
            rng=rng,
        )
    if cfg.epochs_stage2 > 0:
        metrics += train_btq(
            model,
            data,
            cfg,
            quantized_acts=True,
            epochs=cfg.epochs_stage2,
            decay_start=cfg.decay_start_stage2,
            stage_tag="stage2",
            rng=rng,
        )
    return metrics


def evaluate_float(
    model: Model, data: tuple[np.ndarray, np.ndarray], batch_size: int = 200,
    quantized_acts: bool = True,
) -> float:
    """Inference-mode accuracy of the float model (moving BN statistics)."""
    images, labels = _check_data(model, data)
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start : start + batch_size]
        logits = model.forward(xb, training=False, quantized_acts=quantized_acts)
        correct += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / images.shape[0]


def recalibrate_bn(
    model: Model, images: np.ndarray, batch_size: int = 100, quantized_acts: bool = True
) -> None:
    """Replace every BN layer's moving statistics with exact population
    statistics of ``images`` under the current weights.

    The momentum-tracked statistics assume many updates per epoch; on
    small datasets they trail the live weights, and since the quantized
    activations are thresholded, even a small normalisation offset can
    shift outputs by whole levels between the training-mode and
    inference-mode views of the same network.  One streaming pass fixes
    the gap: per layer we aggregate the batch means and variances
    (weighted by element count) into the population mean/variance.
    """
    bns = model.bn_layers()
    tally = {bn.name: [0, None, None] for bn in bns}  # n, sum(x), sum(x^2)
    for start in range(0, images.shape[0], batch_size):
        xb = images[start : start + batch_size]
        model.forward(xb, training=True, quantized_acts=quantized_acts)
        for bn in bns:
            c = bn._cache
            n, mean, var = c["n"], c["mean"], c["var"]
            slot = tally[bn.name]
            s1 = mean * n
            s2 = (var + mean * mean) * n
            if slot[1] is None:
                slot[0], slot[1], slot[2] = n, s1, s2
            else:
                slot[0] += n
                slot[1] += s1
                slot[2] += s2
    for bn in bns:
        n, s1, s2 = tally[bn.name]
        mean = s1 / n
        bn.params.moving_mean = mean
        bn.params.moving_var = np.maximum(s2 / n - mean * mean, 0.0)
