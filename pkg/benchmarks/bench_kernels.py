"""Compare the numba and numpy conv backends on the shapes the models
actually run: forward/grad kernels in isolation, then one full training
step and one integer-engine batch.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats 5] [--batch 50]

Each row reports the best-of-N wall time per backend and the speedup.
The numba backend JIT-compiles on first touch; a warmup call keeps that
out of the numbers.
"""
import argparse
import time

import numpy as np

from mognet import kernels
from mognet.blocks import ModelConfig, build_model
from mognet.data import synthetic_multiclass
from mognet.int_inference import QuantTensor, freeze, int_forward, prepare_banks
from mognet.quantizers import levels_of
from mognet.training import TrainConfig, train_btq


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_cases(batch):
    rng = np.random.default_rng(0)
    cases = []
    for name, (c_in, c_out, hw, ksize, groups) in {
        "stem 3x3 3->32":      (3, 32, 32, 3, 1),
        "pointwise 32->16":    (32, 16, 32, 1, 1),
        "grouped 3x3 16->16":  (16, 16, 32, 3, 4),
        "ca pointwise 16->32": (16, 32, 32, 1, 1),
    }.items():
        x = rng.standard_normal((batch, c_in, hw, hw))
        w = rng.standard_normal((c_out, c_in // groups, ksize, ksize))
        cases.append((name, x, w, groups, ksize // 2))
    return cases


def bench_convs(backends, batch, repeats):
    print(f"\nconv kernels (batch={batch}, best of {repeats})")
    header = f"{'case':<28}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}"
    print(header)
    for name, x, w, groups, pad in conv_cases(batch):
        gout = np.ones((batch, w.shape[0], x.shape[2], x.shape[3]))
        for op, call in (
            ("fwd", lambda: kernels.conv2d_forward(x, w, groups, 1, pad)),
            ("gin", lambda: kernels.conv2d_grad_input(gout, w, groups, 1, pad,
                                                      x.shape[2], x.shape[3])),
            ("gw", lambda: kernels.conv2d_grad_weight(x, gout, groups, 1, pad,
                                                      w.shape[2], w.shape[3])),
        ):
            times = {}
            for backend in backends:
                kernels.set_backend(backend)
                call()  # warmup / JIT
                times[backend] = best_of(call, repeats)
            ratio = times["numpy"] / times["numba"] if "numba" in times else float("nan")
            row = f"{name + ' ' + op:<28}"
            row += "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
            print(row + f"{ratio:>9.1f}x")


def bench_train_step(backends, batch, repeats):
    print(f"\none training epoch, n=32 model, {batch * 4} images (best of {repeats})")
    cfg = ModelConfig(n=32, groups=4, k=3, stage_count=3, class_count=10,
                      in_channels=3, input_hw=32, master_seed=1)
    x, y = synthetic_multiclass(batch * 4, classes=10, hw=32, seed=7)
    tcfg = TrainConfig(epochs_stage2=1, batch_size=batch,
                       pad4_random_crop=False, horizontal_flip=False)
    for backend in backends:
        kernels.set_backend(backend)
        train_btq(build_model(cfg), (x, y), tcfg)  # warmup
        dt = best_of(lambda: train_btq(build_model(cfg), (x, y), tcfg), repeats)
        print(f"{backend:>8}: {dt:.2f}s  ({dt / 4 * 1e3:.0f} ms/step)")


def bench_int_engine(backends, batch, repeats):
    print(f"\ninteger engine, n=32 model, batch={batch} (best of {repeats})")
    cfg = ModelConfig(n=32, groups=4, k=3, stage_count=3, class_count=10,
                      in_channels=3, input_hw=32, master_seed=1)
    frozen = freeze(build_model(cfg))
    banks = prepare_banks(frozen)
    rng = np.random.default_rng(3)
    qt = QuantTensor.from_levels(
        rng.integers(0, levels_of(cfg.k) + 1, size=(batch, 3, 32, 32)), cfg.k)
    for backend in backends:
        kernels.set_backend(backend)
        int_forward(qt, frozen, banks)  # warmup
        dt = best_of(lambda: int_forward(qt, frozen, banks), repeats)
        print(f"{backend:>8}: {dt * 1e3:.1f} ms  ({dt / batch * 1e6:.0f} us/image)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=50)
    args = ap.parse_args()

    backends = ["numpy"]
    try:
        kernels.set_backend("numba")
        backends.append("numba")
    except Exception as e:  # noqa: BLE001 - report and fall back
        print(f"numba backend unavailable ({e}); timing numpy only")
    print(f"backends: {', '.join(backends)}")

    bench_convs(backends, args.batch, args.repeats)
    bench_train_step(backends, args.batch, max(2, args.repeats // 2))
    bench_int_engine(backends, args.batch, args.repeats)


if __name__ == "__main__":
    main()
