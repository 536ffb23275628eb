"""Compare the numba and pure-numpy kernel backends.

Times the raw matmul kernels at the shapes a 256-96-96-3 network uses with
batch 20, then a short fine-tune per mode under each backend.  Outputs are
checked for bitwise agreement before any timing is reported.

    python benchmarks/bench_kernels.py [--epochs 20] [--repeat 200]
"""
import argparse
import time

import numpy as np

from skip2lora import ModelSpec, TrainConfig, build, finetune, linalg, pretrain
from skip2lora.data import DriftSpec, gen_drifted, normalize
from skip2lora.network import finetune_model

SHAPES = [
    ("x@W1  20x256 . 256x96", "matmul", (20, 256), (256, 96)),
    ("x@W2  20x96 . 96x96", "matmul", (20, 96), (96, 96)),
    ("gW1   256x20 . 20x96", "matmul_at", (20, 256), (20, 96)),
    ("gx2   20x96 . 96x96^T", "matmul_bt", (20, 96), (96, 96)),
    ("x@WA  20x256 . 256x4", "matmul", (20, 256), (256, 4)),
]


def _time(fn, repeat):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e6


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, op, sa, sb in SHAPES:
        a = rng.normal(size=sa).astype(np.float32)
        b = rng.normal(size=sb).astype(np.float32)
        fn = getattr(linalg, op)
        res, us = {}, {}
        for name in ("numpy", "numba"):
            with linalg.use_backend(name):
                res[name] = fn(a, b)
                us[name] = _time(lambda: fn(a, b), repeat)
        assert np.array_equal(res["numpy"].view(np.uint32), res["numba"].view(np.uint32)), label
        print(f"{label:26s} {us['numpy']:10.1f} {us['numba']:10.1f} {us['numpy'] / us['numba']:7.1f}x")


def bench_finetune(epochs):
    pre, ft, _ = gen_drifted(DriftSpec(seed=0))
    pre, (ft,), _ = normalize(pre, [ft])
    with linalg.use_backend("numba"):
        base = build(ModelSpec((256, 96, 96, 3), mode="ft-all", seed=0))
        pretrain(base, pre, TrainConfig(epochs=5, mode="ft-all"))
    print(f"\nfine-tune, {epochs} epochs, batch 20")
    print(f"{'mode':12s} {'numpy s':>9s} {'numba s':>9s} {'speedup':>8s}")
    for mode in ("lora-all", "skip-lora", "skip2-lora"):
        secs, sums = {}, {}
        for name in ("numpy", "numba"):
            with linalg.use_backend(name):
                m = finetune_model(base, mode, rank=4, seed=0)
                t0 = time.perf_counter()
                finetune(m, ft, TrainConfig(epochs=epochs, mode=mode))
                secs[name] = time.perf_counter() - t0
                sums[name] = m.checksums()
        assert sums["numpy"] == sums["numba"], mode
        print(f"{mode:12s} {secs['numpy']:9.2f} {secs['numba']:9.2f} {secs['numpy'] / secs['numba']:7.1f}x")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--epochs", type=int, default=20)
    args = p.parse_args()
    if "numba" not in linalg._kernels.BACKENDS:
        raise SystemExit("numba is not installed; nothing to compare")
    bench_kernels(args.repeat)
    bench_finetune(args.epochs)


if __name__ == "__main__":
    main()
