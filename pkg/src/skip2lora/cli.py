"""Command-line entry point: ``skip2lora <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or validation error, 2 I/O error,
3 numeric contract violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import time

import numpy as np

from . import checkpoint, linalg
from .checkpoint import CheckpointError
from .data import DataError, Dataset, DriftSpec, NormStats, fit_norm, gen_drifted, load_csv, write_csv
from .errors import ContractViolation
from .network import FineTuneMode, ModelSpec, build, finetune_model
from .trainer import TrainConfig, evaluate, finetune, pretrain

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_MODES = [m.value for m in FineTuneMode]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _meta_path(ckpt) -> str:
    return str(ckpt) + ".meta.json"


def _write_meta(ckpt, label_map, norm: NormStats | None):
    meta = {"label_map": list(label_map),
            "norm": None if norm is None else {"mean": norm.mean.tolist(), "std": norm.std.tolist()}}
    with open(_meta_path(ckpt), "w") as fh:
        json.dump(meta, fh)


def _read_meta(ckpt):
    p = _meta_path(ckpt)
    if not os.path.exists(p):
        return None, None
    with open(p) as fh:
        meta = json.load(fh)
    norm = meta.get("norm")
    if norm is not None:
        norm = NormStats(np.asarray(norm["mean"], dtype=np.float64), np.asarray(norm["std"], dtype=np.float64))
    label_map = meta.get("label_map")
    return (tuple(label_map) if label_map else None), norm


def _load_data(path, label_column, label_map=None, norm=None) -> Dataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    ds = load_csv(path, label_column, label_map=label_map)
    if norm is not None:
        if norm.mean.shape[0] != ds.num_features:
            raise UsageError(f"{path}: {ds.num_features} features, normalisation expects {norm.mean.shape[0]}")
        ds = norm.apply(ds)
    return ds


def _load_ckpt(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint.load(path)


def _check_dims(model, ds: Dataset):
    if ds.num_features != model.dims[0]:
        raise UsageError(f"dataset has {ds.num_features} features but the model expects {model.dims[0]}")
    if ds.num_classes > model.dims[-1]:
        raise UsageError(f"dataset has {ds.num_classes} classes but the model has {model.dims[-1]} outputs")


def _parse_dims(s):
    try:
        dims = [int(v) for v in s.split(",")]
    except ValueError:
        raise UsageError(f"--dims must be comma-separated integers, got {s!r}") from None
    return dims


def _modes(s):
    try:
        return [FineTuneMode.parse(m) for m in s.split(",") if m.strip()]
    except ValueError as e:
        raise UsageError(str(e)) from None


def _copy_meta(src_ckpt, dst_ckpt):
    if os.path.exists(_meta_path(src_ckpt)) and os.path.abspath(src_ckpt) != os.path.abspath(dst_ckpt):
        shutil.copyfile(_meta_path(src_ckpt), _meta_path(dst_ckpt))


def _train_config(args, mode, cache=None):
    try:
        return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                           seed=args.seed, mode=mode, cache_enabled=cache,
                           sampler=getattr(args, "sampler", "replacement"))
    except ValueError as e:
        raise UsageError(str(e)) from None


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    n_pre = args.pretrain_samples if args.pretrain_samples is not None else args.samples
    n_ft = args.finetune_samples if args.finetune_samples is not None else args.samples
    n_te = args.test_samples if args.test_samples is not None else args.samples
    spec = DriftSpec(num_classes=args.classes, feature_dim=args.features, n_pretrain=n_pre,
                     n_finetune=n_ft, n_test=n_te, separation=args.separation, noise=args.noise,
                     drift_shift=args.drift_shift, drift_noise=args.drift_noise,
                     class_jitter=args.class_jitter, seed=args.seed)
    try:
        spec.validate()
    except DataError as e:
        raise UsageError(str(e)) from None
    os.makedirs(args.out_dir, exist_ok=True)
    splits = gen_drifted(spec)
    for ds in splits:
        path = os.path.join(args.out_dir, f"{ds.name}.csv")
        write_csv(ds, path)
        print(f"wrote {path}: {len(ds)} rows, {ds.num_features} features, {ds.num_classes} classes")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    raw = _load_data(args.data, args.label_column)
    norm = None if args.no_normalize else fit_norm(raw)
    ds = raw if norm is None else norm.apply(raw)
    if args.dims:
        dims = _parse_dims(args.dims)
    else:
        dims = [ds.num_features] + [args.hidden] * (args.layers - 1) + [ds.num_classes]
    try:
        spec = ModelSpec(dims, rank=args.rank, mode=FineTuneMode.FT_ALL, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    model = build(spec)
    _check_dims(model, ds)
    metrics = pretrain(model, ds, _train_config(args, FineTuneMode.FT_ALL, False))
    acc = evaluate(model, ds)
    checkpoint.save(model, args.checkpoint_out)
    _write_meta(args.checkpoint_out, ds.label_map, norm)
    if args.metrics_out:
        metrics.to_csv(args.metrics_out)
    print(f"final train loss: {metrics.losses[-1]:.6f}")
    print(f"pretrain accuracy: {100 * acc:.2f}")
    print(f"checkpoint: {args.checkpoint_out} ({os.path.getsize(args.checkpoint_out)} bytes)")
    return EXIT_OK


def _prepare_finetune_model(base, mode, rank, seed):
    ck_mode = base.mode
    if ck_mode.has_adapters:
        skip = {FineTuneMode.SKIP_LORA, FineTuneMode.SKIP2_LORA}
        if not (ck_mode is mode or (ck_mode in skip and mode in skip)):
            raise UsageError(f"checkpoint holds {ck_mode} adapters; cannot fine-tune it as {mode}")
        if base.spec.rank != rank:
            raise UsageError(f"checkpoint adapters have rank {base.spec.rank}, --rank is {rank}")
        model = build(ModelSpec(base.dims, rank=rank, mode=mode, seed=seed))
        src = base.tensors()
        for name, t in model.tensors().items():
            t[...] = src[name]
        return model
    return finetune_model(base, mode, rank=rank, seed=seed)


def cmd_finetune(args) -> int:
    mode = FineTuneMode.parse(args.mode)
    base = _load_ckpt(args.checkpoint_in)
    label_map, norm = _read_meta(args.checkpoint_in)
    ds = _load_data(args.data, args.label_column, label_map, norm)
    test = _load_data(args.test_data, args.label_column, label_map, norm) if args.test_data else None
    _check_dims(base, ds)
    config = _train_config(args, mode, args.cache)
    model = _prepare_finetune_model(base, mode, args.rank, args.seed)
    metrics = finetune(model, ds, config)
    checkpoint.save(model, args.checkpoint_out)
    _copy_meta(args.checkpoint_in, args.checkpoint_out)
    if args.metrics_out:
        metrics.to_csv(args.metrics_out)
    t = metrics.totals()
    print(f"mode: {mode}  batches: {len(metrics.records)}  final loss: {metrics.losses[-1]:.6f}")
    print(f"macs: fc_fwd={int(t['fc_fwd_macs'])} lora_fwd={int(t['lora_fwd_macs'])} "
          f"bwd={int(t['bwd_macs'])} update={int(t['update_macs'])} total={metrics.total_macs}")
    print(f"cache: hits={int(t['cache_hits'])} misses={int(t['cache_misses'])}")
    if test is not None:
        _check_dims(model, test)
        print(f"test accuracy: {100 * evaluate(model, test):.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_ckpt(args.checkpoint)
    label_map, norm = _read_meta(args.checkpoint)
    ds = _load_data(args.data, args.label_column, label_map, norm)
    _check_dims(model, ds)
    acc = evaluate(model, ds)
    print(f"accuracy: {100 * acc:.2f}")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump({"accuracy": acc, "num_samples": len(ds), "mode": model.mode.value}, fh, indent=2)
    return EXIT_OK


BENCH_COLUMNS = ("mode", "train_batch_ms", "forward_ms", "backward_ms", "update_ms",
                 "train_batch_ms_after_epoch0", "predict_sample_ms", "fc_fwd_macs", "lora_fwd_macs",
                 "bwd_macs", "update_macs", "total_macs", "fwd_mac_reduction_pct",
                 "bwd_mac_reduction_pct", "total_mac_reduction_pct", "train_time_reduction_pct")


def bench_modes(base, ds, modes, baseline, epochs, batch_size, rank, lr, seed, predict_samples=100):
    """Run one timed fine-tune per mode from the same base; returns table rows."""
    rows = []
    for mode in modes:
        model = finetune_model(base, mode, rank=rank, seed=seed)
        cfg = TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=lr, seed=seed, mode=mode)
        m = finetune(model, ds, cfg)
        t = m.totals()
        nb = len(m.records)
        times = m.mean_batch_times_us()
        warm = m.mean_batch_times_us(skip_first_epoch=True)
        k = min(predict_samples, len(ds))
        t0 = time.perf_counter()
        for i in range(k):
            model.predict(ds.features[i:i + 1])
        predict_ms = (time.perf_counter() - t0) * 1e3 / k
        rows.append({
            "mode": mode.value,
            "train_batch_ms": times["train"] / 1e3,
            "forward_ms": times["forward"] / 1e3,
            "backward_ms": times["backward"] / 1e3,
            "update_ms": times["update"] / 1e3,
            "train_batch_ms_after_epoch0": warm["train"] / 1e3,
            "predict_sample_ms": predict_ms,
            "fc_fwd_macs": int(t["fc_fwd_macs"]),
            "lora_fwd_macs": int(t["lora_fwd_macs"]),
            "bwd_macs": int(t["bwd_macs"]),
            "update_macs": int(t["update_macs"]),
            "total_macs": m.total_macs,
            "_batches": nb,
        })
    ref = next((r for r in rows if r["mode"] == baseline.value), None)

    def red(a, b):
        return 100.0 * (1.0 - a / b) if b else float("nan")

    for r in rows:
        if ref is None:
            for c in BENCH_COLUMNS[-4:]:
                r[c] = float("nan")
            continue
        r["fwd_mac_reduction_pct"] = red(r["fc_fwd_macs"] + r["lora_fwd_macs"], ref["fc_fwd_macs"] + ref["lora_fwd_macs"])
        r["bwd_mac_reduction_pct"] = red(r["bwd_macs"], ref["bwd_macs"])
        r["total_mac_reduction_pct"] = red(r["total_macs"], ref["total_macs"])
        r["train_time_reduction_pct"] = red(r["train_batch_ms"], ref["train_batch_ms"])
    for r in rows:
        r.pop("_batches")
    return rows


def _format_table(rows):
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}" if abs(v) < 100 else f"{v:.1f}"
        return str(v)

    cells = [list(BENCH_COLUMNS)] + [[fmt(r[c]) for c in BENCH_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(BENCH_COLUMNS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def cmd_bench(args) -> int:
    modes = _modes(args.modes)
    baseline = FineTuneMode.parse(args.baseline) if args.baseline else None
    if baseline is None:
        raise UsageError("--baseline must name a mode")
    base = _load_ckpt(args.checkpoint_in)
    if base.mode.has_adapters:
        raise UsageError("bench needs a pre-trained checkpoint without adapters")
    label_map, norm = _read_meta(args.checkpoint_in)
    ds = _load_data(args.data, args.label_column, label_map, norm)
    _check_dims(base, ds)
    _train_config(args, modes[0] if modes else FineTuneMode.SKIP_LORA)
    rows = bench_modes(base, ds, modes, baseline, args.epochs, args.batch_size, args.rank,
                       args.lr, args.seed, args.predict_samples)
    print(f"kernels: {linalg.backend()}  epochs: {args.epochs}  batch: {args.batch_size}  baseline: {baseline}")
    print(_format_table(rows))
    if args.out:
        if args.out.endswith(".json"):
            with open(args.out, "w") as fh:
                json.dump(rows, fh, indent=2)
        else:
            with open(args.out, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
                w.writeheader()
                w.writerows(rows)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _train_flags(p, epochs):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-column", default="-1",
                   help="label column index or header name (default: last column)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skip2lora", description=__doc__.splitlines()[0])
    p.add_argument("--kernels", choices=sorted(linalg._kernels.BACKENDS),
                   help="kernel backend (default from SKIP2LORA_KERNELS, else numba)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic pre-train/fine-tune/test CSVs")
    g.add_argument("--out-dir", default=".")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=470, help="rows per split")
    g.add_argument("--pretrain-samples", type=int)
    g.add_argument("--finetune-samples", type=int)
    g.add_argument("--test-samples", type=int)
    g.add_argument("--features", type=int, default=256)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--separation", type=float, default=DriftSpec.separation)
    g.add_argument("--noise", type=float, default=DriftSpec.noise)
    g.add_argument("--drift-shift", type=float, default=DriftSpec.drift_shift)
    g.add_argument("--drift-noise", type=float, default=DriftSpec.drift_noise)
    g.add_argument("--class-jitter", type=float, default=DriftSpec.class_jitter)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train an FC network from scratch")
    t.add_argument("--data", required=True)
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--metrics-out")
    t.add_argument("--dims", help="comma-separated layer widths, e.g. 256,96,96,3")
    t.add_argument("--hidden", type=int, default=96)
    t.add_argument("--layers", type=int, default=3)
    t.add_argument("--rank", type=int, default=4)
    t.add_argument("--no-normalize", action="store_true")
    _train_flags(t, epochs=100)
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint with one of the eight modes")
    f.add_argument("--checkpoint-in", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--mode", required=True, choices=DEFAULT_MODES)
    f.add_argument("--checkpoint-out", required=True)
    f.add_argument("--metrics-out")
    f.add_argument("--test-data")
    f.add_argument("--rank", type=int, default=4)
    f.add_argument("--cache", action=argparse.BooleanOptionalAction, default=None,
                   help="activation cache (default: on for skip2-lora only)")
    f.add_argument("--sampler", choices=["replacement", "shuffle"], default="replacement")
    _train_flags(f, epochs=300)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="write a JSON report here")
    e.add_argument("--label-column", default="-1")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="timed fine-tunes of several modes with MAC totals")
    b.add_argument("--checkpoint-in", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--modes", default=",".join(DEFAULT_MODES))
    b.add_argument("--baseline", default="lora-all")
    b.add_argument("--rank", type=int, default=4)
    b.add_argument("--predict-samples", type=int, default=100)
    b.add_argument("--out", help="write the table as CSV (or JSON if the name ends in .json)")
    _train_flags(b, epochs=300)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.kernels:
        linalg.set_backend(args.kernels)
    try:
        return args.func(args)
    except (UsageError, DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ContractViolation as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
