"""Training loops, the cache-aware forward pass, evaluation and gradient checks."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .data import Dataset
from .errors import ContractViolation, ShapeError
from .linalg import MacCounter
from .layers import SoftmaxCrossEntropy
from .network import FineTuneMode, Model
from .skipcache import SkipCache

METRICS_COLUMNS = ("epoch", "batch", "loss", "fc_fwd_macs", "lora_fwd_macs", "bwd_macs",
                   "update_macs", "cache_hits", "cache_misses", "elapsed_us")


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 20
    learning_rate: float = 0.01
    seed: int = 0
    mode: FineTuneMode = FineTuneMode.SKIP2_LORA
    cache_enabled: bool | None = None
    sampler: str = "replacement"

    def __post_init__(self):
        self.mode = FineTuneMode.parse(self.mode)
        if self.cache_enabled is None:
            self.cache_enabled = self.mode is FineTuneMode.SKIP2_LORA
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.cache_enabled and self.mode is not FineTuneMode.SKIP2_LORA:
            raise ValueError(f"the activation cache is only valid in skip2-lora mode, not {self.mode}")
        if self.sampler not in ("replacement", "shuffle"):
            raise ValueError(f"sampler must be 'replacement' or 'shuffle', got {self.sampler!r}")


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    loss: float
    fc_fwd_macs: int
    lora_fwd_macs: int
    bwd_macs: int
    update_macs: int
    cache_hits: int
    cache_misses: int
    elapsed_us: float
    forward_us: float = 0.0
    backward_us: float = 0.0
    update_us: float = 0.0


def _is_lora(label):
    return label.startswith("LoRA")


def split_macs(delta: dict[str, int]) -> dict[str, int]:
    """Bucket per-label MAC deltas into the metrics columns."""
    out = dict(fc_fwd_macs=0, lora_fwd_macs=0, bwd_macs=0, update_macs=0)
    for label, v in delta.items():
        if label.endswith(".fwd"):
            out["lora_fwd_macs" if _is_lora(label) else "fc_fwd_macs"] += v
        elif label.endswith(".bwd"):
            out["bwd_macs"] += v
        elif label.endswith(".upd"):
            out["update_macs"] += v
    return out


@dataclass
class RunMetrics:
    records: list[BatchRecord] = field(default_factory=list)
    macs_by_label: dict[str, int] = field(default_factory=dict)
    batches_per_epoch: int = 0

    def totals(self) -> dict[str, float]:
        keys = ("fc_fwd_macs", "lora_fwd_macs", "bwd_macs", "update_macs", "cache_hits",
                "cache_misses", "elapsed_us", "forward_us", "backward_us", "update_us")
        return {k: sum(getattr(r, k) for r in self.records) for k in keys}

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def total_macs(self) -> int:
        t = self.totals()
        return int(t["fc_fwd_macs"] + t["lora_fwd_macs"] + t["bwd_macs"] + t["update_macs"])

    def mean_batch_times_us(self, skip_first_epoch: bool = False) -> dict[str, float]:
        recs = [r for r in self.records if not (skip_first_epoch and r.epoch == 0)] or self.records
        n = len(recs)
        return {
            "train": sum(r.elapsed_us for r in recs) / n,
            "forward": sum(r.forward_us for r in recs) / n,
            "backward": sum(r.backward_us for r in recs) / n,
            "update": sum(r.update_us for r in recs) / n,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, r.batch, repr(r.loss), r.fc_fwd_macs, r.lora_fwd_macs,
                            r.bwd_macs, r.update_macs, r.cache_hits, r.cache_misses,
                            f"{r.elapsed_us:.1f}"])


def sample_batch(rng: np.random.Generator, num_samples: int, batch_size: int) -> np.ndarray:
    """``batch_size`` indices drawn uniformly with replacement."""
    if num_samples < 1:
        raise ValueError("cannot sample from an empty set")
    return rng.integers(0, num_samples, size=batch_size)


def _batches(rng, num_samples, batch_size, sampler):
    nb = num_samples // batch_size
    if sampler == "shuffle":
        perm = rng.permutation(num_samples)
        for b in range(nb):
            yield perm[b * batch_size:(b + 1) * batch_size]
    else:
        for _ in range(nb):
            yield sample_batch(rng, num_samples, batch_size)


def forward_fc_cached(model: Model, cache: SkipCache, indices, x):
    """Skip-topology forward that reuses cached frozen-path activations.

    Samples not yet cached run through the frozen layers once and are
    inserted; every sample's activations are then read back from the cache so
    that hits and misses share one arithmetic route into the adapter head.
    A sample repeated within a batch is a miss on its first occurrence and a
    hit afterwards.  Returns ``(logits, number_of_new_entries)``.
    """
    if not model.is_skip:
        raise ContractViolation(f"cached forward needs a skip topology, model is {model.mode}")
    indices = np.asarray(indices, dtype=np.int64)
    x = np.asarray(x, dtype=np.float32)
    if x.shape[0] != indices.shape[0]:
        raise ShapeError(f"{indices.shape[0]} indices for a batch of {x.shape[0]} rows")
    if indices.size and indices.max() >= cache.capacity:
        raise ContractViolation(f"sample index {indices.max()} exceeds cache capacity {cache.capacity}")
    first_row: dict[int, int] = {}
    repeats = []
    missing = []
    for r, i in enumerate(indices.tolist()):
        if i in first_row:
            repeats.append(i)
            continue
        first_row[i] = r
        if cache.lookup(i) is None:
            missing.append(i)
    if missing:
        rows = [first_row[i] for i in missing]
        taps = model.frozen_forward(x[rows])
        for j, i in enumerate(missing):
            cache.insert(i, [t[j] for t in taps])
    for i in repeats:
        cache.lookup(i)
    return model.skip_head(x, cache.gather(indices)), len(missing)


def _run(model: Model, dataset: Dataset, config: TrainConfig, cache: SkipCache | None,
         on_batch=None, on_epoch=None) -> RunMetrics:
    T = len(dataset)
    B = config.batch_size
    if T < B:
        raise ValueError(f"{T} samples cannot fill a batch of {B}; lower the batch size")
    if dataset.num_features != model.dims[0]:
        raise ShapeError(f"dataset has {dataset.num_features} features, model expects {model.dims[0]}")
    if dataset.num_classes > model.dims[-1]:
        raise ShapeError(f"dataset has {dataset.num_classes} classes, model outputs {model.dims[-1]}")
    rng = seeding.stream(config.seed, seeding.SAMPLING)
    cel = SoftmaxCrossEntropy()
    counter = model.counter
    feats, labels = dataset.features, dataset.labels
    metrics = RunMetrics(batches_per_epoch=T // B)
    start_macs = counter.snapshot()
    for e in range(config.epochs):
        for b, idx in enumerate(_batches(rng, T, B, config.sampler)):
            before = counter.snapshot()
            h0, m0 = (cache.hits, cache.misses) if cache is not None else (0, 0)
            t0 = time.perf_counter()
            x = feats[idx]
            if cache is not None:
                logits, _ = forward_fc_cached(model, cache, idx, x)
            else:
                logits = model.forward(x)
            loss = cel.forward(logits, labels[idx])
            t1 = time.perf_counter()
            model.backward(cel.backward())
            t2 = time.perf_counter()
            model.update(config.learning_rate)
            t3 = time.perf_counter()
            after = counter.snapshot()
            delta = {k: v - before.get(k, 0) for k, v in after.items() if v != before.get(k, 0)}
            h1, m1 = (cache.hits, cache.misses) if cache is not None else (0, 0)
            metrics.records.append(BatchRecord(
                epoch=e, batch=b, loss=loss, **split_macs(delta),
                cache_hits=h1 - h0, cache_misses=m1 - m0,
                elapsed_us=(t3 - t0) * 1e6, forward_us=(t1 - t0) * 1e6,
                backward_us=(t2 - t1) * 1e6, update_us=(t3 - t2) * 1e6,
            ))
            if on_batch is not None:
                on_batch(metrics.records[-1], model)
        if on_epoch is not None:
            on_epoch(e, model)
    end = counter.snapshot()
    metrics.macs_by_label = {k: v - start_macs.get(k, 0) for k, v in end.items() if v != start_macs.get(k, 0)}
    return metrics


def _same_graph(a: FineTuneMode, b: FineTuneMode) -> bool:
    skip = {FineTuneMode.SKIP_LORA, FineTuneMode.SKIP2_LORA}
    return a is b or (a in skip and b in skip)


def finetune(model: Model, dataset: Dataset, config: TrainConfig, cache: SkipCache | None = None,
             on_batch=None, on_epoch=None) -> RunMetrics:
    """Fine-tune with the model's mode; the cache is used only when enabled.

    BN runs on frozen running statistics.  A fresh cache is created unless
    one is passed in (it must be empty or belong to this same run).
    ``on_batch(record, model)`` and ``on_epoch(epoch, model)`` are optional
    observers called after each batch and each epoch.
    """
    if not _same_graph(model.mode, config.mode):
        raise ContractViolation(f"model built for {model.mode}, config asks for {config.mode}")
    model.set_bn_training(False)
    if config.cache_enabled and cache is None:
        cache = SkipCache(len(dataset), model.dims)
    elif not config.cache_enabled:
        cache = None
    return _run(model, dataset, config, cache, on_batch, on_epoch)


def pretrain(model: Model, dataset: Dataset, config: TrainConfig, on_epoch=None) -> RunMetrics:
    """Full backprop with batch-statistics BN; leaves BN frozen afterwards."""
    if model.mode is not FineTuneMode.FT_ALL:
        raise ContractViolation(f"pre-training needs an ft-all model, got {model.mode}")
    if config.cache_enabled:
        raise ContractViolation("pre-training cannot use the activation cache")
    if config.batch_size < 2:
        raise ValueError("batch-statistics BN needs batch_size >= 2")
    model.set_bn_training(True)
    try:
        return _run(model, dataset, config, None, on_epoch=on_epoch)
    finally:
        model.set_bn_training(False)


def evaluate(model: Model, dataset: Dataset) -> float:
    """Accuracy of ``model`` on ``dataset``; MACs are not charged to the model's counter."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    saved = model.counter
    model.counter = MacCounter()
    try:
        pred = model.predict(dataset.features)
    finally:
        model.counter = saved
    return float(np.mean(pred == dataset.labels))


def required_epochs(accuracies, reference: float | None = None, band: float = 0.01) -> int:
    """First epoch (1-based) whose accuracy is within ``band`` of ``reference``.

    ``reference`` defaults to the last accuracy in the curve.
    """
    acc = list(accuracies)
    if not acc:
        raise ValueError("empty accuracy curve")
    ref = acc[-1] if reference is None else reference
    for e, a in enumerate(acc, start=1):
        if abs(a - ref) <= band:
            return e
    return len(acc)


# --------------------------------------------------------------- gradient checks

def reference_logits64(params: dict[str, np.ndarray], model: Model, x, bn_training: bool = False) -> np.ndarray:
    """Straight-line float64 forward pass over ``params`` using the model's wiring.

    Independent of the float32 kernels: plain numpy ``@`` in double precision.
    """
    n = model.n
    h = np.asarray(x, dtype=np.float64)
    x_in = [h]
    per_layer = {ad.dst: ad for ad in model.adapters} if not model.is_skip else {}
    z = None
    for k in range(1, n + 1):
        z = h @ params[f"W{k}"] + params[f"b{k}"]
        if k in per_layer:
            ad = per_layer[k]
            z = z + h @ params[f"W_A{ad.src}"] @ params[f"W_B{ad.src}"]
        if k < n:
            eps = model.bns[k - 1].eps
            if bn_training:
                mu, var = z.mean(axis=0), z.var(axis=0)
            else:
                mu, var = params[f"running_mean{k}"], params[f"running_var{k}"]
            z = params[f"gamma{k}"] * (z - mu) / np.sqrt(var + eps) + params[f"beta{k}"]
            z = np.maximum(z, 0.0)
            x_in.append(z)
        h = z
    if model.is_skip:
        for ad in model.adapters:
            z = z + x_in[ad.src - 1] @ params[f"W_A{ad.src}"] @ params[f"W_B{ad.src}"]
    return z


def reference_loss64(params, model: Model, x, labels, bn_training: bool = False) -> float:
    z = reference_logits64(params, model, x, bn_training)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    labels = np.asarray(labels)
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def grad_check(model: Model, x, labels, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Analytic gradients come from the model's own float32 backward pass; the
    numeric ones perturb a float64 copy of every trainable scalar.  Frozen
    gradient buffers must come out untouched.  Parameters are not updated.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be > 0, got {h}")
    bn_training = any(bn.training for bn in model.bns)
    trainable = model.trainable()
    grads = model.gradients()
    before = {k: g.copy() for k, g in grads.items()}
    cel = SoftmaxCrossEntropy()
    cel.forward(model.forward(x), labels)
    model.backward(cel.backward())
    for name, g in grads.items():
        if name not in trainable and not np.array_equal(g, before[name]):
            raise ContractViolation(f"gradient of frozen tensor {name} was written")
    params = {k: v.astype(np.float64) for k, v in model.tensors().items()}
    worst = 0.0
    for name in sorted(trainable):
        p = params[name]
        ga = grads[name].astype(np.float64)
        for j in np.ndindex(p.shape):
            orig = p[j]
            p[j] = orig + h
            lp = reference_loss64(params, model, x, labels, bn_training)
            p[j] = orig - h
            lm = reference_loss64(params, model, x, labels, bn_training)
            p[j] = orig
            gn = (lp - lm) / (2 * h)
            err = abs(ga[j] - gn) / max(abs(ga[j]), abs(gn), 1e-6)
            worst = max(worst, err)
    return worst
