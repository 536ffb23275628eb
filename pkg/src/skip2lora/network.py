"""Multi-layer FC network with fine-tuning topologies and compute-type wiring."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from . import linalg, seeding
from .errors import ContractViolation, ShapeError
from .layers import BatchNormLayer, ComputeType, FcLayer, LoraAdapter, ReLU
from .linalg import MacCounter

CT = ComputeType


class FineTuneMode(enum.Enum):
    FT_ALL = "ft-all"
    FT_LAST = "ft-last"
    FT_BIAS = "ft-bias"
    FT_ALL_LORA = "ft-all-lora"
    LORA_ALL = "lora-all"
    LORA_LAST = "lora-last"
    SKIP_LORA = "skip-lora"
    SKIP2_LORA = "skip2-lora"

    @property
    def id(self) -> int:
        return list(FineTuneMode).index(self)

    @classmethod
    def from_id(cls, i: int) -> "FineTuneMode":
        modes = list(cls)
        if not 0 <= i < len(modes):
            raise ValueError(f"unknown mode id {i}")
        return modes[i]

    @classmethod
    def parse(cls, s) -> "FineTuneMode":
        if isinstance(s, cls):
            return s
        key = str(s).strip().lower().replace("_", "-")
        for m in cls:
            if key in (m.value, m.value.replace("-", ""), m.name.lower().replace("_", "-")):
                return m
        raise ValueError(f"unknown fine-tune mode {s!r}; choose from {[m.value for m in cls]}")

    @property
    def topology(self) -> str:
        """Where adapters sit: ``none``, ``per-layer``, ``last`` or ``skip``."""
        if self in (FineTuneMode.FT_ALL, FineTuneMode.FT_LAST, FineTuneMode.FT_BIAS):
            return "none"
        if self in (FineTuneMode.FT_ALL_LORA, FineTuneMode.LORA_ALL):
            return "per-layer"
        if self is FineTuneMode.LORA_LAST:
            return "last"
        return "skip"

    @property
    def has_adapters(self) -> bool:
        return self.topology != "none"

    @property
    def trains_bn_affine(self) -> bool:
        return self in (FineTuneMode.FT_ALL, FineTuneMode.FT_ALL_LORA)

    def __str__(self):
        return self.value


def compute_type_assignment(mode: FineTuneMode, n: int) -> tuple[list[CT], list[CT]]:
    """Per-layer FC and LoRA compute types for an ``n``-layer network.

    Layer 1 never propagates ``gx``; layers 2..n-1 repeat layer 2's type.
    ``NONE`` marks a layer without an adapter.
    """
    if n < 2:
        raise ValueError(f"need n >= 2 layers, got {n}")
    mode = FineTuneMode.parse(mode)
    none = [CT.NONE] * n
    lora_all = [CT.LORA_YW] + [CT.LORA_YWX] * (n - 1)
    ft_all = [CT.FC_YWB] + [CT.FC_YWBX] * (n - 1)
    table = {
        FineTuneMode.FT_ALL: (ft_all, none),
        FineTuneMode.FT_LAST: ([CT.FC_Y] * (n - 1) + [CT.FC_YWB], none),
        FineTuneMode.FT_BIAS: ([CT.FC_YB] + [CT.FC_YBX] * (n - 1), none),
        FineTuneMode.FT_ALL_LORA: (ft_all, lora_all),
        FineTuneMode.LORA_ALL: ([CT.FC_Y] + [CT.FC_YX] * (n - 1), lora_all),
        FineTuneMode.LORA_LAST: ([CT.FC_Y] * n, [CT.NONE] * (n - 1) + [CT.LORA_YW]),
        FineTuneMode.SKIP_LORA: ([CT.FC_Y] * n, [CT.LORA_YW] * n),
        FineTuneMode.SKIP2_LORA: ([CT.FC_Y] * n, [CT.LORA_YW] * n),
    }
    fc, lora = table[mode]
    return list(fc), list(lora)


@dataclass
class ModelSpec:
    layer_dims: tuple[int, ...]
    rank: int = 4
    mode: FineTuneMode = FineTuneMode.FT_ALL
    seed: int = 0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.mode = FineTuneMode.parse(self.mode)
        if len(self.layer_dims) < 3:
            raise ValueError(f"need at least 2 layers (3 dims), got {self.layer_dims}")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"all layer dims must be >= 1, got {self.layer_dims}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")

    @property
    def n(self) -> int:
        return len(self.layer_dims) - 1


def adapter_wiring(mode: FineTuneMode, n: int) -> list[tuple[int, int]]:
    """(src, dst) layer pairs, 1-based; adapter (k, j) reads the input of layer k."""
    topo = FineTuneMode.parse(mode).topology
    if topo == "none":
        return []
    if topo == "per-layer":
        return [(k, k) for k in range(1, n + 1)]
    if topo == "last":
        return [(n, n)]
    return [(k, n) for k in range(1, n + 1)]


class Model:
    """FC -> BN -> ReLU blocks with a bare final FC, plus the mode's adapters."""

    def __init__(self, spec: ModelSpec, counter: MacCounter | None = None):
        self.spec = spec
        self.counter = counter if counter is not None else MacCounter()
        dims = spec.layer_dims
        n = spec.n
        rng = seeding.stream(spec.seed, seeding.INIT)
        self.layers = [FcLayer.he_init(dims[k - 1], dims[k], rng, f"FC{k}") for k in range(1, n + 1)]
        self.bns = [BatchNormLayer(dims[k], name=f"BN{k}") for k in range(1, n)]
        self.acts = [ReLU(f"Act{k}") for k in range(1, n)]
        self.adapters = [
            LoraAdapter.init(dims[src - 1], dims[dst], spec.rank, rng, src, dst, f"LoRA{src}")
            for src, dst in adapter_wiring(spec.mode, n)
        ]
        self.fc_types, self.lora_types = compute_type_assignment(spec.mode, n)
        self._ready_for_backward = False

    # ------------------------------------------------------------ structure
    @property
    def mode(self) -> FineTuneMode:
        return self.spec.mode

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def dims(self) -> tuple[int, ...]:
        return self.spec.layer_dims

    @property
    def is_skip(self) -> bool:
        return self.mode.topology == "skip"

    def adapter_for_layer(self, k: int) -> LoraAdapter | None:
        for ad in self.adapters:
            if ad.dst == k and self.mode.topology != "skip":
                return ad
        return None

    def set_bn_training(self, flag: bool) -> None:
        for bn in self.bns:
            bn.training = flag

    def tensors(self) -> dict[str, np.ndarray]:
        """Every parameter/statistic tensor keyed by name, in checkpoint order."""
        out = {}
        for k, fc in enumerate(self.layers, start=1):
            out[f"W{k}"] = fc.W
            out[f"b{k}"] = fc.b
            if k < self.n:
                bn = self.bns[k - 1]
                out[f"gamma{k}"] = bn.gamma
                out[f"beta{k}"] = bn.beta
                out[f"running_mean{k}"] = bn.running_mean
                out[f"running_var{k}"] = bn.running_var
        for ad in self.adapters:
            out[f"W_A{ad.src}"] = ad.W_A
            out[f"W_B{ad.src}"] = ad.W_B
        return out

    def trainable(self) -> set[str]:
        names = set()
        for k, ct in enumerate(self.fc_types, start=1):
            if ct.weight_grad:
                names.add(f"W{k}")
            if ct.bias_grad:
                names.add(f"b{k}")
        if self.mode.trains_bn_affine:
            for k in range(1, self.n):
                names.update({f"gamma{k}", f"beta{k}"})
        for ad in self.adapters:
            names.update({f"W_A{ad.src}", f"W_B{ad.src}"})
        return names

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for k, fc in enumerate(self.layers, start=1):
            out[f"W{k}"] = fc.gW
            out[f"b{k}"] = fc.gb
            if k < self.n:
                out[f"gamma{k}"] = self.bns[k - 1].ggamma
                out[f"beta{k}"] = self.bns[k - 1].gbeta
        for ad in self.adapters:
            out[f"W_A{ad.src}"] = ad.gW_A
            out[f"W_B{ad.src}"] = ad.gW_B
        return out

    def checksums(self) -> dict[str, str]:
        return {k: hashlib.sha256(v.tobytes()).hexdigest() for k, v in self.tensors().items()}

    def load_base_from(self, other: "Model") -> None:
        """Copy FC and BN tensors from ``other`` (adapters are left alone)."""
        if other.dims != self.dims:
            raise ShapeError(f"dims {other.dims} != {self.dims}")
        mine = self.tensors()
        for name, t in other.tensors().items():
            if not name.startswith("W_"):
                mine[name][...] = t

    # ------------------------------------------------------------ forward
    def forward(self, x, collect_taps: bool = False):
        """Logits for a batch; with ``collect_taps`` also the per-layer taps.

        Taps are the post-block activations of layers 1..n-1 followed by the
        final FC output before any adapter is added.
        """
        x = linalg.as_matrix(x, "x")
        if x.shape[1] != self.dims[0]:
            raise ShapeError(f"input has {x.shape[1]} features, model expects {self.dims[0]}")
        if self.is_skip:
            taps = self.frozen_forward(x)
            logits = self.skip_head(x, taps)
        else:
            taps = []
            h = x
            for k in range(1, self.n + 1):
                z = self.layers[k - 1].forward(h, self.counter)
                ad = self.adapter_for_layer(k)
                if k == self.n and collect_taps:
                    taps.append(z.copy())
                if ad is not None:
                    linalg.add_inplace(z, ad.forward(h, self.counter), f"{ad.name}.fwd", self.counter)
                if k < self.n:
                    z = self.acts[k - 1].forward(self.bns[k - 1].forward(z, self.counter))
                    if collect_taps:
                        taps.append(z)
                h = z
            logits = h
        self._ready_for_backward = True
        return (logits, taps) if collect_taps else logits

    def frozen_forward(self, x) -> list[np.ndarray]:
        """Adapter-free pass; returns the taps a skip-topology head consumes."""
        taps = []
        h = linalg.as_matrix(x, "x")
        for k in range(1, self.n + 1):
            z = self.layers[k - 1].forward(h, self.counter)
            if k < self.n:
                z = self.acts[k - 1].forward(self.bns[k - 1].forward(z, self.counter))
            taps.append(z)
            h = z
        return taps

    def skip_head(self, x, taps) -> np.ndarray:
        """Final-layer output plus every skip adapter's contribution, in layer order."""
        if not self.is_skip:
            raise ContractViolation(f"skip_head needs a skip topology, mode is {self.mode}")
        y = np.array(taps[-1], dtype=np.float32, copy=True)
        inputs = [linalg.as_matrix(x, "x")] + [linalg.as_matrix(t) for t in taps[:-1]]
        for ad in self.adapters:
            linalg.add_inplace(y, ad.forward(inputs[ad.src - 1], self.counter), f"{ad.name}.fwd", self.counter)
        self._ready_for_backward = True
        return y

    # ------------------------------------------------------------ backward
    def backward(self, glogits) -> None:
        if not self._ready_for_backward:
            raise ContractViolation("backward called without a preceding forward")
        g = linalg.as_matrix(glogits, "glogits")
        c = self.counter
        if self.is_skip:
            for ad, ct in zip(self.adapters, self.lora_types):
                ad.backward(g, ct, c)
            self._ready_for_backward = False
            return
        train_affine = self.mode.trains_bn_affine
        for k in range(self.n, 0, -1):
            if k < self.n:
                g = self.acts[k - 1].backward(g)
                g = self.bns[k - 1].backward(g, train_affine, c)
            fct = self.fc_types[k - 1]
            gx = None
            if fct is not CT.FC_Y:
                gx = self.layers[k - 1].backward(g, fct, c)
            ad = self.adapter_for_layer(k)
            lct = self.lora_types[k - 1]
            if ad is not None and lct is not CT.NONE:
                gx_a = ad.backward(g, lct, c)
                if gx_a is not None:
                    if gx is None:
                        gx = gx_a
                    else:
                        linalg.add_inplace(gx, gx_a, f"{ad.name}.bwd", c)
            if gx is None:
                break
            g = gx
        self._ready_for_backward = False

    def update(self, eta: float) -> None:
        c = self.counter
        for fc, ct in zip(self.layers, self.fc_types):
            if ct.weight_grad or ct.bias_grad:
                fc.update(eta, ct.weight_grad, ct.bias_grad, c)
        if self.mode.trains_bn_affine:
            for bn in self.bns:
                bn.update(eta, c)
        for ad in self.adapters:
            ad.update(eta, c)

    def backward_and_update(self, glogits, eta: float) -> None:
        self.backward(glogits)
        self.update(eta)

    def predict(self, x) -> np.ndarray:
        return predict_from_logits(self.forward(x))


def predict_from_logits(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(np.asarray(logits), axis=1)


def build(spec: ModelSpec, base: Model | None = None, counter: MacCounter | None = None) -> Model:
    model = Model(spec, counter)
    if base is not None:
        model.load_base_from(base)
    return model


def finetune_model(base: Model, mode: FineTuneMode | str, rank: int = 4, seed: int = 0) -> Model:
    """A fresh ``mode`` model carrying ``base``'s FC/BN tensors and new adapters."""
    spec = ModelSpec(base.dims, rank=rank, mode=FineTuneMode.parse(mode), seed=seed)
    return build(spec, base=base)
