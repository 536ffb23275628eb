"""FC, LoRA, batch-norm, ReLU and softmax cross-entropy layers.

Every backward pass computes only the gradients its :class:`ComputeType`
asks for; buffers outside that set are left untouched.  MACs are charged
to ``"<name>.fwd"``, ``"<name>.bwd"`` and ``"<name>.upd"``.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from . import linalg
from .errors import ContractViolation, ShapeError
from .linalg import MacCounter


class ComputeType(enum.Enum):
    FC_Y = "FCy"
    FC_YWBX = "FCywbx"
    FC_YWB = "FCywb"
    FC_YBX = "FCybx"
    FC_YB = "FCyb"
    FC_YX = "FCyx"
    LORA_YWX = "LoRAywx"
    LORA_YW = "LoRAyw"
    NONE = "None"

    @property
    def is_fc(self) -> bool:
        return self.value.startswith("FC")

    @property
    def is_lora(self) -> bool:
        return self.value.startswith("LoRA")

    @property
    def weight_grad(self) -> bool:
        return self in (ComputeType.FC_YWBX, ComputeType.FC_YWB,
                        ComputeType.LORA_YWX, ComputeType.LORA_YW)

    @property
    def bias_grad(self) -> bool:
        return self in (ComputeType.FC_YWBX, ComputeType.FC_YWB,
                        ComputeType.FC_YBX, ComputeType.FC_YB)

    @property
    def input_grad(self) -> bool:
        return self in (ComputeType.FC_YWBX, ComputeType.FC_YBX,
                        ComputeType.FC_YX, ComputeType.LORA_YWX)

    def __str__(self):
        return self.value


class FcLayer:
    """Affine map ``x @ W + b``; the activation lives in a separate layer."""

    def __init__(self, W, b, name: str = "FC"):
        self.W = linalg.as_matrix(W, f"{name}.W").copy()
        self.b = linalg.as_vector(b, f"{name}.b").copy()
        if self.b.shape[0] != self.W.shape[1]:
            raise ShapeError(f"{name}: bias length {self.b.shape[0]} != W cols {self.W.shape[1]}")
        self.name = name
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self.x: np.ndarray | None = None
        self._fresh: set[str] = set()

    @classmethod
    def he_init(cls, n_in: int, n_out: int, rng: np.random.Generator, name: str = "FC"):
        W = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))
        return cls(W, np.zeros(n_out), name)

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def forward(self, x, counter: MacCounter | None = None) -> np.ndarray:
        x = linalg.as_matrix(x, f"{self.name} input")
        if x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: input has {x.shape[1]} cols, expected {self.n_in}")
        self.x = x
        y = linalg.matmul(x, self.W, f"{self.name}.fwd", counter)
        y += self.b
        return y

    def backward(self, gy, ctype: ComputeType, counter: MacCounter | None = None):
        if not ctype.is_fc or ctype is ComputeType.FC_Y:
            raise ContractViolation(f"{self.name}: no backward for compute type {ctype}")
        gy = linalg.as_matrix(gy, f"{self.name} gy")
        if gy.shape[1] != self.n_out:
            raise ShapeError(f"{self.name}: gy has {gy.shape[1]} cols, expected {self.n_out}")
        label = f"{self.name}.bwd"
        if ctype.weight_grad:
            if self.x is None:
                raise ContractViolation(f"{self.name}: gW requested without a cached input")
            if self.x.shape[0] != gy.shape[0]:
                raise ShapeError(f"{self.name}: batch {gy.shape[0]} != cached batch {self.x.shape[0]}")
            self.gW[...] = linalg.matmul_at(self.x, gy, label, counter)
            self._fresh.add("W")
        if ctype.bias_grad:
            self.gb[...] = linalg.col_sum(gy, label, counter)
            self._fresh.add("b")
        if ctype.input_grad:
            return linalg.matmul_bt(gy, self.W, label, counter)
        return None

    def update(self, eta: float, update_w: bool, update_b: bool,
               counter: MacCounter | None = None) -> None:
        label = f"{self.name}.upd"
        for flag, key in ((update_w, "W"), (update_b, "b")):
            if flag and key not in self._fresh:
                raise ContractViolation(f"{self.name}: update of {key} without a fresh gradient")
        if update_w:
            linalg.scaled_sub_inplace(self.W, self.gW, eta, label, counter)
        if update_b:
            linalg.scaled_sub_inplace(self.b, self.gb, eta, label, counter)
        self._fresh.clear()


class LoraAdapter:
    """Low-rank pair ``x @ W_A @ W_B`` feeding layer ``dst`` from the input of layer ``src``.

    Initialised with Gaussian ``W_A`` (variance 1/N) and zero ``W_B``, so a fresh
    adapter contributes exactly nothing.  There is no output scaling factor.
    """

    def __init__(self, W_A, W_B, src: int, dst: int, name: str = "LoRA"):
        self.W_A = linalg.as_matrix(W_A, f"{name}.W_A").copy()
        self.W_B = linalg.as_matrix(W_B, f"{name}.W_B").copy()
        if self.W_A.shape[1] != self.W_B.shape[0]:
            raise ShapeError(f"{name}: W_A{self.W_A.shape} and W_B{self.W_B.shape} disagree on rank")
        self.src, self.dst, self.name = src, dst, name
        self.gW_A = np.zeros_like(self.W_A)
        self.gW_B = np.zeros_like(self.W_B)
        self.x: np.ndarray | None = None
        self.y_A: np.ndarray | None = None
        self._fresh = False

    @classmethod
    def init(cls, n_in: int, n_out: int, rank: int, rng: np.random.Generator,
             src: int, dst: int, name: str = "LoRA"):
        if rank < 1:
            raise ContractViolation(f"{name}: rank must be >= 1, got {rank}")
        W_A = rng.normal(0.0, math.sqrt(1.0 / n_in), size=(n_in, rank))
        return cls(W_A, np.zeros((rank, n_out)), src, dst, name)

    @property
    def rank(self) -> int:
        return self.W_A.shape[1]

    @property
    def n_in(self) -> int:
        return self.W_A.shape[0]

    @property
    def n_out(self) -> int:
        return self.W_B.shape[1]

    def forward(self, x, counter: MacCounter | None = None) -> np.ndarray:
        x = linalg.as_matrix(x, f"{self.name} input")
        if x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: input has {x.shape[1]} cols, expected {self.n_in}")
        label = f"{self.name}.fwd"
        self.x = x
        self.y_A = linalg.matmul(x, self.W_A, label, counter)
        return linalg.matmul(self.y_A, self.W_B, label, counter)

    def backward(self, gy, ctype: ComputeType, counter: MacCounter | None = None):
        if ctype not in (ComputeType.LORA_YWX, ComputeType.LORA_YW):
            raise ContractViolation(f"{self.name}: no backward for compute type {ctype}")
        if self.x is None or self.y_A is None:
            raise ContractViolation(f"{self.name}: backward without a preceding forward")
        gy = linalg.as_matrix(gy, f"{self.name} gy")
        if gy.shape != (self.x.shape[0], self.n_out):
            raise ShapeError(f"{self.name}: gy{gy.shape} vs expected {(self.x.shape[0], self.n_out)}")
        label = f"{self.name}.bwd"
        self.gW_B[...] = linalg.matmul_at(self.y_A, gy, label, counter)
        gx_B = linalg.matmul_bt(gy, self.W_B, label, counter)
        self.gW_A[...] = linalg.matmul_at(self.x, gx_B, label, counter)
        self._fresh = True
        if ctype is ComputeType.LORA_YWX:
            return linalg.matmul_bt(gx_B, self.W_A, label, counter)
        return None

    def update(self, eta: float, counter: MacCounter | None = None) -> None:
        if not self._fresh:
            raise ContractViolation(f"{self.name}: update with stale gradients")
        label = f"{self.name}.upd"
        linalg.scaled_sub_inplace(self.W_A, self.gW_A, eta, label, counter)
        linalg.scaled_sub_inplace(self.W_B, self.gW_B, eta, label, counter)
        self._fresh = False


class BatchNormLayer:
    """Per-feature batch normalisation.

    ``training=True`` normalises by batch statistics and folds them into the
    running estimates (unbiased variance, momentum 0.1).  ``training=False``
    uses the running estimates only and mutates nothing.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1, name: str = "BN"):
        self.gamma = np.ones(dim, dtype=np.float32)
        self.beta = np.zeros(dim, dtype=np.float32)
        self.running_mean = np.zeros(dim, dtype=np.float32)
        self.running_var = np.ones(dim, dtype=np.float32)
        self.ggamma = np.zeros(dim, dtype=np.float32)
        self.gbeta = np.zeros(dim, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum
        self.name = name
        self.training = False
        self._ctx = None
        self._fresh = False

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x, counter: MacCounter | None = None) -> np.ndarray:
        x = linalg.as_matrix(x, f"{self.name} input")
        B, M = x.shape
        if M != self.dim:
            raise ShapeError(f"{self.name}: input has {M} cols, expected {self.dim}")
        if self.training:
            if B < 2:
                raise ContractViolation(f"{self.name}: batch statistics need B >= 2, got {B}")
            mean = x.mean(axis=0, dtype=np.float32)
            var = x.var(axis=0, dtype=np.float32)
            m = np.float32(self.momentum)
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var * np.float32(B / (B - 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = (np.float32(1.0) / np.sqrt(var + np.float32(self.eps))).astype(np.float32)
        xhat = (x - mean) * inv_std
        self._ctx = (self.training, xhat, inv_std)
        if counter is not None:
            counter.add(f"{self.name}.fwd", B * M)
        return self.gamma * xhat + self.beta

    def backward(self, gy, train_affine: bool, counter: MacCounter | None = None) -> np.ndarray:
        if self._ctx is None:
            raise ContractViolation(f"{self.name}: backward without a preceding forward")
        training, xhat, inv_std = self._ctx
        if training != self.training:
            raise ContractViolation(f"{self.name}: mode changed between forward and backward")
        gy = linalg.as_matrix(gy, f"{self.name} gy")
        if gy.shape != xhat.shape:
            raise ShapeError(f"{self.name}: gy{gy.shape} vs forward {xhat.shape}")
        B, M = gy.shape
        macs = B * M
        if train_affine:
            self.ggamma[...] = (gy * xhat).sum(axis=0, dtype=np.float32)
            self.gbeta[...] = gy.sum(axis=0, dtype=np.float32)
            self._fresh = True
            macs += 2 * B * M
        gxhat = gy * self.gamma
        if training:
            gx = (inv_std / np.float32(B)) * (
                np.float32(B) * gxhat
                - gxhat.sum(axis=0, dtype=np.float32)
                - xhat * (gxhat * xhat).sum(axis=0, dtype=np.float32)
            )
        else:
            gx = gxhat * inv_std
        if counter is not None:
            counter.add(f"{self.name}.bwd", macs)
        return np.ascontiguousarray(gx, dtype=np.float32)

    def update(self, eta: float, counter: MacCounter | None = None) -> None:
        if not self._fresh:
            raise ContractViolation(f"{self.name}: update with stale gradients")
        label = f"{self.name}.upd"
        linalg.scaled_sub_inplace(self.gamma, self.ggamma, eta, label, counter)
        linalg.scaled_sub_inplace(self.beta, self.gbeta, eta, label, counter)
        self._fresh = False


class ReLU:
    def __init__(self, name: str = "Act"):
        self.name = name
        self.mask: np.ndarray | None = None

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        self.mask = x > 0
        return np.where(self.mask, x, np.float32(0.0))

    def backward(self, gy) -> np.ndarray:
        if self.mask is None:
            raise ContractViolation(f"{self.name}: backward without a preceding forward")
        # subgradient at exactly 0 is 0
        return np.where(self.mask, gy, np.float32(0.0)).astype(np.float32)


class SoftmaxCrossEntropy:
    """Batch-mean cross-entropy over softmax probabilities."""

    def __init__(self):
        self.p: np.ndarray | None = None
        self.labels: np.ndarray | None = None

    def forward(self, logits, labels) -> float:
        logits = linalg.as_matrix(logits, "logits")
        labels = np.asarray(labels, dtype=np.int64)
        B, C = logits.shape
        if labels.shape != (B,):
            raise ShapeError(f"labels shape {labels.shape} != ({B},)")
        if labels.min() < 0 or labels.max() >= C:
            raise ContractViolation(f"label out of range [0, {C})")
        if not np.isfinite(logits).all():
            raise ContractViolation("non-finite logits")
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        self.p = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
        self.labels = labels
        z64 = z.astype(np.float64)
        lse = np.log(np.exp(z64).sum(axis=1))
        return float(np.mean(lse - z64[np.arange(B), labels]))

    def backward(self) -> np.ndarray:
        if self.p is None:
            raise ContractViolation("cross-entropy backward without a preceding forward")
        B = self.p.shape[0]
        g = self.p.copy()
        g[np.arange(B), self.labels] -= np.float32(1.0)
        g /= np.float32(B)
        return g
