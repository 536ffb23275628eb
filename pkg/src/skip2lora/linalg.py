"""Dense float32 matrix kernels with multiply-accumulate accounting.

Matrices are C-contiguous 2-D ``float32`` numpy arrays and vectors are 1-D
``float32`` arrays.  The arithmetic itself runs in :mod:`._kernels`; this
module validates shapes, allocates outputs and charges a :class:`MacCounter`.
"""
from __future__ import annotations

import math
from collections import defaultdict
from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import ContractViolation, ShapeError

_backend = _kernels.BACKENDS[_kernels.default_backend_name()]


def backend() -> str:
    """Name of the active kernel backend (``"numba"`` or ``"numpy"``)."""
    return _backend.name


def set_backend(name: str) -> None:
    global _backend
    try:
        _backend = _kernels.BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(_kernels.BACKENDS)}") from None


@contextmanager
def use_backend(name: str):
    prev = _backend.name
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


class MacCounter:
    """Exact per-label tallies of scalar multiply-accumulates.

    Labels follow ``"<unit>.<pass>"``, e.g. ``"FC1.fwd"`` or ``"LoRA3.bwd"``.
    """

    def __init__(self):
        self._counts: dict[str, int] = defaultdict(int)

    def add(self, label: str, n: int) -> None:
        if n < 0:
            raise ContractViolation("MAC counts cannot decrease")
        self._counts[label] += int(n)

    def __getitem__(self, label: str) -> int:
        return self._counts.get(label, 0)

    def reset(self) -> None:
        self._counts.clear()

    def snapshot(self) -> dict[str, int]:
        return dict(self._counts)

    def total(self, predicate=None) -> int:
        if predicate is None:
            return sum(self._counts.values())
        return sum(v for k, v in self._counts.items() if predicate(k))

    def __repr__(self):
        return f"MacCounter({dict(sorted(self._counts.items()))})"


def _charge(counter: MacCounter | None, label: str | None, n: int) -> None:
    if counter is not None and label is not None:
        counter.add(label, n)


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float32 matrix with both dims >= 1."""
    m = np.ascontiguousarray(x, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have rows >= 1 and cols >= 1, got {m.shape}")
    return m


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float32)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def matmul(a, b, label: str | None = None, counter: MacCounter | None = None) -> np.ndarray:
    """Return ``a @ b``; charges P*Q*S MACs to ``label``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: a{a.shape} @ b{b.shape}: a.cols != b.rows")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float32)
    _backend.matmul(a, b, out)
    _charge(counter, label, a.shape[0] * a.shape[1] * b.shape[1])
    return out


def matmul_at(a, b, label: str | None = None, counter: MacCounter | None = None) -> np.ndarray:
    """Return ``a.T @ b`` without materialising the transpose."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_at: a{a.shape}^T @ b{b.shape}: a.rows != b.rows")
    out = np.empty((a.shape[1], b.shape[1]), dtype=np.float32)
    _backend.matmul_at(a, b, out)
    _charge(counter, label, a.shape[0] * a.shape[1] * b.shape[1])
    return out


def matmul_bt(a, b, label: str | None = None, counter: MacCounter | None = None) -> np.ndarray:
    """Return ``a @ b.T`` without materialising the transpose."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_bt: a{a.shape} @ b{b.shape}^T: a.cols != b.cols")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float32)
    _backend.matmul_bt(a, b, out)
    _charge(counter, label, a.shape[0] * a.shape[1] * b.shape[0])
    return out


def col_sum(a, label: str | None = None, counter: MacCounter | None = None) -> np.ndarray:
    """Column sums of ``a`` accumulated top to bottom."""
    a = as_matrix(a, "a")
    out = np.empty(a.shape[1], dtype=np.float32)
    _backend.col_sum(a, out)
    _charge(counter, label, a.size)
    return out


def add_inplace(dst: np.ndarray, src, label: str | None = None, counter: MacCounter | None = None) -> None:
    src = np.asarray(src, dtype=np.float32)
    if dst.shape != src.shape:
        raise ShapeError(f"add_inplace: dst{dst.shape} vs src{src.shape}")
    if dst.dtype != np.float32:
        raise ContractViolation("add_inplace: dst must be float32")
    if dst.ndim == 2 and dst.flags.c_contiguous:
        _backend.add_inplace(dst, np.ascontiguousarray(src))
    else:
        dst += src
    _charge(counter, label, dst.size)


def scaled_sub_inplace(dst: np.ndarray, g, eta: float, label: str | None = None,
                       counter: MacCounter | None = None) -> None:
    """``dst -= eta * g`` in float32."""
    g = np.ascontiguousarray(g, dtype=np.float32)
    if dst.shape != g.shape:
        raise ShapeError(f"scaled_sub_inplace: dst{dst.shape} vs g{g.shape}")
    if not math.isfinite(eta):
        raise ContractViolation(f"scaled_sub_inplace: eta must be finite, got {eta}")
    if dst.dtype != np.float32 or not dst.flags.c_contiguous:
        raise ContractViolation("scaled_sub_inplace: dst must be C-contiguous float32")
    _backend.scaled_sub_inplace(dst, g, np.float32(eta))
    _charge(counter, label, dst.size)
