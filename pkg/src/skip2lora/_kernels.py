"""Hot matrix kernels in two interchangeable flavours.

Every kernel accumulates in float32 with the inner (reduction) index
ascending, so the numba and numpy versions give bit-identical results.
Rows of the output depend only on the matching rows of the left operand,
which the activation cache relies on.

Set ``SKIP2LORA_KERNELS=numpy`` to force the pure-numpy path; the default
is ``numba`` when it imports cleanly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------- numpy path

def _np_matmul(a, b, out):
    out[...] = 0
    tmp = np.empty_like(out)
    for q in range(a.shape[1]):
        np.multiply(a[:, q : q + 1], b[q : q + 1, :], out=tmp)
        out += tmp


def _np_matmul_at(a, b, out):
    out[...] = 0
    tmp = np.empty_like(out)
    for q in range(a.shape[0]):
        np.multiply(a[q, :, None], b[q, None, :], out=tmp)
        out += tmp


def _np_matmul_bt(a, b, out):
    out[...] = 0
    tmp = np.empty_like(out)
    for q in range(a.shape[1]):
        np.multiply(a[:, q, None], b[None, :, q], out=tmp)
        out += tmp


def _np_col_sum(a, out):
    out[...] = 0
    for r in range(a.shape[0]):
        out += a[r]


def _np_add_inplace(dst, src):
    dst += src


def _np_scaled_sub_inplace(dst, g, eta):
    dst -= eta * g


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_matmul(a, b, out):
        P, Q = a.shape
        S = b.shape[1]
        for p in range(P):
            for s in range(S):
                out[p, s] = 0.0
            for q in range(Q):
                apq = a[p, q]
                for s in range(S):
                    out[p, s] += apq * b[q, s]

    @njit(cache=True)
    def _nb_matmul_at(a, b, out):
        Q, P = a.shape
        S = b.shape[1]
        for p in range(P):
            for s in range(S):
                out[p, s] = 0.0
        for q in range(Q):
            for p in range(P):
                aqp = a[q, p]
                for s in range(S):
                    out[p, s] += aqp * b[q, s]

    @njit(cache=True)
    def _nb_matmul_bt(a, b, out):
        P, Q = a.shape
        S = b.shape[0]
        for p in range(P):
            for s in range(S):
                acc = np.float32(0.0)
                for q in range(Q):
                    acc += a[p, q] * b[s, q]
                out[p, s] = acc

    @njit(cache=True)
    def _nb_col_sum(a, out):
        R, M = a.shape
        for m in range(M):
            out[m] = 0.0
        for r in range(R):
            for m in range(M):
                out[m] += a[r, m]

    @njit(cache=True)
    def _nb_add_inplace(dst, src):
        R, C = dst.shape
        for i in range(R):
            for j in range(C):
                dst[i, j] += src[i, j]

    @njit(cache=True)
    def _nb_scaled_sub_inplace(dst, g, eta):
        flat_d = dst.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_d.shape[0]):
            flat_d[i] -= eta * flat_g[i]


NUMPY = SimpleNamespace(
    name="numpy",
    matmul=_np_matmul,
    matmul_at=_np_matmul_at,
    matmul_bt=_np_matmul_bt,
    col_sum=_np_col_sum,
    add_inplace=_np_add_inplace,
    scaled_sub_inplace=_np_scaled_sub_inplace,
)

if HAVE_NUMBA:
    NUMBA = SimpleNamespace(
        name="numba",
        matmul=_nb_matmul,
        matmul_at=_nb_matmul_at,
        matmul_bt=_nb_matmul_bt,
        col_sum=_nb_col_sum,
        add_inplace=_nb_add_inplace,
        scaled_sub_inplace=_nb_scaled_sub_inplace,
    )
else:  # pragma: no cover
    NUMBA = None

BACKENDS = {"numpy": NUMPY}
if NUMBA is not None:
    BACKENDS["numba"] = NUMBA


def default_backend_name() -> str:
    requested = os.environ.get("SKIP2LORA_KERNELS", "").strip().lower()
    if requested in ("numpy", "python", "off", "0"):
        return "numpy"
    if requested not in ("", "numba", "jit", "1"):
        raise ValueError(f"SKIP2LORA_KERNELS={requested!r}: expected 'numba' or 'numpy'")
    return "numba" if HAVE_NUMBA else "numpy"
