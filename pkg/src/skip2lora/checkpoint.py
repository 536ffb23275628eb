"""SKL2 binary checkpoints.

Layout (little-endian)::

    magic   b"SKL2"
    version u32            (currently 1)
    mode    u8             (FineTuneMode.id)
    n       u16            (number of FC layers)
    dims    u32[n + 1]
    rank    u32
    tensors f32, row-major, in Model.tensors() order:
            per layer k: W, b, and for k < n gamma, beta, running_mean, running_var
            then per adapter: W_A, W_B

The final layer carries no BN tensors because it has no BN.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ContractViolation
from .network import FineTuneMode, Model, ModelSpec, adapter_wiring

MAGIC = b"SKL2"
VERSION = 1
_HEAD = struct.Struct("<4sIBH")


class CheckpointError(ContractViolation):
    pass


def header_size(n: int) -> int:
    return _HEAD.size + 4 * (n + 1) + 4


def expected_size(dims, rank: int, mode) -> int:
    """Byte length of a checkpoint for the given shape, from the layout alone."""
    dims = list(dims)
    n = len(dims) - 1
    floats = 0
    for k in range(1, n + 1):
        floats += dims[k - 1] * dims[k] + dims[k]
        if k < n:
            floats += 4 * dims[k]
    for src, dst in adapter_wiring(FineTuneMode.parse(mode), n):
        floats += dims[src - 1] * rank + rank * dims[dst]
    return header_size(n) + 4 * floats


def to_bytes(model: Model) -> bytes:
    dims = model.dims
    n = model.n
    parts = [
        _HEAD.pack(MAGIC, VERSION, model.mode.id, n),
        struct.pack(f"<{n + 1}I", *dims),
        struct.pack("<I", model.spec.rank),
    ]
    for t in model.tensors().values():
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Model:
    if len(buf) < _HEAD.size:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, mode_id, n = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        mode = FineTuneMode.from_id(mode_id)
    except ValueError as e:
        raise CheckpointError(str(e)) from None
    off = _HEAD.size
    if len(buf) < header_size(n):
        raise CheckpointError("checkpoint truncated in header")
    dims = struct.unpack_from(f"<{n + 1}I", buf, off)
    off += 4 * (n + 1)
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) != expected_size(dims, rank, mode):
        raise CheckpointError(
            f"checkpoint is {len(buf)} bytes, layout implies {expected_size(dims, rank, mode)}")
    model = Model(ModelSpec(dims, rank=rank, mode=mode))
    for name, t in model.tensors().items():
        nbytes = t.size * 4
        t[...] = np.frombuffer(buf, dtype="<f4", count=t.size, offset=off).reshape(t.shape)
        off += nbytes
    return model


def save(model: Model, path) -> None:
    """Write atomically: a failed write never leaves a partial file at ``path``."""
    data = to_bytes(model)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".skl2-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Model:
    with open(path, "rb") as f:
        return from_bytes(f.read())
