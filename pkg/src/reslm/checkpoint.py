"""Versioned checkpoint container for model parameters.

Layout::

    RLMCKPT 1
    kind <asr|lm|residual>
    meta <json: architecture>
    hyper <json: training hyperparameters>
    tensors <n>
    <name> <ndim> <d1> ... <dn>
    <prod(d) little-endian float64 values>
    ...
    end
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .models import AsrModel, NeuralLm, ResidualNet
from .numerics import Tensor

MAGIC = b"RLMCKPT"
VERSION = 1
KINDS = {"asr": AsrModel, "lm": NeuralLm, "residual": ResidualNet}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path: Union[str, Path], model, hyper: Optional[dict] = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + f" {VERSION}\n".encode())
    buf.write(f"kind {model.kind}\n".encode())
    buf.write(f"meta {_dumps(model.meta())}\n".encode())
    buf.write(f"hyper {_dumps(hyper or {})}\n".encode())
    names = sorted(model.params)
    buf.write(f"tensors {len(names)}\n".encode())
    for name in names:
        arr = model.params[name].data
        dims = " ".join(str(d) for d in arr.shape)
        buf.write(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(b"end\n")
    Path(path).write_bytes(buf.getvalue())


def _line(f) -> str:
    raw = f.readline()
    if not raw.endswith(b"\n"):
        raise CheckpointError("truncated checkpoint")
    return raw[:-1].decode("utf-8")


def read_checkpoint(path: Union[str, Path]):
    """Returns ``(kind, meta, hyper, tensors)`` with tensors as float64 arrays."""
    with open(path, "rb") as f:
        head = _line(f).split()
        if len(head) != 2 or head[0].encode() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if head[1] != str(VERSION):
            raise CheckpointVersionError(f"{path}: checkpoint version {head[1]}, expected {VERSION}")
        kind = _line(f).partition(" ")[2]
        meta = json.loads(_line(f).partition(" ")[2])
        hyper = json.loads(_line(f).partition(" ")[2])
        n = int(_line(f).split()[1])
        tensors = {}
        for _ in range(n):
            parts = _line(f).split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2 : 2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            data = f.read(8 * count)
            if len(data) != 8 * count:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
        if _line(f) != "end":
            raise CheckpointError(f"{path}: missing end marker")
    return kind, meta, hyper, tensors


def load_checkpoint(path: Union[str, Path], expect_kind: Optional[str] = None):
    kind, meta, hyper, tensors = read_checkpoint(path)
    if kind not in KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    cls = KINDS[kind]
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
    model = cls(**meta, params=params)
    return model, hyper
