"""The ``DDO1`` container used for checkpoints and datasets.

Layout: ``b"DDO1"``, a little-endian uint64 byte length, that many bytes of
UTF-8 JSON header, then every array as little-endian float64 in the order
listed in ``header["arrays"]``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .base import MODEL_KINDS, Model

MAGIC = b"DDO1"


class CheckpointError(ValueError):
    pass


def _dumps(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> Path:
    header = dict(header)
    header["arrays"] = [
        {"name": n, "shape": list(np.shape(a)), "dtype": "int" if np.issubdtype(np.asarray(a).dtype, np.integer) else "float"}
        for n, a in arrays
    ]
    raw = _dumps(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (n,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12:12 + n].decode("utf-8"))
    off = 12 + n
    arrays = {}
    for spec in header["arrays"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        a = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(spec["shape"])
        off += 8 * size
        arrays[spec["name"]] = a.astype(np.int64) if spec["dtype"] == "int" else a.astype(np.float64)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return header, arrays


def save_model(path, model: Model, seed: int | None = None, round_index: int = 0,
               extra: dict | None = None) -> Path:
    header = {"kind": model.kind, "config": model.config(), "seed": seed,
              "round": round_index, "param_order": list(model.params)}
    if extra:
        header["extra"] = extra
    return write_container(path, header, list(model.params.items()))


def load_model(path) -> tuple[Model, dict]:
    header, arrays = read_container(path)
    kind = header.get("kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{path}: not a model checkpoint (kind={kind!r})")
    model = MODEL_KINDS[kind].from_config(header["config"])
    if list(model.params) != header["param_order"]:
        raise CheckpointError(f"{path}: parameter layout mismatch")
    model.set_params(arrays)
    return model, header
