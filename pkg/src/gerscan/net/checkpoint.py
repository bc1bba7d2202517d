"""Single-file model checkpoints.

Layout: 5-byte magic b"GSEG1", a little-endian uint32 header length, a UTF-8
JSON header, then each parameter's raw bytes (C order, little-endian) in
header order. The header records the model config and every array's name,
shape, and dtype, so a checkpoint is self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import SegConfig, SegModel

MAGIC = b"GSEG1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_model(model: SegModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    for name in model._names:
        arr = np.ascontiguousarray(model.params[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"version": FORMAT_VERSION, "config": model.config.to_dict(), "params": entries},
        sort_keys=True,
    ).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_model(path: str | Path) -> SegModel:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a model checkpoint (bad magic {magic!r})")
        lenbytes = fh.read(4)
        if len(lenbytes) != 4:
            raise CheckpointError(f"checkpoint truncated in {path}")
        (hlen,) = struct.unpack("<I", lenbytes)
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
        model = SegModel(SegConfig.from_dict(header["config"]))
        seen = []
        for entry in header["params"]:
            name = entry["name"]
            shape = tuple(int(v) for v in entry["shape"])
            dtype = np.dtype(entry["dtype"])
            if name not in model.params:
                raise CheckpointError(f"checkpoint has unknown parameter {name!r}")
            if model.params[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name!r} shape {shape} does not match config "
                    f"{model.params[name].shape}"
                )
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"checkpoint truncated while reading {name!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
            model.params[name] = arr.astype(model.dtype)
            seen.append(name)
        if set(seen) != set(model.params):
            missing = sorted(set(model.params) - set(seen))
            raise CheckpointError(f"checkpoint missing parameters: {missing}")
    return model
