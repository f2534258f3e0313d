"""Checkpoint files.

Layout::

    8 bytes    little-endian uint64: header length H
    H bytes    UTF-8 JSON header {format_version, config, parameters: [...]}
    payload    little-endian float32 values, one run per parameter

Each manifest entry is ``{"name", "shape", "offset", "nbytes"}`` with offsets
relative to the start of the payload, in parameter order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .layers import CubeMLPConfig, ParamStore, param_shapes

FORMAT_VERSION = 1
_F32LE = np.dtype("<f4")


def save_checkpoint(path, cfg: CubeMLPConfig, params: ParamStore, extra: dict | None = None) -> None:
    manifest = []
    payloads = []
    offset = 0
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype=_F32LE).tobytes()
        manifest.append(
            {"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(data)}
        )
        payloads.append(data)
        offset += len(data)
    header = {"format_version": FORMAT_VERSION, "config": cfg.to_dict(), "parameters": manifest}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for data in payloads:
            fh.write(data)


def read_header(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}", path=str(path))
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path, dtype=np.float32) -> tuple[CubeMLPConfig, ParamStore]:
    """Read a checkpoint, validating every parameter shape against its config."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}", path=str(path))
    blob = path.read_bytes()
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {header.get('format_version')!r}")
    cfg = CubeMLPConfig.from_dict(header["config"])
    expected = param_shapes(cfg)
    entries = header["parameters"]
    names = [e["name"] for e in entries]
    if names != list(expected):
        raise ShapeError(f"checkpoint parameters {names} do not match config {list(expected)}")
    payload = memoryview(blob)[8 + n :]
    store = ParamStore(dtype)
    for e in entries:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise ShapeError(f"{e['name']}: stored shape {shape} != config shape {expected[e['name']]}")
        count = int(np.prod(shape, dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(payload):
            raise ShapeError(f"{e['name']}: payload size mismatch")
        values = np.frombuffer(payload, dtype=_F32LE, count=count, offset=e["offset"])
        store.add(e["name"], values.reshape(shape))
    return cfg, store
