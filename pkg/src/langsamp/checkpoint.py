"""``LSMP0001`` tensor container.

Layout::

    8 bytes   magic b"LSMP0001"
    8 bytes   header length N, uint64 little-endian
    N bytes   UTF-8 JSON header (sorted keys, compact separators)
    payload   raw little-endian tensor bytes, offsets relative to payload start

The header lists every tensor's name, shape, dtype, offset, byte count and
CRC32, plus the model config, step, RNG state and free-form metadata.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig
from .numerics import AdamWState

MAGIC = b"LSMP0001"
_LEN = struct.Struct("<Q")
_DTYPES = {"<f4": np.float32, "<f8": np.float64}
_OPT_M = "optim.m."
_OPT_V = "optim.v."


class CheckpointError(ValueError):
    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message if tensor is None else f"tensor {tensor!r}: {message}")
        self.tensor = tensor


@dataclass
class CheckpointManifest:
    config: ModelConfig
    step: int = 0
    rng_state: dict | None = None
    optimizer: AdamWState | None = None
    meta: dict = field(default_factory=dict)
    # filled on load
    path: str | None = None
    tensors: list[dict] = field(default_factory=list)


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps_checkpoint(params: Mapping[str, np.ndarray], manifest: CheckpointManifest) -> bytes:
    named: list[tuple[str, np.ndarray]] = list(params.items())
    opt_header = None
    if manifest.optimizer is not None:
        opt = manifest.optimizer
        named += [(_OPT_M + k, opt.m[k]) for k in params if k in opt.m]
        named += [(_OPT_V + k, opt.v[k]) for k in params if k in opt.v]
        opt_header = {"step": opt.step, **opt.hyper()}

    entries, chunks, offset = [], [], 0
    for name, arr in named:
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(tag)).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": tag,
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    header = {
        "format": MAGIC.decode(),
        "config": manifest.config.to_dict(),
        "step": manifest.step,
        "rng_state": manifest.rng_state,
        "optimizer": opt_header,
        "meta": manifest.meta,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(blob)) + blob + b"".join(chunks)


def save_checkpoint(params: Mapping[str, np.ndarray], manifest: CheckpointManifest, path) -> Path:
    path = Path(path)
    data = dumps_checkpoint(params, manifest)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_header(path) -> tuple[dict, int]:
    """Parsed header and the payload start offset."""
    data = Path(path).read_bytes()
    header, start = _parse_header(data)
    return header, start


def _parse_header(data: bytes) -> tuple[dict, int]:
    if len(data) < len(MAGIC) + _LEN.size or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an LSMP0001 container")
    (n,) = _LEN.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _LEN.size + n
    if start > len(data):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[len(MAGIC) + _LEN.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("format") != MAGIC.decode() or "tensors" not in header:
        raise CheckpointError("header is missing format or tensor table")
    return header, start


def loads_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], CheckpointManifest]:
    header, start = _parse_header(data)
    payload = memoryview(data)[start:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unknown dtype {entry['dtype']!r}", name)
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        off, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != expected:
            raise CheckpointError(f"byte count {nbytes} inconsistent with shape {list(shape)}", name)
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointError("payload truncated or offset out of bounds", name)
        raw = bytes(payload[off : off + nbytes])
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError("CRC32 mismatch (corrupted payload)", name)
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).astype(dtype).reshape(shape)

    params = {k: v for k, v in arrays.items() if not k.startswith(("optim.",))}
    optimizer = None
    if header.get("optimizer") is not None:
        opt = dict(header["optimizer"])
        step = opt.pop("step")
        m = {k[len(_OPT_M):]: v for k, v in arrays.items() if k.startswith(_OPT_M)}
        v = {k[len(_OPT_V):]: a for k, a in arrays.items() if k.startswith(_OPT_V)}
        optimizer = AdamWState(step=step, m=m, v=v, **opt)
    manifest = CheckpointManifest(
        config=ModelConfig.from_dict(header["config"]),
        step=header["step"],
        rng_state=header.get("rng_state"),
        optimizer=optimizer,
        meta=header.get("meta") or {},
        tensors=header["tensors"],
    )
    return params, manifest


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], CheckpointManifest]:
    params, manifest = loads_checkpoint(Path(path).read_bytes())
    manifest.path = str(path)
    return params, manifest


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step}.lsmp"
