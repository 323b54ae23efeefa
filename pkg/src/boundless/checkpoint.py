"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic        8 bytes   b"BNDLCKP\\0"
    version      u32
    header_len   u64
    header       header_len bytes of UTF-8 JSON
    blob         concatenated raw tensor bytes

The JSON header holds ``step``, the configuration snapshot, the numpy RNG
state, free-form ``meta`` and a ``tensors`` index of
``{name, dtype, shape, offset, nbytes}`` entries pointing into the blob.
Tensor names are prefixed by their group (``generator/``, ``discriminator/``,
``opt_g/``, ``opt_d/``). Writes go to a temporary file that is renamed into
place.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"BNDLCKP\0"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclasses.dataclass
class Checkpoint:
    step: int
    config: dict
    generator: dict[str, torch.Tensor]
    discriminator: dict[str, torch.Tensor]
    opt_g: Optional[dict] = None
    opt_d: Optional[dict] = None
    rng_state: Optional[dict] = None
    meta: dict = dataclasses.field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _flatten_optimizer(prefix: str, state_dict: dict, tensors: dict) -> dict:
    """Move optimizer tensors into ``tensors``; return the JSON-able remainder."""
    out = {"param_groups": state_dict["param_groups"], "state": {}}
    for idx, slots in state_dict["state"].items():
        entry = {}
        for key, value in slots.items():
            if torch.is_tensor(value):
                name = f"{prefix}/{idx}/{key}"
                tensors[name] = value
                entry[key] = {"tensor": name}
            else:
                entry[key] = value
        out["state"][str(idx)] = entry
    return out


def _unflatten_optimizer(meta: dict, tensors: dict) -> dict:
    state = {}
    for idx, slots in meta["state"].items():
        state[int(idx)] = {
            key: tensors[val["tensor"]] if isinstance(val, dict) and "tensor" in val else val
            for key, val in slots.items()
        }
    return {"state": state, "param_groups": meta["param_groups"]}


def _json_default(obj: Any):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if hasattr(obj, "value"):  # enums
        return obj.value
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def save_checkpoint(path, ckpt: Checkpoint):
    tensors: dict[str, torch.Tensor] = {}
    for name, t in ckpt.generator.items():
        tensors[f"generator/{name}"] = t
    for name, t in ckpt.discriminator.items():
        tensors[f"discriminator/{name}"] = t
    header = {
        "step": ckpt.step,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "opt_g": _flatten_optimizer("opt_g", ckpt.opt_g, tensors) if ckpt.opt_g else None,
        "opt_d": _flatten_optimizer("opt_d", ckpt.opt_d, tensors) if ckpt.opt_d else None,
        "tensors": [],
    }
    chunks = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        header["tensors"].append({
            "name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
            "offset": offset, "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, default=_json_default, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", ckpt.format_version, len(head)) + head)
        for raw in chunks:
            fh.write(raw)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, head_len = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = 8 + 12
    header = json.loads(data[start:start + head_len].decode("utf-8"))
    blob = memoryview(data)[start + head_len:]
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(blob, dtype=entry["dtype"], count=entry["nbytes"] // np.dtype(entry["dtype"]).itemsize,
                            offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[entry["dtype"]])

    def group(prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}

    return Checkpoint(
        step=header["step"],
        config=header["config"],
        generator=group("generator"),
        discriminator=group("discriminator"),
        opt_g=_unflatten_optimizer(header["opt_g"], tensors) if header["opt_g"] else None,
        opt_d=_unflatten_optimizer(header["opt_d"], tensors) if header["opt_d"] else None,
        rng_state=header["rng_state"],
        meta=header["meta"],
        format_version=version,
    )
