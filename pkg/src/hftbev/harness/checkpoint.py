"""Single-file checkpoint format.

    b"HFTC" | version:u16 | header_len:u32 | header (UTF-8 JSON) | records

Each record is::

    name_len:u16 | name | dtype:u8 | ndim:u8 | shape:u32*ndim | nbytes:u64 | raw bytes

All integers and tensor payloads are little-endian. The JSON header holds the
run config snapshot, counters, class names and optimizer hyperparameters.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"HFTC"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u1"),
    4: np.dtype("<i4"), 5: np.dtype("<f2"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.header["config"]


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)  # ascontiguousarray would promote 0-d arrays to 1-d
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = arr.astype(dt, copy=False).tobytes(order="C")
    nb = name.encode()
    return b"".join([
        struct.pack("<H", len(nb)), nb,
        struct.pack("<BB", _CODES[dt], arr.ndim),
        struct.pack(f"<{arr.ndim}I", *arr.shape),
        struct.pack("<Q", len(raw)), raw,
    ])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(ckpt.header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(header)))
    buf.write(header)
    for name in sorted(ckpt.tensors):
        buf.write(_pack_tensor(name, ckpt.tensors[name]))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    tensors = {}
    try:
        while off < len(data):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
            arr = np.frombuffer(data, dtype=_DTYPES[code], count=nbytes // _DTYPES[code].itemsize, offset=off)
            tensors[name] = arr.reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, ValueError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint {path}: {e}") from e
    return Checkpoint(header, tensors)


def state_to_arrays(model: torch.nn.Module, optimizer=None) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for i, st in optimizer.state_dict()["state"].items():
            for k, v in st.items():
                out[f"optim/{i}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    out["rng/torch"] = torch.get_rng_state().numpy()
    return out


def load_model_arrays(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    sd = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("param/")}
    missing = set(model.state_dict()) - set(sd)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
    model.load_state_dict(sd)


def load_optimizer_arrays(optimizer, tensors: dict[str, np.ndarray]) -> None:
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    for k, v in tensors.items():
        if not k.startswith("optim/"):
            continue
        _, i, name = k.split("/", 2)
        t = torch.from_numpy(v.copy())
        state.setdefault(int(i), {})[name] = t
    sd["state"] = state
    optimizer.load_state_dict(sd)
