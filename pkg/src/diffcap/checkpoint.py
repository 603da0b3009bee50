"""Binary checkpoints: 8-byte magic, u64 header length, JSON header, raw arrays.

Arrays follow the header in declared order as little-endian floats of the
width named in the header (``float32`` or ``float64``). Offsets in the
array directory are relative to the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

MAGIC = b"DIFFCAP\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, nx.Tensor]
    vocab: list[str]
    step: int = 0
    epoch: int = 0
    optimizer: nx.AdamWState | None = None
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    dtype = np.dtype(ckpt.dtype).newbyteorder("<")
    arrays: list[tuple[str, np.ndarray]] = [(k, v.data) for k, v in ckpt.params.items()]
    opt = None
    if ckpt.optimizer is not None:
        st = ckpt.optimizer
        opt = {
            "lr": st.lr,
            "betas": list(st.betas),
            "eps": st.eps,
            "weight_decay": st.weight_decay,
            "step": st.step,
        }
        arrays += [(f"adam.m/{k}", v) for k, v in st.m.items()]
        arrays += [(f"adam.v/{k}", v) for k, v in st.v.items()]

    directory = []
    offset = 0
    for name, arr in arrays:
        nbytes = arr.size * dtype.itemsize
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "version": FORMAT_VERSION,
        "dtype": dtype.name,
        "config": ckpt.config,
        "vocab": list(ckpt.vocab),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "optimizer": opt,
        "extra": ckpt.extra,
        "arrays": directory,
        "data_bytes": offset,
    }
    hb = _header_bytes(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
    if header.get("dtype") not in ("float32", "float64"):
        raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    data = raw[16 + hlen :]
    if len(data) != header["data_bytes"]:
        raise CheckpointError(f"{path}: expected {header['data_bytes']} data bytes, found {len(data)}")

    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry["offset"] != expected or entry["offset"] + nbytes > len(data):
            raise CheckpointError(f"{path}: bad offset for array {entry['name']!r}")
        expected += nbytes
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    if expected != len(data):
        raise CheckpointError(f"{path}: array directory does not cover the data section")

    params = {k: nx.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items() if not k.startswith("adam.")}
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = nx.AdamWState(
            lr=o["lr"],
            betas=tuple(o["betas"]),
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            step=o["step"],
            m={k[len("adam.m/") :]: v for k, v in arrays.items() if k.startswith("adam.m/")},
            v={k[len("adam.v/") :]: v for k, v in arrays.items() if k.startswith("adam.v/")},
        )
    return Checkpoint(
        config=header["config"],
        params=params,
        vocab=header["vocab"],
        step=header["step"],
        epoch=header["epoch"],
        optimizer=opt,
        extra=header.get("extra", {}),
    )


def check_shapes(params: dict[str, nx.Tensor], reference: dict[str, nx.Tensor]) -> None:
    """Raise unless ``params`` has exactly the names and shapes of ``reference``."""
    if set(params) != set(reference):
        missing = sorted(set(reference) - set(params))
        unexpected = sorted(set(params) - set(reference))
        raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {unexpected})")
    for k, v in reference.items():
        if params[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k!r}: {params[k].shape} vs {v.shape}")
