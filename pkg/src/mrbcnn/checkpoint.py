"""Binary checkpoint format.

Layout: ``b"MRBC"``, u32 version, u64 metadata length, UTF-8 JSON metadata,
then the tensor payloads (little-endian) concatenated in table order.  The
metadata holds the configuration snapshot, iteration, optimizer and policy
state, and a tensor table of ``name / shape / dtype / offset``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import ContractError, DecodeError
from .layers import ParamStore
from .network import init_params
from .rng import Stream
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"MRBC"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(DecodeError):
    """A checkpoint file is malformed or incompatible."""


@dataclass
class Checkpoint:
    config: TrainConfig
    iteration: int
    params: ParamStore
    lr: float
    state: dict = field(default_factory=dict)

    def metadata(self, storage: str) -> tuple[dict, list[tuple[str, np.ndarray]]]:
        tensors = []
        for name, t in self.params.params.items():
            tensors.append((f"param/{name}", t.data))
        for name in self.params.params:
            tensors.append((f"momentum/{name}", self.params.momentum[name]))
        dtype = _DTYPES[storage]
        table, offset = [], 0
        for name, arr in tensors:
            nbytes = int(arr.size) * np.dtype(dtype).itemsize
            table.append({"name": name, "shape": list(arr.shape), "dtype": storage, "offset": offset})
            offset += nbytes
        meta = {
            "format_version": VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.fingerprint(),
            "net_hash": self.config.net.fingerprint(),
            "iteration": int(self.iteration),
            "lr": float(self.lr),
            "state": self.state,
            "tensors": table,
        }
        return meta, tensors


def checkpoint_bytes(ckpt: Checkpoint, storage: str | None = None) -> bytes:
    storage = storage or ckpt.config.storage
    meta, tensors = ckpt.metadata(storage)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dtype = _DTYPES[storage]
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob]
    parts.extend(np.ascontiguousarray(arr, dtype=dtype).tobytes() for _, arr in tensors)
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path, storage: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt, storage))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw metadata plus every tensor in the table, upcast to float64."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    if len(buf) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (mlen,) = struct.unpack_from("<Q", buf, 8)
    if len(buf) < 16 + mlen:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(buf[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    base = 16 + mlen
    tensors: dict[str, np.ndarray] = {}
    for entry in meta["tensors"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        if start + n * dtype.itemsize > len(buf):
            raise CheckpointError(f"{path}: truncated, tensor {entry['name']!r} is missing")
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=start).astype(np.float64).reshape(shape)
        tensors[entry["name"]] = arr
    return meta, tensors


def load_checkpoint(
    path,
    config: TrainConfig | None = None,
    allow_head_reinit: bool = False,
    stream: Stream | None = None,
) -> Checkpoint:
    """Load and validate a checkpoint.

    When ``config`` is given its network must match the stored one.  With
    ``allow_head_reinit`` a mismatch is tolerated: every stored tensor whose
    name and shape fit the new network is loaded, the rest (typically the FC
    head) is freshly initialised and the optimizer state is reset.
    """
    meta, tensors = read_checkpoint(path)
    stored_cfg = TrainConfig.from_dict(meta["config"])
    target = config or stored_cfg
    shapes = target.net.param_shapes()
    fresh = init_params(target.net, stream or Stream(target.seed).split("init"))
    same_net = stored_cfg.net.fingerprint() == target.net.fingerprint()
    if not same_net and not allow_head_reinit:
        raise ContractError(
            f"{path}: network configuration differs from the checkpoint "
            f"({stored_cfg.net.fingerprint()} vs {target.net.fingerprint()}); use --allow-head-reinit to fine-tune"
        )
    store = ParamStore()
    reinit = []
    for name, shape in shapes.items():
        arr = tensors.get(f"param/{name}")
        if arr is not None and arr.shape == tuple(shape):
            store.params[name] = Tensor(arr, requires_grad=True, name=name)
            mom = tensors.get(f"momentum/{name}")
            store.momentum[name] = mom.copy() if (same_net and mom is not None) else np.zeros(shape)
        elif allow_head_reinit:
            store.params[name] = fresh[name]
            store.momentum[name] = np.zeros(shape)
            reinit.append(name)
        else:
            got = None if arr is None else arr.shape
            raise CheckpointError(f"{path}: tensor {name!r} has shape {got}, network needs {tuple(shape)}")
    if reinit:
        log.info("re-initialised %d tensors: %s", len(reinit), ", ".join(reinit))
    if same_net:
        return Checkpoint(target, meta["iteration"], store, meta["lr"], meta.get("state", {}))
    return Checkpoint(target, 0, store, target.lr0, {"reinitialised": reinit})
