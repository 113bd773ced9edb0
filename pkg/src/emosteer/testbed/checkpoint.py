"""Model checkpoints: config + flat little-endian float32 weight arrays.

Binary layout (any suffix other than ``.json``)::

    b"EMOCKPT1" | u64 header length | JSON header | f32 LE tensors in header order

The JSON variant stores the same header with each tensor inlined as a list.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from emosteer.errors import IntegrityError
from emosteer.testbed.model import ModelConfig, ToyTransformer
from emosteer.testbed.toy import ToyModel, TrainConfig

FORMAT_TAG = "emosteer-toy-checkpoint/1"
_MAGIC = b"EMOCKPT1"


def _header(model: ToyModel, meta: dict | None) -> dict:
    return {
        "meta": meta or {},
        "format": FORMAT_TAG,
        "config": model.config.to_dict(),
        "train_config": asdict(model.train_config) if model.train_config else None,
        "history": model.history,
        "tensors": [],
    }


def save_checkpoint(model: ToyModel, path: str | Path, meta: dict | None = None) -> None:
    path = Path(path)
    header = _header(model, meta)
    state = model.net.state_dict()
    arrays = []
    for name, tensor in state.items():
        arr = tensor.detach().numpy().astype("<f4")
        header["tensors"].append({"name": name, "shape": list(arr.shape)})
        arrays.append(arr)
    if path.suffix == ".json":
        for meta, arr in zip(header["tensors"], arrays):
            meta["values"] = [float(x) for x in arr.ravel()]
        path.write_text(json.dumps(header, sort_keys=True))
        return
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> ToyModel:
    path = Path(path)
    if path.suffix == ".json":
        header = json.loads(path.read_text())
        arrays = [np.asarray(t["values"], dtype=np.float32).reshape(t["shape"]) for t in header["tensors"]]
    else:
        data = path.read_bytes()
        if data[:8] != _MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + n])
        offset = 16 + n
        arrays = []
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            chunk = data[offset:offset + 4 * count]
            if len(chunk) != 4 * count:
                raise IntegrityError(f"{path}: truncated tensor {t['name']}")
            arrays.append(np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).copy())
            offset += 4 * count
    if header.get("format") != FORMAT_TAG:
        raise IntegrityError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    config = ModelConfig(**header["config"])
    net = ToyTransformer(config)
    expected = net.state_dict()
    state = {}
    for meta, arr in zip(header["tensors"], arrays):
        name = meta["name"]
        if name not in expected or tuple(expected[name].shape) != arr.shape:
            raise IntegrityError(f"{path}: tensor {name} shape {arr.shape} does not fit the model config")
        state[name] = torch.from_numpy(arr)
    missing = set(expected) - set(state)
    if missing:
        raise IntegrityError(f"{path}: missing tensors {sorted(missing)}")
    net.load_state_dict(state)
    net.eval()
    tc = TrainConfig(**header["train_config"]) if header.get("train_config") else None
    return ToyModel(net, config, tc, header.get("history") or {}, header.get("meta") or {})
