"""Single-file checkpoint container.

Layout (version 1, little-endian):

    bytes 0..7    magic ``FQDRCKPT``
    bytes 8..11   u32 format version
    bytes 12..19  u64 header length in bytes
    header        UTF-8 JSON: {"metadata": {...},
                               "tensors": [{"name", "dtype", "shape",
                                            "offset", "nbytes"}, ...]}
    payload       concatenated row-major tensor bytes at the listed offsets

Writes are atomic (temp file + rename). Loading returns the raw arrays and
metadata; model-level helpers rebuild codec / trigger modules from the
metadata they stored.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

MAGIC = b"FQDRCKPT"
VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    path = Path(path)
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ConfigError(f"unsupported checkpoint dtype {dtype} for {name}")
        raw = arr.astype(_DTYPES[dtype]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps({"metadata": metadata, "tensors": entries}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode())
        payload = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).astype(entry["dtype"])
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, header["metadata"]


def _module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def _load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.array(arr)) for name, arr in arrays.items()}
    module.load_state_dict(state)


def save_codec(path, codec, seed: int | None = None, extra: dict | None = None) -> None:
    metadata = {
        "kind": "codec",
        "quality": codec.quality,
        "lambda": codec.lam,
        "base": codec.base,
        "latent_channels": codec.latent_channels,
        "hyper_channels": codec.hyper_channels,
        "architecture_hash": codec.architecture_hash(),
        "seed": seed,
    }
    if extra:
        metadata.update(extra)
    save_checkpoint(path, _module_arrays(codec), metadata)


def load_codec(path):
    from .codec import HyperpriorCodec

    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "codec":
        raise ConfigError(f"{path} does not hold a codec checkpoint")
    codec = HyperpriorCodec(
        quality=metadata["quality"],
        base=metadata["base"],
        latent_channels=metadata["latent_channels"],
        hyper_channels=metadata["hyper_channels"],
    )
    _load_module_arrays(codec, arrays)
    return codec, metadata


def save_trigger(path, trigger, seed: int | None = None, extra: dict | None = None) -> None:
    from .trigger import BaselineInjector, TriggerInjector

    if isinstance(trigger, TriggerInjector):
        metadata = {
            "kind": "trigger",
            "style": "frequency",
            "block_size": trigger.block_size,
            "band_size": trigger.band_size,
            "top_k": trigger.top_k,
            "epsilon": trigger.epsilon,
            "band_indices": [list(uv) for uv in trigger.band],
            "seed": seed,
        }
    elif isinstance(trigger, BaselineInjector):
        metadata = {
            "kind": "trigger",
            "style": "baseline",
            "epsilon": trigger.epsilon,
            "seed": seed,
        }
    else:
        raise ConfigError(f"cannot checkpoint trigger of type {type(trigger).__name__}")
    if extra:
        metadata.update(extra)
    save_checkpoint(path, _module_arrays(trigger), metadata)


def load_trigger(path):
    from .trigger import BaselineInjector, TriggerInjector

    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "trigger":
        raise ConfigError(f"{path} does not hold a trigger checkpoint")
    if metadata["style"] == "frequency":
        trigger = TriggerInjector(
            block_size=metadata["block_size"],
            band_size=metadata["band_size"],
            top_k=metadata["top_k"],
            epsilon=metadata["epsilon"],
        )
    else:
        trigger = BaselineInjector(epsilon=metadata["epsilon"])
    _load_module_arrays(trigger, arrays)
    return trigger, metadata
