"""Named-array checkpoint container.

A checkpoint file is one UTF-8 JSON manifest line followed by raw
little-endian array payloads in manifest order. The manifest records each
array's name, shape, and dtype, plus an arbitrary metadata object
(config snapshot, frozen-backbone digest, step counter). The format is
language-neutral and streamable, mirroring the feature-file container.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, IncompatibleCheckpointError

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                metadata: dict | None = None) -> None:
    entries = []
    payloads = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.float32:
            dtype = "<f4"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise FormatError(f"unsupported array dtype {arr.dtype} for {name!r}")
        arr = arr.astype(_DTYPES[dtype])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payloads.append(arr.tobytes())
    manifest = {"arrays": entries, "metadata": metadata or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in payloads:
            fh.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
        if not isinstance(manifest, dict) or "arrays" not in manifest:
            raise FormatError(f"checkpoint manifest in {path} lacks an array table")
        arrays: dict[str, np.ndarray] = {}
        for entry in manifest["arrays"]:
            name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
            if dtype not in _DTYPES:
                raise FormatError(f"unsupported dtype {dtype!r} for array {name!r}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            blob = fh.read(count * _DTYPES[dtype].itemsize)
            if len(blob) != count * _DTYPES[dtype].itemsize:
                raise FormatError(f"truncated payload for array {name!r} in {path}")
            arrays[name] = np.frombuffer(blob, dtype=_DTYPES[dtype]).reshape(shape).copy()
    return arrays, manifest.get("metadata", {})


def state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def arrays_to_state(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                    strict: bool = True) -> None:
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    if strict and missing:
        raise IncompatibleCheckpointError(f"checkpoint missing parameters: {missing[:5]}")
    tensors = {}
    for name, current in state.items():
        if name not in arrays:
            continue
        arr = arrays[name]
        if tuple(arr.shape) != tuple(current.shape):
            raise IncompatibleCheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)}, "
                f"model {tuple(current.shape)}"
            )
        tensors[name] = torch.from_numpy(arr).to(current.dtype)
    module.load_state_dict({**state, **tensors})


def save_module(path: str | Path, module: torch.nn.Module,
                metadata: dict | None = None) -> None:
    save_arrays(path, state_to_arrays(module), metadata)


def load_module(path: str | Path, module: torch.nn.Module) -> dict:
    arrays, metadata = load_arrays(path)
    arrays_to_state(module, arrays)
    return metadata
