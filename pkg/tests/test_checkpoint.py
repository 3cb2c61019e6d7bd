"""Checkpoint container round-trip and compatibility tests."""

import numpy as np
import pytest
import torch

from alarm.checkpoint import (
    arrays_to_state,
    load_arrays,
    load_module,
    save_arrays,
    save_module,
    state_to_arrays,
)
from alarm.errors import FormatError, IncompatibleCheckpointError
from alarm.frontend import DTYPE


def test_array_round_trip(tmp_path):
    path = tmp_path / "arrays.ckpt"
    arrays = {
        "w": np.arange(12, dtype=np.float64).reshape(3, 4),
        "b": np.array([1.5, -2.5], dtype=np.float32),
        "step": np.array(7, dtype=np.int64),
    }
    save_arrays(path, arrays, metadata={"kind": "test", "step": 7})
    loaded, metadata = load_arrays(path)
    assert metadata == {"kind": "test", "step": 7}
    assert set(loaded) == {"w", "b", "step"}
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        np.testing.assert_array_equal(loaded[name], arrays[name])


def test_module_round_trip_bit_exact(tmp_path):
    torch.manual_seed(0)
    module = torch.nn.Sequential(
        torch.nn.Linear(4, 8, dtype=DTYPE), torch.nn.LayerNorm(8, dtype=DTYPE)
    )
    path = tmp_path / "module.ckpt"
    save_module(path, module, metadata={"step": 3})
    clone = torch.nn.Sequential(
        torch.nn.Linear(4, 8, dtype=DTYPE), torch.nn.LayerNorm(8, dtype=DTYPE)
    )
    metadata = load_module(path, clone)
    assert metadata["step"] == 3
    for a, b in zip(module.state_dict().values(), clone.state_dict().values()):
        assert torch.equal(a, b)


def test_missing_parameter_raises(tmp_path):
    module = torch.nn.Linear(4, 4, dtype=DTYPE)
    arrays = state_to_arrays(module)
    del arrays["bias"]
    path = tmp_path / "partial.ckpt"
    save_arrays(path, arrays)
    loaded, _ = load_arrays(path)
    with pytest.raises(IncompatibleCheckpointError):
        arrays_to_state(torch.nn.Linear(4, 4, dtype=DTYPE), loaded)


def test_shape_mismatch_raises(tmp_path):
    module = torch.nn.Linear(4, 4, dtype=DTYPE)
    path = tmp_path / "shape.ckpt"
    save_module(path, module)
    loaded, _ = load_arrays(path)
    with pytest.raises(IncompatibleCheckpointError):
        arrays_to_state(torch.nn.Linear(4, 5, dtype=DTYPE), loaded)


def test_truncated_payload_raises(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_arrays(path, {"w": np.ones((4, 4), dtype=np.float64)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(FormatError):
        load_arrays(path)


def test_garbage_header_raises(tmp_path):
    path = tmp_path / "garbage.ckpt"
    path.write_bytes(b"\xff\xfe not json\n1234")
    with pytest.raises(FormatError):
        load_arrays(path)


def test_unsupported_dtype_raises(tmp_path):
    with pytest.raises(FormatError):
        save_arrays(tmp_path / "bad.ckpt", {"w": np.ones(3, dtype=np.complex128)})
