import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from safemerge.tensor_store import (
    Checkpoint,
    CheckpointFormatError,
    NonFiniteError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
    validate_compat,
)


def _raw_file(header: dict, data: bytes) -> bytes:
    blob = json.dumps(header).encode()
    return struct.pack("<Q", len(blob)) + blob + data


def test_single_tensor_round_trip(tmp_path):
    ckpt = Checkpoint({"w": np.array([1.0, 2.0], dtype=np.float32)})
    path = tmp_path / "w.safetensors"
    save_checkpoint(ckpt, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    assert len(raw) - 8 - hlen == 8
    loaded = load_checkpoint(path)
    assert loaded.names() == ["w"]
    assert loaded["w"].tolist() == [1.0, 2.0]
    assert loaded.equals(ckpt)


def test_empty_checkpoint_round_trip(tmp_path):
    path = tmp_path / "empty.safetensors"
    save_checkpoint(Checkpoint({}), path)
    loaded = load_checkpoint(path)
    assert len(loaded) == 0 and loaded.num_params == 0


def test_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"b": rng.standard_normal((3, 4)), "a": rng.standard_normal(5)}
    c1 = Checkpoint(tensors, {"k": "v"})
    c2 = Checkpoint(dict(reversed(list(tensors.items()))), {"k": "v"})
    save_checkpoint(c1, tmp_path / "1")
    save_checkpoint(c2, tmp_path / "2")
    h1 = hashlib.sha256((tmp_path / "1").read_bytes()).hexdigest()
    h2 = hashlib.sha256((tmp_path / "2").read_bytes()).hexdigest()
    assert h1 == h2


def test_layout_is_safetensors_compatible():
    ckpt = Checkpoint(
        {"b": np.zeros((2, 2), np.float32), "a": np.ones(3, np.float32)}, {"cfg": "x"}
    )
    raw = to_bytes(ckpt)
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen])
    assert header["__metadata__"] == {"cfg": "x"}
    assert header["a"] == {"dtype": "F32", "shape": [3], "data_offsets": [0, 12]}
    assert header["b"] == {"dtype": "F32", "shape": [2, 2], "data_offsets": [12, 28]}
    assert (8 + hlen) % 8 == 0


def test_scalar_tensor():
    ckpt = Checkpoint({"s": np.float32(3.5)})
    back = from_bytes(to_bytes(ckpt))
    assert back["s"].shape == () and float(back["s"]) == 3.5


def test_header_length_exceeding_file():
    raw = struct.pack("<Q", 10_000) + b"{}"
    with pytest.raises(CheckpointFormatError, match="exceeds file size"):
        from_bytes(raw)


def test_overlapping_offsets_rejected():
    data = np.arange(3, dtype="<f4").tobytes()
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    with pytest.raises(CheckpointFormatError, match="overlap"):
        from_bytes(_raw_file(header, data))


def test_out_of_bounds_offsets_rejected():
    header = {"a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}
    with pytest.raises(CheckpointFormatError):
        from_bytes(_raw_file(header, b"\0" * 8))


def test_non_f32_dtype_rejected():
    header = {"a": {"dtype": "F16", "shape": [2], "data_offsets": [0, 4]}}
    with pytest.raises(CheckpointFormatError, match="only F32"):
        from_bytes(_raw_file(header, b"\0" * 4))


def test_malformed_json_rejected():
    raw = struct.pack("<Q", 3) + b"{x}"
    with pytest.raises(CheckpointFormatError, match="malformed"):
        from_bytes(raw)


def test_nonfinite_rejected_unless_allowed(tmp_path):
    with pytest.raises(NonFiniteError):
        Checkpoint({"w": np.array([np.nan], np.float32)})
    ckpt = Checkpoint({"w": np.array([np.inf, 1.0], np.float32)}, allow_nonfinite=True)
    save_checkpoint(ckpt, tmp_path / "x")
    with pytest.raises(CheckpointFormatError, match="NaN or Inf"):
        load_checkpoint(tmp_path / "x")
    assert np.isinf(load_checkpoint(tmp_path / "x", allow_nonfinite=True)["w"][0])


def test_checkpoint_is_immutable():
    ckpt = Checkpoint({"w": np.zeros(2, np.float32)})
    with pytest.raises(ValueError):
        ckpt["w"][0] = 1.0


def test_validate_compat_cases():
    a = Checkpoint({"w": np.zeros(2, np.float32), "v": np.zeros(1, np.float32)})
    assert validate_compat(a, a).compatible
    b = Checkpoint({"v": np.zeros(1, np.float32)})
    report = validate_compat(a, b)
    assert not report.compatible and report.mismatches == [("w", "missing-in-b")]
    c = Checkpoint({"w": np.zeros(3, np.float32), "v": np.zeros(1, np.float32)})
    assert validate_compat(a, c).mismatches == [("w", "shape-mismatch")]
    assert validate_compat(b, a).mismatches == [("w", "missing-in-a")]


finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
tensor_maps = st.dictionaries(
    st.text(min_size=1, max_size=8),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=finite_f32),
    max_size=4,
)


@settings(max_examples=60, deadline=None)
@given(tensors=tensor_maps, meta=st.dictionaries(st.text(max_size=5), st.text(max_size=5), max_size=3))
def test_round_trip_property(tensors, meta):
    meta = {k: v for k, v in meta.items() if k != ""}
    ckpt = Checkpoint(tensors, meta)
    assert from_bytes(to_bytes(ckpt)).equals(ckpt)


@settings(max_examples=60, deadline=None)
@given(a=tensor_maps, b=tensor_maps)
def test_compat_verdict_symmetric(a, b):
    ca, cb = Checkpoint(a), Checkpoint(b)
    assert validate_compat(ca, cb).compatible == validate_compat(cb, ca).compatible
