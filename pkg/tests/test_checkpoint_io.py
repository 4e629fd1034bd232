import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from safetensors.numpy import load_file, save_file

from pcbmerge.checkpoint_io import (
    Checkpoint,
    Tensor,
    bf16_to_f32,
    f32_to_bf16,
    from_f64,
    load_checkpoint,
    save_checkpoint,
    validate_compatibility,
)
from pcbmerge.errors import (
    DtypeMismatch,
    IoFailure,
    MalformedHeader,
    MissingTensor,
    OverlappingOffsets,
    ShapeMismatch,
    UnsupportedDtype,
)


def write_raw(path, header, payload=b"", header_len=None):
    raw = json.dumps(header).encode()
    n = len(raw) if header_len is None else header_len
    path.write_bytes(struct.pack("<Q", n) + raw + payload)
    return path


def test_roundtrip_mixed_dtypes(tmp_path, rng):
    arrays = {
        "b.f32": rng.standard_normal((3, 5)).astype(np.float32),
        "a.f16": rng.standard_normal(7).astype(np.float16),
        "c.f64": rng.standard_normal((2, 2)),
        "d.i64": np.arange(4, dtype=np.int64),
        "e.bool": np.array([True, False, True]),
        "scalar": np.array(3.5, dtype=np.float32),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }
    ck = Checkpoint.from_arrays(arrays, metadata={"format": "np"})
    save_checkpoint(ck, tmp_path / "m.st")
    back = load_checkpoint(tmp_path / "m.st")
    assert back.metadata == {"format": "np"}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k].to_numpy(), v)
    assert back.equals(ck)


def test_readable_by_reference_library(tmp_path, rng):
    arrays = {"w": rng.standard_normal((4, 3)).astype(np.float32), "n": np.arange(5, dtype=np.int32)}
    save_checkpoint(Checkpoint.from_arrays(arrays), tmp_path / "m.st")
    ref = load_file(str(tmp_path / "m.st"))
    for k, v in arrays.items():
        np.testing.assert_array_equal(ref[k], v)


def test_reads_reference_library_output(tmp_path, rng):
    arrays = {"x": rng.standard_normal((2, 8)).astype(np.float32), "y": rng.standard_normal(3).astype(np.float16)}
    save_file(arrays, str(tmp_path / "ref.st"), metadata={"k": "v"})
    ck = load_checkpoint(tmp_path / "ref.st")
    assert ck.metadata == {"k": "v"}
    for k, v in arrays.items():
        np.testing.assert_array_equal(ck[k].to_numpy(), v)


def test_reference_file_roundtrips_byte_identical(tmp_path, rng):
    # single dtype, so the reference writer's order is the sorted-name order too
    arrays = {n: rng.standard_normal((3, 4)).astype(np.float32) for n in ("b", "a", "c.weight")}
    src = tmp_path / "ref.st"
    save_file(arrays, str(src))
    save_checkpoint(load_checkpoint(src), tmp_path / "copy.st")
    assert (tmp_path / "copy.st").read_bytes() == src.read_bytes()


def test_save_is_canonical_and_aligned(tmp_path, rng):
    a = {"z": np.ones(3, np.float32), "a": np.zeros(2, np.float32)}
    save_checkpoint(Checkpoint.from_arrays(a), tmp_path / "1.st")
    save_checkpoint(Checkpoint.from_arrays(dict(reversed(list(a.items())))), tmp_path / "2.st")
    data = (tmp_path / "1.st").read_bytes()
    assert data == (tmp_path / "2.st").read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    assert n % 8 == 0
    header = json.loads(data[8:8 + n])
    assert header["a"]["data_offsets"] == [0, 8]
    assert header["z"]["data_offsets"] == [8, 20]


def test_bf16_roundtrip(tmp_path):
    x = np.array([1.0, -2.5, 3.140625, 0.0], dtype=np.float32)
    ck = Checkpoint({"w": Tensor("BF16", f32_to_bf16(x))})
    save_checkpoint(ck, tmp_path / "b.st")
    back = load_checkpoint(tmp_path / "b.st")
    assert back["w"].dtype == "BF16"
    np.testing.assert_array_equal(back["w"].to_f32(), x)


def test_bf16_round_to_nearest_even():
    # 1 + 2^-8 is exactly halfway between two bf16 neighbours; even mantissa wins
    x = np.array([1 + 2**-8, 1 + 3 * 2**-8, np.nan, np.inf], dtype=np.float32)
    y = bf16_to_f32(f32_to_bf16(x))
    assert y[0] == 1.0
    assert y[1] == 1 + 2**-6
    assert np.isnan(y[2]) and y[3] == np.inf


def test_from_f64_rounds_once():
    v = np.array([1 / 3])
    assert from_f64(v, "F32").data[0] == np.float32(1 / 3)
    assert from_f64(v, "F16").data[0] == np.float16(1 / 3)


@pytest.mark.parametrize(
    "make, err",
    [
        (lambda p: p.write_bytes(b"\x01\x02"), MalformedHeader),
        (lambda p: p.write_bytes(struct.pack("<Q", 500) + b"{}"), MalformedHeader),
        (lambda p: p.write_bytes(struct.pack("<Q", 200 * 1024 * 1024) + b"{}"), MalformedHeader),
        (lambda p: write_raw(p, {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                                 "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}, b"\0" * 12),
         OverlappingOffsets),
        (lambda p: write_raw(p, {"a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\0" * 8),
         OverlappingOffsets),
        (lambda p: write_raw(p, {"a": {"dtype": "Q7", "shape": [1], "data_offsets": [0, 4]}}, b"\0" * 4),
         UnsupportedDtype),
        (lambda p: write_raw(p, {"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8),
         MalformedHeader),
        (lambda p: p.write_bytes(struct.pack("<Q", 3) + b"[1]"), MalformedHeader),
        (lambda p: write_raw(p, {"__metadata__": {"k": 1}}), MalformedHeader),
        (lambda p: write_raw(p, {"a": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, b"\0" * 8),
         OverlappingOffsets),
    ],
    ids=["short", "header-past-eof", "oversized-header", "overlap", "truncated",
         "bad-dtype", "span-shape-mismatch", "non-object", "bad-metadata", "gap"],
)
def test_corrupt_files_rejected(tmp_path, make, err):
    p = tmp_path / "bad.st"
    make(p)
    with pytest.raises(err):
        load_checkpoint(p)


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "nope.st")


def test_validate_compatibility():
    a = Checkpoint.from_arrays({"w": np.zeros((2, 2), np.float32), "step": np.array([1])})
    b = Checkpoint.from_arrays({"w": np.ones((2, 2), np.float16), "step": np.array([2])})
    schema = validate_compatibility([a, b])
    assert schema.mergeable_names() == ["w"]
    assert schema.entries["w"].dtype == "F32"

    with pytest.raises(ShapeMismatch):
        validate_compatibility([a, Checkpoint.from_arrays({"w": np.zeros(4, np.float32), "step": np.array([1])})])
    with pytest.raises(DtypeMismatch):
        validate_compatibility([a, Checkpoint.from_arrays({"w": np.zeros((2, 2), np.int32), "step": np.array([1])})])
    c = Checkpoint.from_arrays({"w": np.zeros((2, 2), np.float32)})
    with pytest.raises(MissingTensor) as exc:
        validate_compatibility([a, c])
    assert exc.value.index == 1
    skipped = validate_compatibility([a, c], skip_missing=True)
    assert list(skipped.entries) == ["w"] and skipped.warnings


@settings(max_examples=40, deadline=None)
@given(
    shapes=st.dictionaries(
        st.text("abcdefgh._", min_size=1, max_size=6),
        st.lists(st.integers(0, 4), max_size=3),
        min_size=1, max_size=4,
    ),
    seed=st.integers(0, 2**16),
)
def test_roundtrip_property(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    path = tmp_path_factory.mktemp("rt") / "x.st"
    save_checkpoint(Checkpoint.from_arrays(arrays), path)
    first = path.read_bytes()
    back = load_checkpoint(path)
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k].to_numpy(), v)
    save_checkpoint(back, path)
    assert path.read_bytes() == first


def test_empty_header_and_spec_example(tmp_path):
    p = tmp_path / "empty.st"
    p.write_bytes(struct.pack("<Q", 2) + b"{}")
    assert len(load_checkpoint(p)) == 0
    q = write_raw(tmp_path / "one.st", {"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}},
                  np.array([1.0, 2.0], "<f4").tobytes())
    np.testing.assert_array_equal(load_checkpoint(q)["w"].to_numpy(), [1.0, 2.0])
