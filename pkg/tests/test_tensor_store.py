import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samkit.errors import FormatError, InvalidValue, IoError, ShapeMismatch, UnsupportedDtype
from samkit.tensor_store import (
    ArchiveWriter,
    DeltaSet,
    TensorArchive,
    TensorMap,
    apply_delta,
    apply_delta_archive,
    compute_delta,
    load_tensor_archive,
    save_tensor_archive,
)

from conftest import random_tensormap, tensormaps, write_raw_archive


def test_decode_hand_written_archive(tmp_path):
    data = np.array([1, 2, 3, 4], dtype="<f4").tobytes()
    write_raw_archive(tmp_path / "w.st", {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, data)
    tmap = load_tensor_archive(tmp_path / "w.st")
    assert list(tmap) == ["w"]
    np.testing.assert_array_equal(tmap["w"], [[1, 2], [3, 4]])


def test_metadata_survives(tmp_path):
    m = TensorMap({"x": [1.0]}, {"origin": "expert7", "note": "é"})
    save_tensor_archive(m, tmp_path / "m.st")
    assert load_tensor_archive(tmp_path / "m.st").metadata == {"origin": "expert7", "note": "é"}


def test_round_trip_random(tmp_path, rng):
    for i in range(20):
        m = random_tensormap(rng)
        save_tensor_archive(m, tmp_path / f"{i}.st")
        assert load_tensor_archive(tmp_path / f"{i}.st").equals(m)


@settings(max_examples=40, deadline=None)
@given(tensormaps())
def test_round_trip_property(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("rt") / "m.st"
    save_tensor_archive(m, path)
    assert load_tensor_archive(path).equals(m)


def test_empty_map(tmp_path):
    save_tensor_archive(TensorMap(), tmp_path / "e.st")
    raw = (tmp_path / "e.st").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    assert json.loads(raw[8 : 8 + n]) == {}
    assert len(load_tensor_archive(tmp_path / "e.st")) == 0


def test_saves_are_byte_identical_and_sorted(tmp_path, rng):
    m = TensorMap({"zeta": rng.standard_normal(3), "alpha": rng.standard_normal((2, 2)), "mid": [1.0]})
    save_tensor_archive(m, tmp_path / "a.st")
    save_tensor_archive(m, tmp_path / "b.st")
    a = (tmp_path / "a.st").read_bytes()
    assert a == (tmp_path / "b.st").read_bytes()
    (n,) = struct.unpack("<Q", a[:8])
    assert n % 8 == 0
    header = json.loads(a[8 : 8 + n])
    assert list(header) == ["alpha", "mid", "zeta"]
    assert [header[k]["data_offsets"][0] for k in header] == [0, 16, 20]


def test_nan_rejected():
    with pytest.raises(InvalidValue):
        TensorMap({"w": [1.0, float("nan")]})


def test_bad_shapes_rejected():
    with pytest.raises(InvalidValue):
        TensorMap({"s": 3.0})
    with pytest.raises(InvalidValue):
        TensorMap({"z": np.zeros((2, 0))})
    with pytest.raises(InvalidValue):
        TensorMap({"": [1.0]})


def test_tensors_are_read_only():
    m = TensorMap({"w": [1.0, 2.0]})
    with pytest.raises(ValueError):
        m["w"][0] = 5


def _good(tmp_path):
    data = np.arange(6, dtype="<f4").tobytes()
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [4], "data_offsets": [8, 24]},
    }
    return header, data


@pytest.mark.parametrize(
    "mutate",
    [
        lambda h: h["a"].update(data_offsets=[0, 12]),  # size inconsistent
        lambda h: h["b"].update(data_offsets=[4, 20]),  # overlap
        lambda h: h["b"].update(data_offsets=[8, 40], shape=[8]),  # out of bounds
        lambda h: h["a"].update(dtype="Q7"),
        lambda h: h["a"].update(shape=[0]),
        lambda h: h["a"].update(shape="2"),
        lambda h: h["a"].pop("dtype"),
        lambda h: h.update(__metadata__={"k": 1}),
    ],
)
def test_malformed_headers(tmp_path, mutate):
    header, data = _good(tmp_path)
    mutate(header)
    write_raw_archive(tmp_path / "bad.st", header, data)
    with pytest.raises(FormatError):
        load_tensor_archive(tmp_path / "bad.st")


def test_truncated_file(tmp_path):
    header, data = _good(tmp_path)
    write_raw_archive(tmp_path / "t.st", header, data)
    raw = (tmp_path / "t.st").read_bytes()
    for cut in (3, 20, len(raw) - 4):
        (tmp_path / "cut.st").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_tensor_archive(tmp_path / "cut.st")


def test_trailing_bytes_and_garbage_header(tmp_path):
    header, data = _good(tmp_path)
    write_raw_archive(tmp_path / "t.st", header, data + b"\0\0\0\0")
    with pytest.raises(FormatError):
        load_tensor_archive(tmp_path / "t.st")
    (tmp_path / "g.st").write_bytes(struct.pack("<Q", 5) + b"{nope")
    with pytest.raises(FormatError):
        load_tensor_archive(tmp_path / "g.st")


def test_integer_dtype_unsupported(tmp_path):
    write_raw_archive(tmp_path / "i.st", {"i": {"dtype": "I32", "shape": [2], "data_offsets": [0, 8]}}, bytes(8))
    with pytest.raises(UnsupportedDtype):
        load_tensor_archive(tmp_path / "i.st")


def test_half_precision_upconverted(tmp_path):
    vals = np.array([1.5, -2.25, 3.0], dtype="<f2")
    bf = (np.array([1.5, -2.25, 3.0], dtype="<f4").view("<u4") >> 16).astype("<u2")
    header = {
        "h": {"dtype": "F16", "shape": [3], "data_offsets": [0, 6]},
        "b": {"dtype": "BF16", "shape": [3], "data_offsets": [6, 12]},
    }
    write_raw_archive(tmp_path / "h.st", header, vals.tobytes() + bf.tobytes())
    with TensorArchive(tmp_path / "h.st") as arch:
        assert len(arch.warnings) == 2
    m = load_tensor_archive(tmp_path / "h.st")
    assert m["h"].dtype == np.float32
    np.testing.assert_array_equal(m["h"], [1.5, -2.25, 3.0])
    np.testing.assert_array_equal(m["b"], [1.5, -2.25, 3.0])


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        load_tensor_archive(tmp_path / "nothing.st")


def test_writer_rejects_unknown_or_missing(tmp_path):
    with pytest.raises((ShapeMismatch, InvalidValue, KeyError)):
        with ArchiveWriter(tmp_path / "w.st", {"a": (2,)}) as w:
            w.write("b", np.zeros(2))


def test_compute_delta_examples():
    base = TensorMap({"w": [1.0, 1.0]})
    sft = TensorMap({"w": [3.0, 0.0]})
    delta = compute_delta(sft, base)
    assert isinstance(delta, DeltaSet)
    np.testing.assert_array_equal(delta["w"], [2.0, -1.0])
    assert not compute_delta(base, base)["w"].any()
    np.testing.assert_array_equal(apply_delta(base, delta, 1.0)["w"], [3.0, 0.0])


def test_compute_delta_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        compute_delta(TensorMap({"w": [1.0], "b": [0.0]}), TensorMap({"w": [1.0]}))
    with pytest.raises(ShapeMismatch):
        compute_delta(TensorMap({"w": [1.0, 2.0]}), TensorMap({"w": [1.0]}))


def test_apply_delta_zero_scale_and_nonfinite(rng):
    base = TensorMap({"w": rng.standard_normal(5)})
    delta = DeltaSet({"w": rng.standard_normal(5)})
    assert apply_delta(base, delta, 0.0).equals(base)
    for bad in (float("inf"), float("nan")):
        with pytest.raises(InvalidValue):
            apply_delta(base, delta, bad)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_delta_inverse(seed):
    rng = np.random.default_rng(seed)
    base = TensorMap({"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)})
    sft = TensorMap({k: base[k] + rng.standard_normal(base[k].shape).astype(np.float32) for k in base})
    back = apply_delta(base, compute_delta(sft, base), 1.0)
    for k in base:
        np.testing.assert_allclose(back[k], sft[k], rtol=1e-6, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_apply_delta_linear_in_scale(seed, a, c):
    rng = np.random.default_rng(seed)
    base = TensorMap({"w": rng.standard_normal(6)})
    delta = DeltaSet({"w": rng.standard_normal(6)})
    once = apply_delta(base, delta, a + c)["w"]
    twice = apply_delta(apply_delta(base, delta, a), delta, c)["w"]
    np.testing.assert_allclose(once, twice, rtol=1e-6, atol=1e-5)


def test_apply_delta_archive_streams_same_result(tmp_path, rng):
    base = TensorMap({"w": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)}, {"name": "base"})
    delta = DeltaSet({"w": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)})
    save_tensor_archive(base, tmp_path / "base.st")
    save_tensor_archive(delta, tmp_path / "delta.st")
    apply_delta_archive(tmp_path / "base.st", tmp_path / "delta.st", tmp_path / "out.st", 0.5)
    assert load_tensor_archive(tmp_path / "out.st").equals(apply_delta(base, delta, 0.5))
