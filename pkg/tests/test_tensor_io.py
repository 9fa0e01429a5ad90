import struct

import numpy as np
import pytest

from backend.errors import BadMagic, DataError, ShapeMismatch, TruncatedPayload, UnsupportedDtype
from backend.tensor_io import (
    Domain, Tensor, as_array, decode_tensor, encode_tensor, from_hwc, load_tensor, save_tensor,
    to_hwc, window_hu
)


def test_payload_is_little_endian_f32():
    buf = encode_tensor(Tensor(np.array([[0.0, 1.0]]), Domain.RAW))
    assert buf[:4] == b"N2ST"
    assert buf[-8:] == bytes.fromhex("000000000000803f")


def test_header_layout():
    t = Tensor(np.zeros((3, 5)), Domain.HOUNSFIELD)
    buf = encode_tensor(t)
    magic, version, dtype, ndim = struct.unpack_from("<4sIBB", buf)
    assert (magic, version, dtype, ndim) == (b"N2ST", 1, 0, 2)
    assert struct.unpack_from("<2I", buf, 10) == (3, 5)
    assert buf[18] == int(Domain.HOUNSFIELD)
    assert len(buf) == 19 + 4 * 15


def test_decode_restores_domain_and_values(rng):
    data = rng.standard_normal((4, 6, 2)).astype(np.float32)
    t, end = decode_tensor(encode_tensor(Tensor(data, Domain.RAW)))
    assert end == 19 + 4 + 4 * data.size
    assert t.domain == Domain.RAW
    assert t.axis_labels == ("height", "width", "channel")
    np.testing.assert_array_equal(t.data, data)


def test_bad_magic():
    with pytest.raises(BadMagic):
        decode_tensor(b"XXXX" + bytes(20))


def test_truncated_payload():
    buf = encode_tensor(Tensor(np.ones((4, 4))))
    with pytest.raises(TruncatedPayload):
        decode_tensor(buf[:-3])


def test_unsupported_dtype():
    buf = bytearray(encode_tensor(Tensor(np.ones((2, 2)))))
    buf[8] = 7
    with pytest.raises(UnsupportedDtype):
        decode_tensor(bytes(buf))


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "x.n2st"
    path.write_bytes(encode_tensor(Tensor(np.ones((2, 2)))) + b"\x00")
    with pytest.raises(DataError):
        load_tensor(str(path))


def test_tensor_is_immutable():
    t = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0


def test_zero_dim_rejected():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((0, 3)))


def test_unit_interval_must_be_finite():
    with pytest.raises(DataError):
        Tensor(np.array([0.5, np.nan]), Domain.UNIT_INTERVAL)


def test_pgm_quantization(tmp_path):
    path = str(tmp_path / "q.pgm")
    save_tensor(Tensor(np.array([[0.0, 1 / 3], [2 / 3, 1.0]]), Domain.UNIT_INTERVAL), path)
    back = load_tensor(path)
    assert back.domain == Domain.UNIT_INTERVAL
    np.testing.assert_allclose(back.data, [[0, 1 / 3], [2 / 3, 1]], atol=1 / 255)


def test_pgm_hu_uses_display_window(tmp_path):
    path = str(tmp_path / "hu.pgm")
    save_tensor(Tensor(np.array([[-1000.0, 40.0], [240.0, 3000.0]]), Domain.HOUNSFIELD), path)
    back = load_tensor(path).data
    np.testing.assert_allclose(back, [[0.0, 0.5], [1.0, 1.0]], atol=1 / 255)


def test_n2st_file_roundtrip_keeps_bits(tmp_path, rng):
    data = rng.standard_normal((3, 8, 8)).astype(np.float32) * 500
    path = str(tmp_path / "vol.n2st")
    save_tensor(Tensor(data, Domain.HOUNSFIELD, ("slice", "height", "width")), path)
    back = load_tensor(path)
    assert back.data.tobytes() == data.tobytes()


def test_unknown_file_kind(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello world")
    with pytest.raises(BadMagic):
        load_tensor(str(path))


def test_window_hu_bounds():
    out = window_hu(np.array([-160.0, 40.0, 240.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_hwc_helpers():
    img = np.ones((4, 5), dtype=np.float32)
    hwc = to_hwc(img)
    assert hwc.shape == (4, 5, 1)
    assert from_hwc(hwc, 2).shape == (4, 5)


def test_as_array_keeps_double_precision():
    assert as_array(np.zeros(3)).dtype == np.float64
    assert to_hwc(np.zeros((2, 2))).dtype == np.float64
    assert as_array(np.zeros(3, dtype=np.float16)).dtype == np.float32
    assert as_array([1, 2]).dtype == np.float32
