import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcapvision.byte_image import (
    ByteImage,
    RawCapture,
    encode_image,
    load_capture,
    read_pgm,
    to_unit_tensor,
    write_pgm,
)
from pcapvision.errors import FormatError, InvalidDimension, NotFound, Unsupported


def test_load_capture_verbatim(tmp_path):
    p = tmp_path / "a.pcap"
    p.write_bytes(bytes([0xD4, 0xC3, 0xB2, 0xA1]))
    cap = load_capture(p)
    assert cap.byte_len == 4
    assert list(cap.bytes) == [212, 195, 178, 161]


def test_load_empty_file(tmp_path):
    p = tmp_path / "empty.pcap"
    p.write_bytes(b"")
    assert load_capture(p).byte_len == 0


def test_load_large_file_length(tmp_path):
    data = np.random.default_rng(3).bytes(2_560_000)
    p = tmp_path / "big.pcap"
    p.write_bytes(data)
    cap = load_capture(p)
    assert cap.byte_len == 2_560_000
    assert cap.bytes == data


def test_load_missing(tmp_path):
    with pytest.raises(NotFound):
        load_capture(tmp_path / "nope.pcap")


def test_load_directory_is_io_error(tmp_path):
    from pcapvision.errors import IoError

    with pytest.raises(IoError):
        load_capture(tmp_path)


def test_encode_small_capture_default_size():
    img = encode_image(RawCapture(bytes([212, 195, 178, 161])))
    assert (img.width, img.height) == (1600, 1600)
    assert img.pixels.shape == (1600, 1600)
    assert img.pixels.dtype == np.uint8
    assert list(img.pixels[0, :6]) == [212, 195, 178, 161, 0, 0]
    assert not img.truncated
    assert img.flat()[4:].sum() == 0


def test_encode_cap_is_2560000_bytes():
    data = np.random.default_rng(0).bytes(2_560_001)
    img = encode_image(RawCapture(data))
    assert img.truncated
    assert img.source_len == 2_560_001
    assert img.flat().tobytes() == data[:2_560_000]


def test_encode_exactly_full_not_truncated():
    data = bytes(range(256)) * 10_000
    img = encode_image(data)
    assert len(data) == 2_560_000
    assert not img.truncated


def test_encode_empty():
    img = encode_image(RawCapture(b""), 4, 4)
    assert img.flat().tolist() == [0] * 16
    assert not img.truncated


def test_row_major_layout():
    img = encode_image(bytes(range(12)), width=4, height=3)
    assert img.pixels[1, 0] == 4
    assert img.pixels[2, 3] == 11


@pytest.mark.parametrize("w,h", [(0, 5), (5, 0), (-1, 3)])
def test_encode_bad_dims(w, h):
    with pytest.raises(InvalidDimension):
        encode_image(b"abc", w, h)


def test_unit_tensor_values():
    img = encode_image(bytes([255, 0, 51, 7]), 2, 2)
    t = to_unit_tensor(img)
    assert t.shape == (2, 2)
    assert t[0, 0] == 1.0 and t[0, 1] == 0.0
    assert abs(float(t[1, 0]) - 0.2) < 1e-7
    assert to_unit_tensor(img, np.float64)[1, 0] == 51 / 255


@given(st.binary(max_size=600), st.integers(1, 24), st.integers(1, 24))
def test_encode_laws(data, w, h):
    img = encode_image(data, w, h)
    flat = img.flat()
    cap = w * h
    assert flat.size == cap
    assert img.truncated == (len(data) > cap)
    n = min(len(data), cap)
    assert flat[:n].tobytes() == data[:n]
    assert not flat[n:].any()
    # purity
    assert encode_image(data, w, h) == img


@given(st.binary(max_size=400))
def test_lossless_below_cap(data):
    img = encode_image(data, 20, 20)
    assert img.flat().tobytes() == data + bytes(400 - len(data))


def test_pgm_roundtrip_small(tmp_path):
    img = ByteImage(2, 2, np.array([[0, 128], [255, 7]], dtype=np.uint8))
    write_pgm(img, tmp_path / "x.pgm")
    back = read_pgm(tmp_path / "x.pgm")
    assert np.array_equal(back.pixels, img.pixels)
    assert (back.width, back.height) == (2, 2)


def test_pgm_full_size_file_length(tmp_path):
    img = encode_image(b"", 1600, 1600)
    write_pgm(img, tmp_path / "z.pgm")
    header = b"P5\n1600 1600\n255\n"
    assert os.path.getsize(tmp_path / "z.pgm") == len(header) + 2_560_000
    assert (tmp_path / "z.pgm").read_bytes()[: len(header)] == header


@given(st.integers(1, 16), st.integers(1, 16), st.data())
def test_pgm_roundtrip_property(tmp_path_factory, w, h, data):
    raster = data.draw(st.binary(min_size=w * h, max_size=w * h))
    img = encode_image(raster, w, h)
    path = tmp_path_factory.mktemp("pgm") / "r.pgm"
    write_pgm(img, path)
    back = read_pgm(path)
    assert (back.width, back.height) == (w, h)
    assert back.flat().tobytes() == raster


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1\n# depth\n255\n\x01\x02\x03")
    assert read_pgm(p).flat().tolist() == [1, 2, 3]


def test_not_pgm(tmp_path):
    p = tmp_path / "f.pgm"
    p.write_bytes(b"\xd4\xc3\xb2\xa1 some capture bytes")
    with pytest.raises(FormatError):
        read_pgm(p)


def test_pgm_short_raster(tmp_path):
    p = tmp_path / "s.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(FormatError):
        read_pgm(p)


def test_pgm_maxval(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(Unsupported):
        read_pgm(p)
