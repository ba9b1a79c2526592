import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ridgereg.core import DisplacementField, GrayImage
from ridgereg.initreg import Minutia
from ridgereg.io import (
    FormatError,
    decode_dfld,
    decode_pgm,
    encode_dfld,
    encode_pgm,
    mask_path_for,
    read_field,
    read_image,
    read_minutiae,
    read_seam,
    seam_overlay,
    write_field,
    write_image,
    write_minutiae,
    write_seam,
)


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_roundtrip(px):
    assert np.array_equal(decode_pgm(encode_pgm(px)), px)


def test_pgm_header_layout():
    data = encode_pgm(np.array([[1, 2, 3]], np.uint8))
    assert data == b"P5\n3 1\n255\n\x01\x02\x03"


def test_pgm_with_comment():
    data = b"P5\n# made by hand\n2 1\n255\n\x05\x06"
    assert decode_pgm(data).tolist() == [[5, 6]]


@pytest.mark.parametrize(
    "data",
    [b"P2\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n1"],
)
def test_pgm_malformed(data):
    with pytest.raises(FormatError):
        decode_pgm(data)


def test_image_with_sidecar_mask(tmp_path):
    rng = np.random.default_rng(0)
    img = GrayImage(rng.integers(0, 256, (5, 7)).astype(np.uint8), rng.random((5, 7)) > 0.5)
    path = tmp_path / "a.pgm"
    write_image(path, img)
    assert mask_path_for(path).name == "a.mask.pgm"
    assert read_image(path) == img


def test_full_mask_writes_no_sidecar(tmp_path):
    img = GrayImage(np.zeros((3, 3), np.uint8))
    write_image(tmp_path / "b.pgm", img)
    assert not (tmp_path / "b.mask.pgm").exists()
    assert read_image(tmp_path / "b.pgm").mask.all()


def test_dfld_layout_and_roundtrip(tmp_path):
    fld = DisplacementField(np.array([[0.5, -1.25]]), np.array([[2.0, 3.5]]))
    data = encode_dfld(fld)
    assert data[:4] == b"DFLD"
    assert struct.unpack("<II", data[4:12]) == (2, 1)
    assert struct.unpack("<4f", data[12:]) == (0.5, -1.25, 2.0, 3.5)
    write_field(tmp_path / "f.dfld", fld)
    assert read_field(tmp_path / "f.dfld") == fld


@given(arrays(np.float32, (3, 4), elements=st.floats(-50, 50, width=32)), arrays(np.float32, (3, 4), elements=st.floats(-50, 50, width=32)))
@settings(max_examples=30)
def test_dfld_roundtrip_exact_for_float32(dx, dy):
    fld = DisplacementField(dx.astype(float), dy.astype(float))
    assert decode_dfld(encode_dfld(fld)) == fld


def test_dfld_bad_magic():
    data = bytearray(encode_dfld(DisplacementField.zeros(2, 2)))
    data[:4] = b"DFLX"
    with pytest.raises(FormatError, match="magic"):
        decode_dfld(bytes(data))


def test_dfld_truncated():
    with pytest.raises(FormatError):
        decode_dfld(encode_dfld(DisplacementField.zeros(2, 2))[:-1])


def test_minutiae_roundtrip(tmp_path):
    ms = [Minutia(1.0, 2.0, 0.5, "termination"), Minutia(10.0, 3.0, 6.0, "bifurcation")]
    write_minutiae(tmp_path / "m.txt", ms)
    back = read_minutiae(tmp_path / "m.txt")
    assert [(m.x, m.y, m.kind) for m in back] == [(1.0, 2.0, "termination"), (10.0, 3.0, "bifurcation")]
    assert back[1].theta == pytest.approx(6.0, abs=1e-6)


def test_minutiae_malformed(tmp_path):
    (tmp_path / "m.txt").write_text("1 2 x termination\n")
    with pytest.raises(FormatError, match="m.txt:1"):
        read_minutiae(tmp_path / "m.txt")


def test_seam_file_and_overlay(tmp_path):
    seam = [(0, 0), (1, 0), (1, 1)]
    write_seam(tmp_path / "s.txt", seam)
    assert (tmp_path / "s.txt").read_text() == "0 0\n1 0\n1 1\n"
    assert read_seam(tmp_path / "s.txt") == seam
    over = seam_overlay(GrayImage(np.zeros((2, 2), np.uint8)), seam)
    assert over.pixels.tolist() == [[255, 255], [0, 255]]
