"""PTF1 tensor files and PGM/PPM image writers."""

import numpy as np
import pytest

from bgfill import ptf
from bgfill.errors import FormatError


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (4, 4, 3), (1, 2, 3, 4)]:
        arr = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.ptf"
        ptf.write_ptf(path, arr)
        back = ptf.read_ptf(path)
        assert back.dtype == np.float32
        assert back.shape == arr.shape
        assert np.array_equal(back.view(np.uint32), arr.view(np.uint32))


def test_scalar_rank_zero(tmp_path):
    path = tmp_path / "s.ptf"
    ptf.write_ptf(path, np.float32(3.25))
    assert ptf.read_ptf(path) == np.float32(3.25)


def test_header_layout(tmp_path):
    path = tmp_path / "h.ptf"
    ptf.write_ptf(path, np.zeros((2, 3), np.float32))
    blob = path.read_bytes()
    assert blob[:4] == b"PTF1"
    assert int.from_bytes(blob[4:8], "little") == 2
    assert int.from_bytes(blob[8:12], "little") == 2
    assert int.from_bytes(blob[12:16], "little") == 3
    assert len(blob) == 16 + 4 * 6


def test_truncated_file_names_path(tmp_path):
    path = tmp_path / "bad.ptf"
    ptf.write_ptf(path, np.ones((4, 4), np.float32))
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError, match="bad.ptf"):
        ptf.read_ptf(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "nope.ptf"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        ptf.read_ptf(path)


def test_pgm_ppm_headers(tmp_path):
    gray = np.linspace(0, 1, 12).reshape(3, 4)
    rgb = np.random.default_rng(1).random((3, 4, 3))
    ptf.write_pgm(tmp_path / "g.pgm", gray)
    ptf.write_ppm(tmp_path / "c.ppm", rgb)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    assert (tmp_path / "c.ppm").read_bytes().startswith(b"P6\n4 3\n255\n")
    assert len((tmp_path / "c.ppm").read_bytes()) == len(b"P6\n4 3\n255\n") + 36
