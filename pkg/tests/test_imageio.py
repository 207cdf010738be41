import numpy as np
import pytest

from sfmwarp.errors import FormatError
from sfmwarp.imageio import quantize8, read_image, write_image


@pytest.mark.parametrize("channels", [1, 3])
def test_pfm_round_trip_bitwise(tmp_path, channels):
    g = (np.random.default_rng(0).random((8, 8, channels)) * 50).astype(np.float32).astype(np.float64)
    p = tmp_path / "a.pfm"
    write_image(g, p)
    assert np.array_equal(read_image(p), g)


def test_pfm_header_is_little_endian(tmp_path):
    p = tmp_path / "a.pfm"
    write_image(np.ones((2, 3)), p)
    assert p.read_bytes().startswith(b"Pf\n3 2\n-1.0\n")


def test_pfm_big_endian_read(tmp_path):
    g = np.arange(6, dtype=np.float64).reshape(2, 3)
    p = tmp_path / "b.pfm"
    p.write_bytes(b"Pf\n3 2\n1.0\n" + g[::-1].astype(">f4").tobytes())
    assert np.array_equal(read_image(p)[:, :, 0], g)


@pytest.mark.parametrize("ext,channels", [(".png", 1), (".png", 3), (".pgm", 1)])
def test_8bit_round_trip(tmp_path, ext, channels):
    g = quantize8(np.random.default_rng(1).random((6, 9, channels)))
    p = tmp_path / f"a{ext}"
    write_image(g, p)
    back = read_image(p)
    assert back.shape == g.shape
    assert np.array_equal(back, g)


def test_png_values_in_unit_range(tmp_path):
    p = tmp_path / "c.png"
    write_image(np.array([[-1.0, 0.5, 2.0]]), p)
    back = read_image(p)
    assert back.min() >= 0 and back.max() <= 1


def test_unknown_magic(tmp_path):
    p = tmp_path / "x.pfm"
    p.write_bytes(b"P7\n3 2\n-1.0\n" + bytes(24))
    with pytest.raises(FormatError) as exc:
        read_image(p)
    assert exc.value.offset == 0


def test_truncated_pfm_reports_offset(tmp_path):
    p = tmp_path / "t.pfm"
    write_image(np.ones((4, 4)), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(FormatError) as exc:
        read_image(p)
    assert exc.value.offset == len(raw) - 5


def test_truncated_png(tmp_path):
    p = tmp_path / "t.png"
    write_image(np.ones((16, 16)) * 0.5, p)
    p.write_bytes(p.read_bytes()[:30])
    with pytest.raises(FormatError):
        read_image(p)
