import struct

import numpy as np
import pytest

from mpk.errors import FormatError
from mpk.tensorio import dumps_tensor, load_pgm, load_tensor, loads_tensor, save_pgm, save_tensor


@pytest.mark.parametrize("shape", [(), (0,), (5,), (3, 4), (2, 3, 4)])
def test_tensor_round_trip(tmp_path, shape):
    a = np.random.default_rng(0).normal(size=shape)
    save_tensor(tmp_path / "t.mpt", a)
    b = load_tensor(tmp_path / "t.mpt")
    assert b.shape == a.shape and b.dtype == np.float64
    np.testing.assert_array_equal(a, b)


def test_tensor_layout():
    buf = dumps_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"MPT1"
    assert struct.unpack("<3I", buf[4:16]) == (2, 1, 3)
    assert struct.unpack("<3d", buf[16:]) == (1.0, 2.0, 3.0)


def test_tensor_integer_input_is_float():
    assert loads_tensor(dumps_tensor(np.arange(4))).dtype == np.float64


def test_tensor_errors():
    good = dumps_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError):
        loads_tensor(b"XXXX" + good[4:])
    with pytest.raises(FormatError):
        loads_tensor(good[:-8])
    with pytest.raises(FormatError):
        loads_tensor(good + b"\0" * 8)
    with pytest.raises(FormatError):
        loads_tensor(b"MPT1")


def test_pgm_round_trip(tmp_path):
    m = np.random.default_rng(1).uniform(size=(7, 11)) > 0.5
    save_pgm(tmp_path / "m.pgm", m)
    back = load_pgm(tmp_path / "m.pgm")
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, m.astype(np.uint8))


def test_pgm_comments_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(load_pgm(p), [[0, 1]])
    p.write_bytes(b"P2\n2 1\n255\n0 255")
    with pytest.raises(FormatError):
        load_pgm(p)
    p.write_bytes(b"P5\n2 1\n65535\n\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        load_pgm(p)
    with pytest.raises(FormatError):
        save_pgm(tmp_path / "x.pgm", np.zeros(3))
