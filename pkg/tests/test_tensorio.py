from __future__ import annotations

import struct

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from avparse.errors import ParseError
from avparse.tensorio import MAGIC, decode_tensor, encode_tensor, load_tensor, save_tensor


def test_layout_is_exact():
    buf = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:8] == b"AVTNSR1\x00"
    assert struct.unpack_from("<I", buf, 8) == (2,)
    assert struct.unpack_from("<2Q", buf, 12) == (1, 3)
    assert struct.unpack_from("<3f", buf, 28) == (1.0, 2.0, 3.0)
    assert len(buf) == 8 + 4 + 16 + 12


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == np.float64
    npt.assert_array_equal(out, arr.astype(np.float64))


def test_file_roundtrip(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    save_tensor(tmp_path / "x.avt", arr)
    npt.assert_array_equal(load_tensor(tmp_path / "x.avt"), arr.astype(np.float32))


@pytest.mark.parametrize(
    "buf, offset",
    [
        (b"NOTATNSR" + b"\x00" * 8, 0),
        (MAGIC + b"\x01", 8),
        (MAGIC + struct.pack("<I", 2) + struct.pack("<Q", 3), 12),
        (MAGIC + struct.pack("<I", 1) + struct.pack("<Q", 3) + b"\x00" * 8, 20),
    ],
)
def test_malformed_files_report_offsets(buf, offset, tmp_path):
    path = tmp_path / "bad.avt"
    path.write_bytes(buf)
    with pytest.raises(ParseError) as info:
        load_tensor(path)
    assert info.value.location == offset
    assert str(path) in str(info.value)
