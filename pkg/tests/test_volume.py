import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hipposurv.errors import FormatError, NumericError, PreconditionError, ShapeError
from hipposurv.volume import Volume, normalize_intensity, parse_volume, read_volume, write_volume


def test_voxel_order_is_x_fastest():
    vol = Volume.from_voxels((2, 3, 4), np.arange(24))
    # index = (z * dimY + y) * dimX + x
    assert vol.data[1, 2, 3] == (3 * 3 + 2) * 2 + 1
    np.testing.assert_array_equal(vol.voxels(), np.arange(24))


def test_invariants():
    with pytest.raises(ShapeError):
        Volume.from_voxels((2, 2, 2), np.zeros(7))
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(NumericError):
        Volume(np.array([[[np.inf]]]))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_round_trip_is_bit_exact(tmp_path_factory, x, y, z, seed):
    vol = Volume(np.random.default_rng(seed).standard_normal((x, y, z)) * 1e3)
    path = tmp_path_factory.mktemp("vol") / "v.vol3"
    write_volume(vol, path)
    back = read_volume(path)
    assert back == vol
    assert back.data.tobytes() == vol.data.tobytes()


def test_file_layout(tmp_path):
    vol = Volume.from_voxels((2, 1, 1), [1.0, -2.5])
    write_volume(vol, tmp_path / "a.vol3")
    raw = (tmp_path / "a.vol3").read_bytes()
    assert raw == b"VOL3" + struct.pack("<3I", 2, 1, 1) + struct.pack("<2f", 1.0, -2.5)


def test_bad_magic_is_named():
    raw = b"VOL2" + struct.pack("<3I", 1, 1, 1) + b"\0" * 4
    with pytest.raises(FormatError, match="VOL2") as info:
        parse_volume(raw)
    assert info.value.offset == 0


def test_truncated_payload():
    raw = b"VOL3" + struct.pack("<3I", 29, 21, 55) + b"\0" * 100
    with pytest.raises(FormatError, match="length mismatch") as info:
        parse_volume(raw)
    assert info.value.offset == len(raw)


def test_overflowing_dims():
    raw = b"VOL3" + struct.pack("<3I", 2**20, 2**20, 2**20)
    with pytest.raises(FormatError, match="overflow"):
        parse_volume(raw)


def test_trailing_bytes_rejected():
    raw = b"VOL3" + struct.pack("<3I", 1, 1, 1) + b"\0" * 8
    with pytest.raises(FormatError):
        parse_volume(raw)


def test_normalize_definition(rng):
    vol = Volume(rng.gamma(2.0, 30.0, (9, 7, 11)))
    out = normalize_intensity(vol).data.astype(np.float64)
    assert abs(out.mean()) < 1e-5 and abs(out.std() - 1) < 1e-5


def test_normalize_affine_invariance(rng):
    d = rng.standard_normal((6, 5, 7))
    a = normalize_intensity(Volume(d)).data
    b = normalize_intensity(Volume(3.0 * d + 40.0)).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_normalize_constant_raises():
    with pytest.raises(PreconditionError):
        normalize_intensity(Volume(np.full((3, 3, 3), 7.0)))
