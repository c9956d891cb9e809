import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetseg.errors import FormatError, IoError, OutOfBounds, TruncatedFile, UnsupportedDatatype
from hetseg.volumes import SegmentationMask, Volume, extract_patch, read_nifti, read_volume, write_nifti, zscore_nonzero


def hand_nifti(data: np.ndarray, datatype: int, slope=0.0, inter=0.0, magic=b"n+1\x00") -> bytes:
    """Minimal NIfTI-1 file assembled from the standard's byte offsets."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dims = (data.ndim, *data.shape) + (1,) * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dims)
    bitpix = {2: 8, 16: 32, 64: 64}[datatype]
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1, 1, 1, 1, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = magic
    return bytes(hdr) + b"\0" * 4 + data.tobytes(order="F")


shapes = st.tuples(*[st.integers(1, 6)] * 3)
float_grids = shapes.flatmap(
    lambda s: arrays(np.float32, s, elements=st.floats(-1e6, 1e6, width=32, allow_nan=False))
)
mask_grids = shapes.flatmap(lambda s: arrays(np.uint8, s))


@settings(max_examples=40, deadline=None)
@given(grid=float_grids)
def test_volume_roundtrip_bit_exact(tmp_path_factory, grid):
    path = str(tmp_path_factory.mktemp("v") / "v.nii")
    write_nifti(path, Volume(grid[None], ("T1",), (0.5, 1.0, 2.0)))
    back, _ = read_nifti(path)
    assert back.data[0].tobytes() == grid.tobytes()
    assert back.modality_names == ("T1",)
    assert back.voxel_spacing == (0.5, 1.0, 2.0)


@settings(max_examples=40, deadline=None)
@given(grid=mask_grids)
def test_mask_roundtrip_bit_exact(tmp_path_factory, grid):
    path = str(tmp_path_factory.mktemp("m") / "m.nii.gz")
    write_nifti(path, SegmentationMask(grid))
    back, _ = read_nifti(path)
    assert back.data.dtype == np.uint8
    assert np.array_equal(back.data, grid)


def test_gzip_is_deterministic(tmp_path):
    m = SegmentationMask(np.arange(27, dtype=np.uint8).reshape(3, 3, 3))
    write_nifti(tmp_path / "a.nii.gz", m)
    write_nifti(tmp_path / "b.nii.gz", m)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert (tmp_path / "a.nii.gz").read_bytes()[:2] == b"\x1f\x8b"


def test_mask_file_size(tmp_path):
    p = tmp_path / "m.nii"
    write_nifti(p, SegmentationMask(np.zeros((32, 32, 32), np.uint8)))
    assert os.path.getsize(p) == 352 + 32768


def test_float_payload_size(tmp_path):
    p = tmp_path / "v.nii"
    write_nifti(p, Volume(np.ones((1, 8, 8, 8), np.float32), ("T1",)))
    raw = p.read_bytes()
    assert len(raw) - 352 == 2048
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert struct.unpack_from("<ff", raw, 112) == (1.0, 0.0)


def test_written_header_matches_hand_layout(tmp_path):
    grid = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    p = tmp_path / "m.nii"
    write_nifti(p, SegmentationMask(grid))
    raw = p.read_bytes()
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 2, 3, 4)
    assert struct.unpack_from("<h", raw, 70)[0] == 2
    assert raw[352:] == grid.tobytes(order="F")


def test_scaling_applied(tmp_path):
    p = tmp_path / "s.nii"
    p.write_bytes(hand_nifti(np.full((4, 4, 4), 3.0, np.float32), 16, slope=2.0, inter=1.0))
    vol, _ = read_nifti(p)
    assert np.all(vol.data == 7.0)


def test_zero_slope_means_no_scaling(tmp_path):
    p = tmp_path / "s.nii"
    p.write_bytes(hand_nifti(np.full((2, 2, 2), 3.0, np.float32), 16, slope=0.0, inter=5.0))
    assert np.all(read_nifti(p)[0].data == 3.0)


def test_reads_hand_written_gzip(tmp_path):
    grid = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    p = tmp_path / "m.nii.gz"
    p.write_bytes(gzip.compress(hand_nifti(grid, 2)))
    assert np.array_equal(read_nifti(p)[0].data, grid)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(hand_nifti(np.zeros((2, 2, 2), np.uint8), 2, magic=b"XXXX"))
    with pytest.raises(FormatError):
        read_nifti(p)


def test_unsupported_datatype(tmp_path):
    p = tmp_path / "d.nii"
    p.write_bytes(hand_nifti(np.zeros((2, 2, 2), np.float64), 64))
    with pytest.raises(UnsupportedDatatype):
        read_nifti(p)


def test_truncated(tmp_path):
    p = tmp_path / "t.nii"
    p.write_bytes(hand_nifti(np.zeros((4, 4, 4), np.float32), 16)[:-10])
    with pytest.raises(TruncatedFile):
        read_nifti(p)
    p.write_bytes(b"\0" * 100)
    with pytest.raises(TruncatedFile):
        read_nifti(p)


def test_empty_path():
    with pytest.raises(IoError):
        write_nifti("", SegmentationMask(np.zeros((2, 2, 2), np.uint8)))


def test_unwritable_path(tmp_path):
    with pytest.raises(IoError):
        write_nifti(tmp_path / "missing" / "m.nii", SegmentationMask(np.zeros((2, 2, 2), np.uint8)))


def test_orientation_echoed(tmp_path):
    p = tmp_path / "a.nii"
    write_nifti(p, SegmentationMask(np.zeros((2, 2, 2), np.uint8)))
    raw = bytearray(p.read_bytes())
    struct.pack_into("<hh", raw, 252, 1, 2)  # qform_code, sform_code
    struct.pack_into("<4f", raw, 280, 1.5, 0, 0, -3.0)  # srow_x
    p.write_bytes(bytes(raw))
    m, hdr = read_nifti(p)
    q = tmp_path / "b.nii"
    write_nifti(q, m, header=hdr)
    out = q.read_bytes()
    assert out[252:256] == raw[252:256]
    assert out[280:296] == raw[280:296]


def test_multichannel_volume_files(tmp_path):
    data = np.random.default_rng(0).normal(size=(2, 3, 3, 3)).astype(np.float32)
    paths = write_nifti(tmp_path / "sub.nii", Volume(data, ("T1", "FLAIR")))
    assert [os.path.basename(p) for p in paths] == ["sub_T1.nii", "sub_FLAIR.nii"]
    back = read_volume(paths, ("T1", "FLAIR"))
    assert back.data.tobytes() == data.tobytes()


def test_patch_interior_is_subarray(rng):
    data = rng.normal(size=(2, 64, 64, 64)).astype(np.float32)
    labels = rng.integers(0, 5, (64, 64, 64)).astype(np.uint8)
    p, m = extract_patch(Volume(data, ("a", "b")), SegmentationMask(labels), (30, 31, 32), (32, 32, 32))
    assert np.array_equal(p, data[:, 14:46, 15:47, 16:48])
    assert np.array_equal(m, labels[14:46, 15:47, 16:48])


def test_patch_corner_padding():
    data = np.ones((1, 64, 64, 64), np.float32)
    labels = np.full((64, 64, 64), 3, np.uint8)
    p, m = extract_patch(data, labels, (0, 0, 0), (32, 32, 32))
    assert (p == 0).mean() == pytest.approx(7 / 8)
    assert (m == 0).mean() == pytest.approx(7 / 8)


def test_patch_single_voxel(rng):
    data = rng.normal(size=(1, 5, 5, 5)).astype(np.float32)
    p, _ = extract_patch(data, None, (1, 2, 3), (1, 1, 1))
    assert p.shape == (1, 1, 1, 1) and p[0, 0, 0, 0] == data[0, 1, 2, 3]


def test_patch_center_outside():
    with pytest.raises(OutOfBounds):
        extract_patch(np.zeros((1, 4, 4, 4)), None, (4, 0, 0), (2, 2, 2))


@settings(max_examples=50, deadline=None)
@given(center=st.tuples(*[st.integers(0, 9)] * 3), size=st.tuples(*[st.integers(1, 12)] * 3))
def test_patch_never_invents_labels(center, size):
    labels = (np.arange(1000) % 5).reshape(10, 10, 10).astype(np.uint8)
    data = np.linspace(-1, 1, 1000, dtype=np.float32).reshape(1, 10, 10, 10)
    p, m = extract_patch(data, labels, center, size)
    assert m.shape == size and p.shape == (1, *size)
    assert m.max() < 5 and np.isfinite(p).all()


def test_zscore_nonzero():
    data = np.zeros((1, 4, 4, 4), np.float32)
    data[0, 1:3, 1:3, 1:3] = np.arange(8).reshape(2, 2, 2) + 1
    out = zscore_nonzero(Volume(data, ("T1",))).data[0]
    inner = out[1:3, 1:3, 1:3]
    assert abs(inner.mean()) < 1e-6 and abs(inner.std() - 1) < 1e-6
    assert np.all(out[0] == 0)
