"""Volume and mask containers plus a small NIfTI-1 reader/writer.

Only what the pipeline needs is supported: single-file ``.nii`` (optionally
gzip-wrapped), little-endian, datatype codes 2 (uint8, masks) and 16
(float32, intensities). Orientation fields are carried through untouched.
"""
from __future__ import annotations

import gzip
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    FormatError,
    IoError,
    OutOfBounds,
    ShapeError,
    TruncatedFile,
    UnsupportedDatatype,
    ValidationError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: (np.dtype("<u1"), 8), DT_FLOAT32: (np.dtype("<f4"), 32)}

# (name, struct code) in on-disk order; 348 bytes in total
_HEADER_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FMT = "<" + "".join(code for _, code in _HEADER_FIELDS)
assert struct.calcsize(_FMT) == HEADER_SIZE

# fields echoed verbatim from a source header when rewriting
ORIENTATION_FIELDS = (
    "qform_code",
    "sform_code",
    "quatern_b",
    "quatern_c",
    "quatern_d",
    "qoffset_x",
    "qoffset_y",
    "qoffset_z",
    "srow_x",
    "srow_y",
    "srow_z",
    "xyzt_units",
)


@dataclass
class Volume:
    """Multi-channel intensity grid, indexed (channel, x, y, z)."""

    data: np.ndarray
    modality_names: tuple[str, ...]
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    header: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.modality_names = tuple(self.modality_names)
        if self.data.ndim != 4:
            raise ShapeError(f"volume data must be 4-D (channel, x, y, z), got {self.data.shape}")
        if self.data.shape[0] != len(self.modality_names) or not self.modality_names:
            raise ShapeError(
                f"{self.data.shape[0]} channels but modalities {self.modality_names}"
            )
        if min(self.data.shape) < 1:
            raise ShapeError(f"empty volume {self.data.shape}")
        if len(self.voxel_spacing) != 3 or min(self.voxel_spacing) <= 0:
            raise ValidationError(f"bad voxel spacing {self.voxel_spacing}")
        self.voxel_spacing = tuple(float(s) for s in self.voxel_spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def channels(self, names: Sequence[str]) -> np.ndarray:
        """Data of the named modalities, in the given order."""
        try:
            idx = [self.modality_names.index(n) for n in names]
        except ValueError:
            missing = [n for n in names if n not in self.modality_names]
            raise ValidationError(
                f"volume has modalities {self.modality_names}, missing {missing}"
            ) from None
        return self.data[idx]


@dataclass
class SegmentationMask:
    """Integer label grid indexed (x, y, z)."""

    data: np.ndarray
    label_space_ref: str = "joint"
    source_dataset: str | None = None
    header: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"mask data must be 3-D, got {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValidationError("mask labels must fit in uint8")
            arr = arr.astype(np.uint8)
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------


def _default_header() -> dict:
    hdr = {}
    for name, code in _HEADER_FIELDS:
        if code.endswith("s"):
            hdr[name] = b""
        elif code[0].isdigit():
            hdr[name] = (0,) * int(code[:-1])
        else:
            hdr[name] = 0
    hdr["regular"] = b"r"
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["magic"] = b"n+1\x00"
    hdr["vox_offset"] = float(VOX_OFFSET)
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    return hdr


def _pack_header(hdr: dict) -> bytes:
    values = []
    for name, code in _HEADER_FIELDS:
        v = hdr[name]
        if code[0].isdigit() and not code.endswith("s"):
            values.extend(v)
        else:
            values.append(v)
    return struct.pack(_FMT, *values)


def _unpack_header(raw: bytes) -> dict:
    flat = struct.unpack(_FMT, raw)
    hdr = {}
    pos = 0
    for name, code in _HEADER_FIELDS:
        if code[0].isdigit() and not code.endswith("s"):
            n = int(code[:-1])
            hdr[name] = tuple(flat[pos : pos + n])
            pos += n
        else:
            hdr[name] = flat[pos]
            pos += 1
    return hdr


def _load_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFile(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_nifti(path, *, as_mask: bool | None = None):
    """Read a single-file NIfTI-1 image.

    Returns ``(obj, header)`` where ``obj`` is a :class:`SegmentationMask`
    for uint8 files and a :class:`Volume` for float32 files (override with
    ``as_mask``). A 4-D file becomes a multi-channel volume.
    """
    raw = _load_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    hdr = _unpack_header(raw[:HEADER_SIZE])
    if hdr["magic"] not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad NIfTI-1 magic {hdr['magic']!r}")
    if hdr["sizeof_hdr"] != HEADER_SIZE:
        raise FormatError(f"{path}: sizeof_hdr is {hdr['sizeof_hdr']}, expected 348 (little-endian)")
    if hdr["magic"] == b"ni1\x00":
        raise FormatError(f"{path}: two-file (.hdr/.img) NIfTI pairs are not supported")
    code = hdr["datatype"]
    if code not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {code} (only 2 and 16 are supported)")
    dtype, _ = _DTYPES[code]

    dim = hdr["dim"]
    ndim = dim[0]
    if not 1 <= ndim <= 4 or any(d < 1 for d in dim[1 : ndim + 1]):
        raise FormatError(f"{path}: unsupported dim {dim}")
    shape = tuple(int(d) for d in dim[1 : ndim + 1]) + (1,) * (4 - ndim)
    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < VOX_OFFSET or len(raw) < offset + nbytes:
        raise TruncatedFile(f"{path}: expected {nbytes} payload bytes at offset {offset}")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    arr = arr.reshape(shape, order="F")

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    scaled = slope != 0 and (slope != 1 or inter != 0)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in hdr["pixdim"][1:4])
    descrip = hdr["descrip"].split(b"\x00", 1)[0].decode("utf-8", "replace")

    if as_mask is None:
        as_mask = code == DT_UINT8
    if as_mask:
        if scaled:
            raise FormatError(f"{path}: label masks must not carry intensity scaling")
        if shape[3] != 1:
            raise FormatError(f"{path}: 4-D label masks are not supported")
        obj = SegmentationMask(np.array(arr[..., 0], dtype=np.uint8), header=hdr)
    else:
        data = arr.astype(np.float32)
        if scaled:
            data = (data * np.float32(slope) + np.float32(inter)).astype(np.float32)
        data = np.ascontiguousarray(np.moveaxis(data, 3, 0))
        if shape[3] == 1:
            names = (descrip or "intensity",)
        else:
            parts = descrip.split(",") if descrip else []
            names = tuple(parts) if len(parts) == shape[3] else tuple(
                f"ch{i}" for i in range(shape[3])
            )
        obj = Volume(data, names, spacing, header=hdr)
    return obj, hdr


def _channel_path(path: str, modality: str) -> str:
    for ext in (".nii.gz", ".nii"):
        if path.endswith(ext):
            return f"{path[: -len(ext)]}_{modality}{ext}"
    return f"{path}_{modality}"


def _encode(grid: np.ndarray, code: int, spacing, descrip: str, source_header: dict | None) -> bytes:
    hdr = _default_header()
    if source_header:
        for key in ORIENTATION_FIELDS:
            if key in source_header:
                hdr[key] = source_header[key]
    dtype, bitpix = _DTYPES[code]
    shape = grid.shape
    hdr["dim"] = (3, *shape, 1, 1, 1, 1)
    hdr["datatype"] = code
    hdr["bitpix"] = bitpix
    hdr["pixdim"] = (1.0, *(float(s) for s in spacing), 0.0, 0.0, 0.0, 0.0)
    hdr["descrip"] = descrip.encode("utf-8")[:79]
    if code == DT_FLOAT32 and grid.size:
        hdr["cal_min"] = 0.0
        hdr["cal_max"] = 0.0
    payload = np.asarray(grid, dtype=dtype).tobytes(order="F")
    return _pack_header(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def _write_bytes(path: str, blob: bytes) -> None:
    try:
        if path.endswith(".gz"):
            buf = io.BytesIO()
            with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
                gz.write(blob)
            blob = buf.getvalue()
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_nifti(path, data, header: dict | None = None) -> list[str]:
    """Write a mask or volume as little-endian single-file NIfTI-1.

    Multi-channel volumes go to one file per channel, named
    ``<stem>_<modality>.nii``. Returns the written paths. ``header`` (as
    returned by :func:`read_nifti`) supplies orientation fields to echo.
    """
    path = os.fspath(path) if path is not None else ""
    if not path:
        raise IoError("empty output path")
    header = header if header is not None else getattr(data, "header", None)
    if isinstance(data, SegmentationMask):
        _write_bytes(path, _encode(data.data, DT_UINT8, (1.0, 1.0, 1.0), "", header))
        return [path]
    if isinstance(data, Volume):
        if data.data.shape[0] == 1:
            targets = [path]
        else:
            targets = [_channel_path(path, m) for m in data.modality_names]
        for ch, (target, name) in enumerate(zip(targets, data.modality_names)):
            blob = _encode(data.data[ch], DT_FLOAT32, data.voxel_spacing, name, header)
            _write_bytes(target, blob)
        return targets
    raise ValidationError(f"cannot write {type(data).__name__} as NIfTI")


def read_volume(paths: Sequence[str], modalities: Sequence[str]) -> Volume:
    """Stack per-modality NIfTI files into one multi-channel volume."""
    if len(paths) != len(modalities):
        raise ValidationError(f"{len(paths)} image files for modalities {list(modalities)}")
    chans = []
    spacing = (1.0, 1.0, 1.0)
    header = {}
    for p in paths:
        vol, header = read_nifti(p, as_mask=False)
        if vol.data.shape[0] != 1:
            raise ShapeError(f"{p}: expected a single-channel image")
        chans.append(vol.data[0])
        spacing = vol.voxel_spacing
    shapes = {c.shape for c in chans}
    if len(shapes) != 1:
        raise ShapeError(f"modality images differ in shape: {sorted(shapes)}")
    return Volume(np.stack(chans), tuple(modalities), spacing, header=header)


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------


def _crop(arr: np.ndarray, center, size, fill) -> np.ndarray:
    """Crop the trailing three axes around ``center`` with constant padding."""
    spatial = arr.shape[-3:]
    out = np.full(arr.shape[:-3] + tuple(size), fill, dtype=arr.dtype)
    src, dst = [], []
    for c, s, n in zip(center, size, spatial):
        lo = c - s // 2
        a, b = max(lo, 0), min(lo + s, n)
        if a >= b:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[(Ellipsis, *dst)] = arr[(Ellipsis, *src)]
    return out


def extract_patch(vol: Volume | np.ndarray, mask: SegmentationMask | np.ndarray | None, center, size):
    """Axis-aligned patch of ``size`` voxels starting at ``center - size // 2``.

    Outside the grid, intensities are zero and labels are background.
    Accepts containers or raw arrays ((channel, x, y, z) and (x, y, z)).
    """
    center = tuple(int(c) for c in center)
    size = tuple(int(s) for s in size)
    if len(center) != 3 or len(size) != 3:
        raise ShapeError("center and size need three components")
    if min(size) < 1:
        raise ValidationError(f"patch size must be positive, got {size}")
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    spatial = data.shape[-3:]
    if any(c < 0 or c >= n for c, n in zip(center, spatial)):
        raise OutOfBounds(f"center {center} outside grid {spatial}")
    patch = _crop(data, center, size, 0)
    if mask is None:
        return patch, None
    mdata = mask.data if isinstance(mask, SegmentationMask) else np.asarray(mask)
    if mdata.shape != spatial:
        raise ShapeError(f"mask shape {mdata.shape} != volume shape {spatial}")
    return patch, _crop(mdata, center, size, 0)


def zscore_nonzero(vol: Volume) -> Volume:
    """Per-channel z-score over the nonzero voxels; zeros stay zero."""
    out = np.zeros_like(vol.data)
    for ch in range(vol.data.shape[0]):
        x = vol.data[ch]
        nz = x != 0
        if not nz.any():
            continue
        vals = x[nz].astype(np.float64)
        sd = vals.std()
        out[ch][nz] = ((vals - vals.mean()) / (sd if sd > 0 else 1.0)).astype(np.float32)
    return Volume(out, vol.modality_names, vol.voxel_spacing, header=vol.header)
