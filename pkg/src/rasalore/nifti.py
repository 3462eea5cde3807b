"""Minimal NIfTI-1 reading and writing (.nii / .nii.gz).

Covers the single-file variant with the standard 348-byte header, scalar
datatypes, and scl_slope/scl_inter scaling, which is all the volume loader
needs. Not a general-purpose NIfTI library.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

_HEADER_SIZE = 348
_MAGICS = (b"n+1\x00", b"ni1\x00")

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


class NiftiFormatError(ValueError):
    """Raised when a file is not a readable NIfTI-1 volume."""


@dataclass
class NiftiVolume:
    data: np.ndarray
    affine: np.ndarray          # 4x4, from srow or pixdim fallback
    path: str


def _open(path):
    raw = open(path, "rb").read(2)
    is_gz = raw == b"\x1f\x8b"
    return gzip.open(path, "rb") if is_gz else open(path, "rb")


def read_nifti(path) -> NiftiVolume:
    path = str(path)
    try:
        with _open(path) as fh:
            header = fh.read(_HEADER_SIZE)
            if len(header) < _HEADER_SIZE:
                raise NiftiFormatError(f"{path}: truncated NIfTI header")
            sizeof_hdr = struct.unpack_from("<i", header, 0)[0]
            byte_order = "<"
            if sizeof_hdr != _HEADER_SIZE:
                sizeof_hdr = struct.unpack_from(">i", header, 0)[0]
                byte_order = ">"
                if sizeof_hdr != _HEADER_SIZE:
                    raise NiftiFormatError(f"{path}: bad sizeof_hdr, not NIfTI-1")
            magic = header[344:348]
            if magic not in _MAGICS:
                raise NiftiFormatError(f"{path}: bad NIfTI magic {magic!r}")
            dim = struct.unpack_from(byte_order + "8h", header, 40)
            ndim = dim[0]
            if ndim < 3:
                raise NiftiFormatError(f"{path}: volume has {ndim} < 3 dimensions")
            shape = tuple(int(d) for d in dim[1:1 + ndim])
            datatype = struct.unpack_from(byte_order + "h", header, 70)[0]
            if datatype not in _DTYPES:
                raise NiftiFormatError(f"{path}: unsupported datatype {datatype}")
            pixdim = struct.unpack_from(byte_order + "8f", header, 76)
            vox_offset = struct.unpack_from(byte_order + "f", header, 108)[0]
            scl_slope = struct.unpack_from(byte_order + "f", header, 112)[0]
            scl_inter = struct.unpack_from(byte_order + "f", header, 116)[0]
            srow = np.array(
                struct.unpack_from(byte_order + "12f", header, 280),
                dtype=np.float64).reshape(3, 4)
            fh.read(max(int(vox_offset) - _HEADER_SIZE, 0))
            dtype = np.dtype(_DTYPES[datatype]).newbyteorder(byte_order)
            count = int(np.prod(shape))
            buf = fh.read(count * dtype.itemsize)
            if len(buf) < count * dtype.itemsize:
                raise NiftiFormatError(f"{path}: truncated voxel data")
            data = np.frombuffer(buf, dtype=dtype, count=count)
            data = data.reshape(shape, order="F").astype(np.float64)
    except (OSError, gzip.BadGzipFile) as exc:
        raise NiftiFormatError(f"{path}: unreadable file ({exc})") from exc
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    if np.any(srow[:3, :3]):
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0,
                          pixdim[3] or 1.0, 1.0])
    return NiftiVolume(data=data, affine=affine, path=path)


def write_nifti(path, data: np.ndarray, affine: np.ndarray | None = None):
    """Write a 3-D float32/int16 volume as single-file NIfTI-1."""
    path = str(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("write_nifti expects a 3-D array")
    if data.dtype == np.float64:
        data = data.astype(np.float32)
    codes = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
             np.dtype(np.int32): 8, np.dtype(np.float32): 16}
    if data.dtype not in codes:
        data = data.astype(np.float32)
    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, codes[data.dtype])
    struct.pack_into("<h", header, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<f", header, 112, 1.0)
    if affine is None:
        affine = np.eye(4)
    struct.pack_into("<12f", header, 280, *np.asarray(affine)[:3].ravel())
    header[344:348] = b"n+1\x00"
    payload = bytes(header) + b"\x00" * 4 + data.tobytes(order="F")
    if path.endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)
