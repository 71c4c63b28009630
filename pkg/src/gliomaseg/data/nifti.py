"""Minimal reader/writer for uncompressed single-file NIfTI-1 volumes.

Only the fields needed for 2D slicing are interpreted; orientation and the
affine are ignored. Endianness is inferred from ``sizeof_hdr``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# NIfTI datatype code -> (numpy kind, bitpix)
DATATYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32), 64: ("f8", 64)}
_CODE_FOR_DTYPE = {np.dtype("uint8"): 2, np.dtype("int16"): 4, np.dtype("float32"): 16, np.dtype("float64"): 64}


class NiftiError(ValueError):
    """Base class for NIfTI parse failures."""


class BadMagicError(NiftiError):
    pass


class UnsupportedVariantError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class BadDimensionsError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


@dataclass
class Volume:
    """Voxel data indexed ``[x, y, z]`` plus the source datatype code."""

    voxels: np.ndarray
    datatype: int = 16

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)


def read_nifti(path) -> Volume:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file holds {len(blob)} bytes, header needs {HEADER_SIZE}")
    if struct.unpack("<i", blob[:4])[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", blob[:4])[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise BadMagicError(f"{path}: sizeof_hdr is not {HEADER_SIZE} in either byte order")
    magic = blob[344:348]
    if magic == MAGIC_PAIR:
        raise UnsupportedVariantError(f"{path}: magic {magic!r} denotes a detached .hdr/.img pair")
    if magic != MAGIC_SINGLE:
        raise BadMagicError(f"{path}: magic is {magic!r}, expected {MAGIC_SINGLE!r}")
    dim = struct.unpack(endian + "8h", blob[40:56])
    (datatype,) = struct.unpack(endian + "h", blob[70:72])
    (vox_offset,) = struct.unpack(endian + "f", blob[108:112])
    slope, inter = struct.unpack(endian + "2f", blob[112:120])
    if dim[0] != 3:
        raise BadDimensionsError(f"{path}: dim[0] is {dim[0]}, only 3D volumes are supported")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise BadDimensionsError(f"{path}: dim extents {shape} must be positive")
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype {datatype} not in {sorted(DATATYPES)}")
    kind, _ = DATATYPES[datatype]
    dtype = np.dtype(endian + kind)
    offset = int(vox_offset)
    count = int(np.prod(shape))
    if offset + count * dtype.itemsize > len(blob):
        raise TruncatedPayloadError(
            f"{path}: voxel payload needs {count * dtype.itemsize} bytes at vox_offset {offset}, "
            f"file has {len(blob) - offset}"
        )
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    voxels = raw.reshape(shape, order="F").astype(np.float64)
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        voxels = voxels * slope + inter
    return Volume(voxels=voxels, datatype=datatype)


def write_nifti(path, voxels: np.ndarray, dtype="float32", big_endian: bool = False) -> None:
    """Write a 3D array (indexed ``[x, y, z]``) as a single-file NIfTI-1."""
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise BadDimensionsError(f"write_nifti needs a 3D array, got shape {voxels.shape}")
    np_dtype = np.dtype(dtype)
    code = _CODE_FOR_DTYPE[np_dtype]
    e = ">" if big_endian else "<"
    header = bytearray(HEADER_SIZE)
    struct.pack_into(e + "i", header, 0, HEADER_SIZE)
    struct.pack_into(e + "8h", header, 40, 3, *voxels.shape, 1, 1, 1, 1)
    struct.pack_into(e + "2h", header, 70, code, DATATYPES[code][1])
    struct.pack_into(e + "8f", header, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into(e + "3f", header, 108, 352.0, 1.0, 0.0)
    header[344:348] = MAGIC_SINGLE
    payload = np.asarray(voxels, dtype=np_dtype.newbyteorder(e)).tobytes(order="F")
    Path(path).write_bytes(bytes(header) + b"\x00" * 4 + payload)
