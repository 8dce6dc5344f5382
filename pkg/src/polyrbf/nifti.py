"""Minimal single-file NIfTI-1 (``.nii``) reader and writer.

Only uncompressed files are handled.  Supported datatypes are uint8,
int16, int32, float32 and float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, NiftiError, TruncatedDataError, UnsupportedDtypeError

HEADER_SIZE = 348
VOX_OFFSET = 352

DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
CODES = {dt: code for code, dt in DTYPES.items()}


@dataclass(eq=False)
class NiftiImage:
    """Array data plus the header fields this module honours."""

    data: np.ndarray
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    extra: dict = field(default_factory=dict)


def _endian(raw: bytes) -> str:
    for e in ("<", ">"):
        if struct.unpack(e + "i", raw[:4])[0] == HEADER_SIZE:
            return e
    raise NiftiError("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")


def decode(raw: bytes, apply_scaling: bool = True) -> NiftiImage:
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"file is {len(raw)} bytes, shorter than the 348-byte header")
    e = _endian(raw)
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise BadMagicError(f"unsupported magic {magic!r}; only single-file 'n+1' is handled")
    dim = struct.unpack(e + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(e + "2h", raw[70:74])
    pixdim = struct.unpack(e + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(e + "3f", raw[108:120])
    sform_code = struct.unpack(e + "h", raw[254:256])[0]
    srow = np.array(struct.unpack(e + "12f", raw[280:328]), dtype=np.float64).reshape(3, 4)
    if datatype not in DTYPES:
        raise UnsupportedDtypeError(f"datatype code {datatype} is not supported")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0] = {ndim}")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    dt = DTYPES[datatype].newbyteorder(e)
    if bitpix != dt.itemsize * 8:
        raise NiftiError(f"bitpix {bitpix} inconsistent with datatype code {datatype}")
    offset = int(vox_offset)
    nbytes = int(np.prod(shape)) * dt.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedDataError(
            f"data section needs {nbytes} bytes at offset {offset}, file has {len(raw) - offset}"
        )
    data = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dt.newbyteorder("="))
    if apply_scaling and scl_slope != 0 and (scl_slope, scl_inter) != (1.0, 0.0):
        data = data * np.float64(scl_slope) + np.float64(scl_inter)
    affine = None
    if sform_code > 0:
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    return NiftiImage(data=data, pixdim=tuple(float(p) for p in pixdim[1:5]), affine=affine,
                      scl_slope=float(scl_slope), scl_inter=float(scl_inter))


def encode(img: NiftiImage) -> bytes:
    data = np.asarray(img.data)
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    dt = data.dtype.newbyteorder("=")
    if dt not in CODES:
        raise UnsupportedDtypeError(f"cannot write dtype {data.dtype}")
    if not 1 <= data.ndim <= 7:
        raise NiftiError(f"cannot write a {data.ndim}-D array")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, CODES[dt], dt.itemsize * 8)
    pix = list(img.pixdim) + [1.0] * (4 - len(img.pixdim))
    struct.pack_into("<8f", hdr, 76, 1.0, *pix[:4], 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), img.scl_slope, img.scl_inter)
    struct.pack_into("<B", hdr, 123, 10)  # xyzt_units: mm, seconds
    if img.affine is not None:
        A = np.asarray(img.affine, dtype=np.float64)
        struct.pack_into("<h", hdr, 254, 1)
        struct.pack_into("<12f", hdr, 280, *A[:3].reshape(-1))
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(data, dtype=dt.newbyteorder("<")).tobytes(order="F")
    return bytes(hdr) + b"\x00\x00\x00\x00" + body


def read_nifti_image(path) -> NiftiImage:
    return decode(Path(path).read_bytes())


def write_nifti_image(img: NiftiImage, path) -> None:
    Path(path).write_bytes(encode(img))
