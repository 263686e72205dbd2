"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Supports uint8, int16, int32, float32 and float64 data, scaling by
``scl_slope``/``scl_inter`` and orientation from the sform (preferred) or the
qform.  Dimensions beyond the third are flattened into channels.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .field import OrientedVolume

HEADER_SIZE = 348
DATATYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
CODES = {np.dtype(v): k for k, v in DATATYPES.items()}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file; the message names the field."""


def _open(path, mode):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _quaternion_affine(hdr, endian):
    b, c, d, qx, qy, qz = struct.unpack(endian + "6f", hdr[256:280])
    pixdim = struct.unpack(endian + "8f", hdr[76:108])
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    if a == 0.0:
        norm = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c]])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = (qx, qy, qz)
    return affine


def parse_header(hdr: bytes) -> dict:
    """Decode the fields needed to read the data block."""
    if len(hdr) < HEADER_SIZE:
        raise NiftiError(f"sizeof_hdr: file shorter than {HEADER_SIZE} bytes")
    endian = None
    for e in ("<", ">"):
        if struct.unpack(e + "i", hdr[:4])[0] == HEADER_SIZE:
            endian = e
    if endian is None:
        raise NiftiError("sizeof_hdr: expected 348")
    if hdr[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"magic: unrecognised value {hdr[344:348]!r}")
    if hdr[344:348] == b"ni1\x00":
        raise NiftiError("magic: separate header/image pairs are not supported")
    dim = struct.unpack(endian + "8h", hdr[40:56])
    if not 1 <= dim[0] <= 7 or any(n < 1 for n in dim[1:dim[0] + 1]):
        raise NiftiError(f"dim: invalid dimensions {dim}")
    code = struct.unpack(endian + "h", hdr[70:72])[0]
    if code not in DATATYPES:
        raise NiftiError(f"datatype: unsupported code {code}")
    pixdim = struct.unpack(endian + "8f", hdr[76:108])
    vox_offset = struct.unpack(endian + "f", hdr[108:112])[0]
    slope, inter = struct.unpack(endian + "2f", hdr[112:120])
    qform_code, sform_code = struct.unpack(endian + "2h", hdr[252:256])
    descrip = hdr[148:228].split(b"\x00")[0].decode("latin-1")
    if sform_code > 0:
        affine = np.eye(4)
        affine[:3] = np.array(struct.unpack(endian + "12f", hdr[280:328])).reshape(3, 4)
    elif qform_code > 0:
        affine = _quaternion_affine(hdr, endian)
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])
    shape = [int(n) for n in dim[1:dim[0] + 1]] + [1] * max(0, 3 - dim[0])
    return dict(endian=endian, shape=shape, dtype=DATATYPES[code], vox_offset=int(vox_offset),
                slope=slope, inter=inter, affine=affine, descrip=descrip,
                qform_code=qform_code, sform_code=sform_code)


def read_volume(path, raw=False) -> OrientedVolume:
    """Read a NIfTI-1 file into an OrientedVolume of shape (X, Y, Z, C).

    Scaling is applied unless ``raw``; scaled or floating data are returned
    as float64, unscaled integer data keep their integer type.
    """
    with _open(path, "rb") as fh:
        blob = fh.read()
    info = parse_header(blob[:HEADER_SIZE])
    dtype = np.dtype(info["dtype"]).newbyteorder(info["endian"])
    count = int(np.prod(info["shape"]))
    start = max(info["vox_offset"], HEADER_SIZE)
    if len(blob) < start + count * dtype.itemsize:
        raise NiftiError("vox_offset: data block is truncated")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
    shape = info["shape"]
    data = data.reshape(shape, order="F")
    data = data.reshape(shape[:3] + [int(np.prod(shape[3:]))], order="F")
    slope, inter = info["slope"], info["inter"]
    scaled = np.isfinite(slope) and slope != 0 and not raw and (slope != 1 or inter != 0)
    if scaled:
        data = data.astype(np.float64) * slope + inter
    elif np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    else:
        data = data.astype(data.dtype.newbyteorder("="))
    return OrientedVolume(data, info["affine"])


def read_header(path) -> dict:
    with _open(path, "rb") as fh:
        return parse_header(fh.read(HEADER_SIZE))


def write_volume(path, vol: OrientedVolume, dtype=np.float32, descrip: str = "") -> None:
    """Write an OrientedVolume as single-file NIfTI-1 (gzip if the name ends in .gz).

    Channels are stored along the fifth dimension.  ``descrip`` (at most 79
    characters) carries provenance.
    """
    dtype = np.dtype(dtype)
    if dtype not in CODES:
        raise NiftiError(f"datatype: cannot write {dtype}")
    data = np.asarray(vol.data)
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise NiftiError(f"datatype: values do not fit in {dtype}")
    x, y, z, c = data.shape
    dim = [5 if c > 1 else 3, x, y, z, 1, c, 1, 1]
    affine = np.asarray(vol.affine, dtype=np.float64)
    zooms = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *zooms, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    text = descrip.encode("latin-1")[:79]
    hdr[148:148 + len(text)] = text
    struct.pack_into("<2h", hdr, 252, 0, 2)
    struct.pack_into("<12f", hdr, 280, *affine[:3].ravel())
    hdr[344:348] = b"n+1\x00"
    body = data.astype(dtype.newbyteorder("<")).reshape(x, y, z, 1, c).tobytes(order="F")
    with _open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00" * 4 + body)
