"""Minimal NIfTI-1 single-file reader and writer.

Supports ``.nii`` and ``.nii.gz`` files holding a 3D volume stored as int16,
float32 or float64, in either byte order. Data are always returned as
float64 with ``scl_slope``/``scl_inter`` applied. Anything outside that subset
raises :class:`NiftiError` instead of being guessed at.
"""

from __future__ import annotations

import gzip
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import HabenchError, Mask, VolumeGeometry, flatten_volume, unflatten_volume

HEADER_SIZE = 348
VOX_OFFSET = 352

# datatype code -> (numpy kind, bitpix)
DATATYPES = {
    4: ("i2", 16),
    16: ("f4", 32),
    64: ("f8", 64),
}
ELEMENT_TYPES = {"float32": 16, "float64": 64}


class NiftiError(HabenchError):
    pass


@dataclass(frozen=True)
class Volume:
    geometry: VolumeGeometry
    data: np.ndarray
    description: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = unflatten_volume(data, self.geometry.dims)
        if data.shape != self.geometry.dims:
            raise NiftiError(f"data shape {data.shape} != dims {self.geometry.dims}")
        if len(self.description.encode("utf-8")) > 79:
            raise NiftiError("description longer than 79 bytes")
        object.__setattr__(self, "data", data)


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise NiftiError(f"cannot read {path}: {exc.strerror or exc}") from None
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _byte_order(header: bytes, path) -> str:
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", header[:4])[0] == HEADER_SIZE:
            return endian
    raise NiftiError(f"{path}: sizeof_hdr is not 348 in either byte order")


def _quaternion_affine(b, c, d, qx, qy, qz, pixdim) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = math.sqrt(a2) if a2 > 1e-7 else 0.0
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = (qx, qy, qz)
    return aff


def read_volume(path) -> Volume:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than the 348-byte header")
    hdr = raw[:HEADER_SIZE]
    e = _byte_order(hdr, path)
    magic = hdr[344:348]
    if magic == b"ni1\x00":
        raise NiftiError(f"{path}: unsupported two-file format (magic 'ni1')")
    if magic != b"n+1\x00":
        raise NiftiError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack(e + "8h", hdr[40:56])
    datatype, bitpix = struct.unpack(e + "2h", hdr[70:74])
    pixdim = struct.unpack(e + "8f", hdr[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(e + "3f", hdr[108:120])
    descrip = hdr[148:228].split(b"\x00", 1)[0].decode("utf-8", errors="replace")
    qform_code, sform_code = struct.unpack(e + "2h", hdr[252:256])
    quatern = struct.unpack(e + "6f", hdr[256:280])
    srows = struct.unpack(e + "12f", hdr[280:328])

    if not 1 <= dim[0] <= 7:
        raise NiftiError(f"{path}: dim[0]={dim[0]} outside 1..7")
    dims = [dim[i] if i <= dim[0] else 1 for i in range(1, 8)]
    if any(d > 1 for d in dims[3:]):
        raise NiftiError(f"{path}: only 3D volumes are supported (dim={dim})")
    dims3 = tuple(int(d) for d in dims[:3])
    if any(d < 1 for d in dims3):
        raise NiftiError(f"{path}: non-positive dimension in {dim}")
    if datatype not in DATATYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    kind, _ = DATATYPES[datatype]

    zooms = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    if sform_code >= 1:
        affine = np.vstack([np.array(srows, dtype=float).reshape(3, 4), [0, 0, 0, 1]])
    elif qform_code >= 1:
        affine = _quaternion_affine(*quatern, pixdim)
    else:
        affine = np.diag([*zooms, 1.0])

    count = dims3[0] * dims3[1] * dims3[2]
    offset = int(vox_offset)
    dtype = np.dtype(e + kind)
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"{path}: truncated data section ({len(raw) - offset} of {nbytes} bytes)")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    if scl_slope != 0 and math.isfinite(scl_slope):
        if scl_slope != 1.0 or scl_inter != 0.0:
            flat = flat * float(scl_slope) + float(scl_inter)
    if not np.all(np.isfinite(flat)):
        raise NiftiError(f"{path}: non-finite values in data")
    geometry = VolumeGeometry(dims3, zooms, affine)
    return Volume(geometry, unflatten_volume(flat, dims3), descrip)


def _header(volume: Volume, datatype: int, bitpix: int) -> bytes:
    g = volume.geometry
    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, *g.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", buf, 70, datatype, bitpix)
    struct.pack_into("<8f", buf, 76, 1.0, *g.voxel_size, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", buf, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", buf, 123, 2)  # xyzt_units: mm
    desc = volume.description.encode("utf-8")[:79]
    buf[148:148 + len(desc)] = desc
    struct.pack_into("<2h", buf, 252, 0, 1)
    struct.pack_into("<12f", buf, 280, *np.asarray(g.affine[:3, :], dtype=float).ravel())
    buf[344:348] = b"n+1\x00"
    return bytes(buf)


def write_volume(volume: Volume, path, element_type: str = "float32") -> None:
    """Write a single-file NIfTI-1 volume; gzip when the name ends in ``.gz``.

    Gzip output carries no timestamp or file name, so identical volumes give
    identical bytes.
    """
    if element_type not in ELEMENT_TYPES:
        raise NiftiError(f"element_type must be one of {sorted(ELEMENT_TYPES)}")
    datatype = ELEMENT_TYPES[element_type]
    kind, bitpix = DATATYPES[datatype]
    flat = flatten_volume(volume.data)
    if not np.all(np.isfinite(flat)):
        raise NiftiError("cannot write non-finite values")
    if kind == "f4" and np.any(np.abs(flat) > np.finfo(np.float32).max):
        raise NiftiError("value not representable as float32 (overflow)")
    payload = _header(volume, datatype, bitpix) + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    payload += flat.astype("<" + kind).tobytes()
    path = Path(path)
    try:
        if path.name.endswith(".gz"):
            bio = io.BytesIO()
            with gzip.GzipFile(filename="", mode="wb", fileobj=bio, mtime=0) as gz:
                gz.write(payload)
            path.write_bytes(bio.getvalue())
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from None


def read_mask(path) -> Mask:
    """Read a mask volume; nonzero voxels are in the mask."""
    vol = read_volume(path)
    return Mask(vol.geometry, vol.data != 0)


def mask_volume(mask) -> Volume:
    return Volume(mask.geometry, mask.to_volume().astype(np.float64), "mask")
