"""Reading and writing label volumes.

Two containers are supported:

* NIfTI-1 single file (``.nii`` / ``.nii.gz``), little-endian, integer
  payloads (uint8, int16, int32) only. Spacing comes from ``pixdim[1..3]``;
  orientation fields are parsed but only axis-aligned volumes are accepted.
* A tiny raw container (``.rvol``) for byte-exact fixtures: an 8-byte magic,
  three uint32 dims, three float64 spacings, then one byte per voxel in
  x-fastest order. See docs/formats.md for the exact layout.
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import VolumeFormatError
from .volume import LabelVolume

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC_SINGLE = b"n+1\x00"
NIFTI_MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

RAW_MAGIC = b"RVOL0001"
RAW_HEADER = struct.Struct("<8s3I3d")

# NIfTI datatype code -> little-endian numpy dtype; integer label types only.
_NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 8: np.dtype("<i4")}
_NIFTI_CODES = {np.dtype("uint8"): 2, np.dtype("int16"): 4, np.dtype("int32"): 8}

# Off-axis components below this fraction of the column norm are treated as
# float noise rather than an oblique orientation.
_AXIS_ALIGN_TOL = 1e-3


def _maybe_decompress(raw: bytes) -> bytes:
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise VolumeFormatError(f"corrupt gzip stream: {exc}") from exc
    return raw


def _quaternion_rotation(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = float(np.sqrt(a2)) if a2 > 0 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c],
        ]
    )
    r[:, 2] *= qfac
    return r


def _check_axis_aligned(rotation: np.ndarray) -> None:
    """Reject volumes whose grid axes are not parallel to world axes.

    Per-axis flips and permutations pass; oblique rotations fail. Labels are
    never reoriented, so anything beyond axis alignment would silently skew
    world bookkeeping.
    """
    rows = []
    for j in range(3):
        col = rotation[:, j]
        norm = float(np.linalg.norm(col))
        if norm == 0.0:
            raise VolumeFormatError("corrupt header: degenerate orientation matrix")
        dominant = int(np.argmax(np.abs(col)))
        off = np.delete(np.abs(col), dominant)
        if (off > _AXIS_ALIGN_TOL * norm).any():
            raise VolumeFormatError(
                "volume is not axis-aligned; oblique orientations are not supported"
            )
        rows.append(dominant)
    if len(set(rows)) != 3:
        raise VolumeFormatError("corrupt header: orientation matrix is singular")


def _parse_nifti(raw: bytes, path: str) -> LabelVolume:
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        (be_size,) = struct.unpack_from(">i", raw, 0)
        if be_size == NIFTI_HEADER_SIZE:
            raise VolumeFormatError(f"{path}: big-endian NIfTI files are not supported")
        raise VolumeFormatError(f"{path}: corrupt header (sizeof_hdr={sizeof_hdr})")

    magic = raw[344:348]
    if magic == NIFTI_MAGIC_PAIR:
        raise VolumeFormatError(f"{path}: detached .hdr/.img pairs are not supported")
    if magic != NIFTI_MAGIC_SINGLE:
        raise VolumeFormatError(f"{path}: not a NIfTI-1 single file (magic={magic!r})")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: corrupt header (dim[0]={ndim})")
    if ndim < 3:
        raise VolumeFormatError(f"{path}: expected a 3-D volume, got {ndim}-D")
    if any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise VolumeFormatError(f"{path}: volumes with a time/vector axis are not supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: corrupt header (dims {nx}x{ny}x{nz})")

    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    dtype = _NIFTI_DTYPES.get(datatype)
    if dtype is None:
        raise VolumeFormatError(
            f"{path}: voxel datatype code {datatype} is not an accepted integer type"
        )
    if bitpix != dtype.itemsize * 8:
        raise VolumeFormatError(f"{path}: corrupt header (bitpix={bitpix} for datatype {datatype})")

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise VolumeFormatError(f"{path}: corrupt header (pixdim {spacing})")

    (vox_offset_f,) = struct.unpack_from("<f", raw, 108)
    vox_offset = int(round(vox_offset_f))
    if vox_offset < NIFTI_HEADER_SIZE + 4:
        raise VolumeFormatError(f"{path}: corrupt header (vox_offset={vox_offset_f})")

    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise VolumeFormatError(
            f"{path}: intensity scaling (slope={scl_slope}, inter={scl_inter}) "
            "is not meaningful for label volumes"
        )

    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    if sform_code > 0:
        srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=float).reshape(3, 4)
        rotation = srow[:, :3]
        origin = tuple(float(v) for v in srow[:, 3])
    elif qform_code > 0:
        qb, qc, qd = struct.unpack_from("<3f", raw, 256)
        qx, qy, qz = struct.unpack_from("<3f", raw, 268)
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        rotation = _quaternion_rotation(qb, qc, qd, qfac) * np.asarray(spacing)
        origin = (float(qx), float(qy), float(qz))
    else:
        rotation = np.diag(spacing)
        origin = (0.0, 0.0, 0.0)
    _check_axis_aligned(rotation)

    nvox = nx * ny * nz
    need = nvox * dtype.itemsize
    if len(raw) - vox_offset < need:
        raise VolumeFormatError(
            f"{path}: corrupt payload (header declares {nvox} voxels, "
            f"{len(raw) - vox_offset} bytes available)"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=nvox, offset=vox_offset)
    labels = flat.reshape((nx, ny, nz), order="F").copy()
    if labels.size and int(labels.min()) < 0:
        raise VolumeFormatError(f"{path}: negative voxel values are not valid labels")

    return LabelVolume(
        labels=labels,
        spacing=tuple(float(s) for s in spacing),
        origin=origin,
    )


def _pack_nifti(v: LabelVolume) -> bytes:
    labels = np.asarray(v.labels)
    dtype = labels.dtype.newbyteorder("=")
    code = _NIFTI_CODES.get(np.dtype(dtype))
    if code is None:
        # Internal arrays may be wider; narrow to the smallest accepted type.
        vmax = int(labels.max()) if labels.size else 0
        if vmax < 2**8:
            dtype, code = np.dtype("uint8"), 2
        elif vmax < 2**15:
            dtype, code = np.dtype("int16"), 4
        elif vmax < 2**31:
            dtype, code = np.dtype("int32"), 8
        else:
            raise VolumeFormatError(f"label values up to {vmax} do not fit NIfTI integer types")
        labels = labels.astype(dtype)

    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin

    hdr = bytearray(NIFTI_HEADER_SIZE + 4)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    hdr[38] = ord("r")  # regular, per convention
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_HEADER_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: millimetres
    descrip = b"volseg-eval"
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = NIFTI_MAGIC_SINGLE

    payload = np.asarray(labels, dtype=dtype).tobytes(order="F")
    return bytes(hdr) + payload


def _parse_raw(raw: bytes, path: str) -> LabelVolume:
    if len(raw) < RAW_HEADER.size:
        raise VolumeFormatError(f"{path}: file shorter than a raw-volume header")
    magic, nx, ny, nz, sx, sy, sz = RAW_HEADER.unpack_from(raw, 0)
    if magic != RAW_MAGIC:
        raise VolumeFormatError(f"{path}: bad raw-volume magic {magic!r}")
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: corrupt header (dims {nx}x{ny}x{nz})")
    if any(not np.isfinite(s) or s <= 0 for s in (sx, sy, sz)):
        raise VolumeFormatError(f"{path}: corrupt header (spacing {(sx, sy, sz)})")
    nvox = nx * ny * nz
    if len(raw) - RAW_HEADER.size < nvox:
        raise VolumeFormatError(
            f"{path}: corrupt payload (header declares {nvox} voxels, "
            f"{len(raw) - RAW_HEADER.size} bytes available)"
        )
    flat = np.frombuffer(raw, dtype=np.uint8, count=nvox, offset=RAW_HEADER.size)
    labels = flat.reshape((nx, ny, nz), order="F").copy()
    return LabelVolume(labels=labels, spacing=(sx, sy, sz))


def _pack_raw(v: LabelVolume) -> bytes:
    labels = np.asarray(v.labels)
    if labels.size and int(labels.max()) > 255:
        raise VolumeFormatError("raw container stores one byte per voxel; label > 255")
    nx, ny, nz = v.dims
    header = RAW_HEADER.pack(RAW_MAGIC, nx, ny, nz, *v.spacing)
    return header + labels.astype(np.uint8).tobytes(order="F")


def load_volume(path: str | os.PathLike) -> LabelVolume:
    """Load a label volume, sniffing the container from the file content."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise
    raw = _maybe_decompress(raw)
    if raw[: len(RAW_MAGIC)] == RAW_MAGIC:
        return _parse_raw(raw, path)
    if len(raw) >= 4 and struct.unpack_from("<i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        return _parse_nifti(raw, path)
    if len(raw) >= 4 and struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: big-endian NIfTI files are not supported")
    raise VolumeFormatError(f"{path}: unsupported volume format")


def save_volume(path: str | os.PathLike, v: LabelVolume) -> None:
    """Write `v` in the container implied by the path suffix (.nii, .nii.gz, .rvol)."""
    path = os.fspath(path)
    lower = path.lower()
    if lower.endswith(".nii.gz"):
        blob = gzip.compress(_pack_nifti(v), mtime=0)
    elif lower.endswith(".nii"):
        blob = _pack_nifti(v)
    elif lower.endswith(".rvol"):
        blob = _pack_raw(v)
    else:
        raise VolumeFormatError(f"{path}: unsupported output suffix (use .nii, .nii.gz, .rvol)")
    with open(path, "wb") as fh:
        fh.write(blob)


def container_suffix(path: str | os.PathLike) -> str:
    """The container suffix of `path` (".nii.gz", ".nii" or ".rvol")."""
    lower = os.fspath(path).lower()
    for suffix in (".nii.gz", ".nii", ".rvol"):
        if lower.endswith(suffix):
            return suffix
    raise VolumeFormatError(f"{path}: unrecognized container suffix")
