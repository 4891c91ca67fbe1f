"""Minimal NIfTI-1 reader/writer.

Supports the single-file ``.nii`` layout (magic ``n+1\\0``), little-endian
only, datatype codes 2 (uint8), 4 (int16) and 16 (float32), optional gzip
container detected by its magic bytes.  The 348-byte header is kept
verbatim on read so that generated scans can byte-copy the metadata
(affine rows in particular) of a reference scan.
"""
from __future__ import annotations

import gzip
import io
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension indicator
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# offsets per the NIfTI-1 standard; little-endian throughout
HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == HEADER_SIZE

DTYPE_BY_CODE = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
CODE_BY_KIND = {"u1": 2, "i2": 4, "f4": 16}


class UnsupportedDataTypeError(FormatError):
    """NIfTI datatype code outside the supported set {2, 4, 16}."""


@dataclass
class Volume:
    """A voxel grid plus its NIfTI-1 metadata."""

    voxels: np.ndarray             # 3-D float32 grid, (nx, ny, nz)
    header_bytes: bytes            # verbatim 348-byte header
    affine: np.ndarray             # 4x4
    voxel_size_mm: tuple

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise FormatError(f"volume grid must be 3-D, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise FormatError("volume contains non-finite voxels")
        hdr = self.header
        dims = tuple(int(d) for d in hdr["dim"][1:4])
        if dims != self.voxels.shape:
            raise FormatError(
                f"header dims {dims} inconsistent with grid {self.voxels.shape}")

    @property
    def header(self) -> np.void:
        return np.frombuffer(self.header_bytes, dtype=HEADER_DTYPE)[0]

    @property
    def shape(self):
        return self.voxels.shape

    @classmethod
    def create(cls, voxels: np.ndarray,
               voxel_size_mm=(0.375, 0.375, 0.5)) -> "Volume":
        """Volume with a canonical fresh header (identity orientation scaled
        by the voxel size)."""
        voxels = np.asarray(voxels, dtype=np.float32)
        header = build_header(voxels.shape, voxels.dtype, voxel_size_mm)
        return cls(voxels=voxels, header_bytes=header,
                   affine=_affine_from_header(
                       np.frombuffer(header, dtype=HEADER_DTYPE)[0]),
                   voxel_size_mm=tuple(voxel_size_mm))


def build_header(shape, dtype, voxel_size_mm, descrip=b"alphagan3d") -> bytes:
    dtype = np.dtype(dtype)
    code = CODE_BY_KIND.get(dtype.str.lstrip("<>|="))
    if code is None:
        raise UnsupportedDataTypeError(f"cannot encode dtype {dtype}")
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = shape
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = DTYPE_BY_CODE[code].itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = voxel_size_mm
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = descrip
    hdr["sform_code"] = 1
    hdr["srow_x"] = [voxel_size_mm[0], 0, 0, 0]
    hdr["srow_y"] = [0, voxel_size_mm[1], 0, 0]
    hdr["srow_z"] = [0, 0, voxel_size_mm[2], 0]
    hdr["magic"] = MAGIC
    return hdr.tobytes()


def _affine_from_header(hdr) -> np.ndarray:
    affine = np.eye(4)
    if hdr["sform_code"] > 0:
        affine[0, :] = hdr["srow_x"]
        affine[1, :] = hdr["srow_y"]
        affine[2, :] = hdr["srow_z"]
    else:
        affine[0, 0], affine[1, 1], affine[2, 2] = hdr["pixdim"][1:4]
    return affine


def read_nifti(path) -> Volume:
    """Decode a NIfTI-1 file (optionally gzipped) into a Volume.

    Voxels are decoded per the header datatype and scaled by
    ``scl_slope``/``scl_inter`` when set; the header is retained verbatim.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip container: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    header_bytes = bytes(raw[:HEADER_SIZE])
    hdr = np.frombuffer(header_bytes, dtype=HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        if int(hdr["sizeof_hdr"]) == 1543569408:
            raise FormatError(f"{path}: big-endian NIfTI not supported")
        raise FormatError(f"{path}: bad sizeof_hdr {int(hdr['sizeof_hdr'])}")
    if bytes(hdr["magic"]) not in (MAGIC, b"n+1"):
        raise FormatError(f"{path}: bad magic {bytes(hdr['magic'])!r}")
    code = int(hdr["datatype"])
    if code not in DTYPE_BY_CODE:
        raise UnsupportedDataTypeError(f"{path}: unsupported datatype code {code}")
    ndim = int(hdr["dim"][0])
    if ndim < 3:
        raise FormatError(f"{path}: expected a 3-D volume, dim[0]={ndim}")
    shape = tuple(int(d) for d in hdr["dim"][1:1 + ndim])
    if any(d != 1 for d in shape[3:]):
        raise FormatError(f"{path}: higher-dimensional volume {shape} not supported")
    shape = shape[:3]
    dtype = DTYPE_BY_CODE[code]
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    end = offset + count * dtype.itemsize
    if len(raw) < end:
        raise FormatError(f"{path}: truncated voxel data ({len(raw)} < {end} bytes)")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    voxels = flat.reshape(shape, order="F").astype(np.float32)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        effective = slope if slope != 0.0 else 1.0
        voxels = (voxels * effective + inter).astype(np.float32)
    # dim[] may carry trailing extra axes; normalize the retained header to
    # the 3-D grid actually loaded so Volume invariants hold
    if ndim != 3:
        patched = np.frombuffer(bytearray(header_bytes), dtype=HEADER_DTYPE).copy()
        dim = patched[0]["dim"].copy()
        dim[0] = 3
        dim[4:] = 1
        patched[0]["dim"] = dim
        header_bytes = patched.tobytes()
        hdr = np.frombuffer(header_bytes, dtype=HEADER_DTYPE)[0]
    return Volume(voxels=voxels, header_bytes=header_bytes,
                  affine=_affine_from_header(hdr),
                  voxel_size_mm=tuple(float(p) for p in hdr["pixdim"][1:4]))


def write_nifti(volume: Volume, path, reference: Volume | None = None,
                dtype=None) -> None:
    """Write a Volume as NIfTI-1 (gzipped when the path ends in ``.gz``).

    With a reference, the output header is a byte-copy of the reference's
    except the fields describing the written grid (dim, datatype, bitpix,
    vox_offset and the scl scaling, since the buffer is written in final
    units); without one, a canonical identity-orientation header scaled by
    the voxel size is built.
    """
    voxels = volume.voxels
    if dtype is not None:
        voxels = voxels.astype(dtype)
    out_dtype = voxels.dtype.newbyteorder("<")
    code = CODE_BY_KIND.get(out_dtype.str.lstrip("<>|="))
    if code is None:
        raise UnsupportedDataTypeError(f"cannot encode dtype {out_dtype}")
    if reference is not None:
        ref_dims = tuple(int(d) for d in reference.header["dim"][1:4])
        if len(voxels.shape) != len(ref_dims):
            raise FormatError(
                f"grid {voxels.shape} incompatible with reference dims {ref_dims}")
        hdr_arr = np.frombuffer(bytearray(reference.header_bytes),
                                dtype=HEADER_DTYPE).copy()
    else:
        hdr_arr = np.frombuffer(
            bytearray(build_header(voxels.shape, out_dtype, volume.voxel_size_mm)),
            dtype=HEADER_DTYPE).copy()
    hdr = hdr_arr[0]
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = voxels.shape
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = out_dtype.itemsize * 8
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["magic"] = MAGIC
    hdr["sizeof_hdr"] = HEADER_SIZE
    payload = io.BytesIO()
    payload.write(hdr_arr.tobytes())
    payload.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
    payload.write(np.ascontiguousarray(voxels).astype(out_dtype).tobytes(order="F"))
    blob = payload.getvalue()
    path = str(path)
    if path.endswith(".gz"):
        with open(path, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)
