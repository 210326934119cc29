"""Volume types and a strict, uncompressed NIfTI-1 reader/writer.

Arrays are stored with shape ``(nx, ny, nz)``; on disk the payload is
x-fastest, i.e. ``data.ravel(order="F")``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

PRE_RT = "pre"
MID_RT = "mid"

# NIfTI datatype code -> numpy dtype (little-endian base)
_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(endian: str) -> np.dtype:
    fields = []
    for f in _HEADER_FIELDS:
        name, code = f[0], f[1]
        if code[0] in "iuf" and code != "u1":
            code = endian + code
        fields.append((name, code) + tuple(f[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


class NiftiError(Exception):
    """Base class for NIfTI read/write failures."""


class NiftiFormatError(NiftiError):
    """Malformed header or payload; ``field`` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NiftiUnsupportedError(NiftiError):
    pass


class NiftiDataError(NiftiError):
    pass


Triple = Tuple[float, float, float]


@dataclass(eq=False)
class Volume:
    """3D scalar grid with voxel spacing and origin (both in mm)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError("origin must have three components")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def same_geometry(self, other: "Volume", atol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
        )

    def with_data(self, data: np.ndarray) -> "Volume":
        return type(self)(data, self.spacing, self.origin)


@dataclass(eq=False)
class LabelMap(Volume):
    """Integer grid over {0: background, 1: GTVp, 2: GTVn}."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 2):
            raise ValueError("label values must lie in {0, 1, 2}")
        if not np.array_equal(data, np.round(data)):
            raise ValueError("label values must be integers")
        self.data = data.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")

    def mask(self, cls: int) -> np.ndarray:
        return self.data == cls


@dataclass(eq=False)
class CaseRecord:
    """One patient timepoint. Priors are binary arrays on the image grid."""

    case_id: str
    image: Volume
    timepoint: str = MID_RT
    prior_gtvp: Optional[np.ndarray] = None
    prior_gtvn: Optional[np.ndarray] = None
    ground_truth: Optional[LabelMap] = None
    prior_image: Optional[Volume] = None
    patient_id: Optional[str] = None

    def __post_init__(self):
        if self.timepoint not in (PRE_RT, MID_RT):
            raise ValueError(f"timepoint must be {PRE_RT!r} or {MID_RT!r}")
        for name in ("prior_gtvp", "prior_gtvn"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m)
            if m.shape != self.image.dims:
                raise ValueError(f"{name} shape {m.shape} != image dims {self.image.dims}")
            setattr(self, name, (m > 0).astype(np.float32))
        if self.ground_truth is not None and self.ground_truth.dims != self.image.dims:
            raise ValueError("ground truth geometry differs from image geometry")
        if self.prior_image is not None and self.prior_image.dims != self.image.dims:
            raise ValueError("prior image geometry differs from image geometry")
        if self.patient_id is None:
            self.patient_id = self.case_id

    @property
    def has_priors(self) -> bool:
        return self.prior_gtvp is not None and self.prior_gtvn is not None

    def priors(self) -> np.ndarray:
        """Prior masks as a 2×X×Y×Z array; zeros when absent (pre-RT convention)."""
        shape = self.image.dims
        p = self.prior_gtvp if self.prior_gtvp is not None else np.zeros(shape, np.float32)
        n = self.prior_gtvn if self.prior_gtvn is not None else np.zeros(shape, np.float32)
        return np.stack([p, n]).astype(np.float32)


def _rotation_from_quaternion(b: float, c: float, d: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def _is_axis_aligned(m: np.ndarray, tol: float = 1e-4) -> bool:
    m = np.abs(np.asarray(m, dtype=np.float64))
    scale = m.max() if m.size else 1.0
    return all(int((row > tol * max(scale, 1e-12)).sum()) <= 1 for row in m)


def _parse_header(raw: bytes):
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("sizeof_hdr", f"file shorter than {HEADER_SIZE} bytes")
    for endian in ("<", ">"):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(endian))[0]
        if int(hdr["sizeof_hdr"]) == HEADER_SIZE:
            return hdr, endian
    raise NiftiFormatError("sizeof_hdr", "header size is not 348")


def read_nifti(path: Union[str, Path], kind: str = "auto") -> Volume:
    """Read an uncompressed NIfTI-1 file.

    ``kind`` is ``"auto"``, ``"image"`` or ``"label"``. In auto mode an
    integer-typed file whose values all lie in {0, 1, 2} loads as a LabelMap.
    With ``kind="label"`` integer values outside {0, 1, 2} are an error.
    """
    if kind not in ("auto", "image", "label"):
        raise ValueError(f"unknown kind {kind!r}")
    path = Path(path)
    raw = path.read_bytes()
    hdr, endian = _parse_header(raw)

    magic = bytes(hdr["magic"])
    if magic not in (b"n+1\x00", b"ni1\x00", b"n+1", b"ni1"):
        raise NiftiFormatError("magic", f"unrecognized magic {magic!r}")
    single_file = magic.startswith(b"n+1")

    code = int(hdr["datatype"])
    if code not in _DTYPES:
        raise NiftiUnsupportedError(f"datatype code {code} is not supported")
    dtype = _DTYPES[code].newbyteorder(endian) if _DTYPES[code].itemsize > 1 else _DTYPES[code]
    if int(hdr["bitpix"]) not in (0, dtype.itemsize * 8):
        raise NiftiFormatError("bitpix", f"{int(hdr['bitpix'])} disagrees with datatype {code}")

    dim = [int(v) for v in hdr["dim"]]
    if dim[0] not in (3, 4):
        raise NiftiFormatError("dim", f"dim[0]={dim[0]} must be 3 or 4")
    if dim[0] == 4 and dim[4] != 1:
        raise NiftiFormatError("dim", f"4th dimension must be 1, got {dim[4]}")
    shape = tuple(dim[1:4])
    if any(d < 1 for d in shape):
        raise NiftiFormatError("dim", f"non-positive dimension in {shape}")

    pixdim = [float(v) for v in hdr["pixdim"]]
    spacing = tuple(pixdim[1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise NiftiFormatError("pixdim", f"spacing {spacing} must be positive")
    origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))

    if int(hdr["qform_code"]) > 0:
        rot = _rotation_from_quaternion(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"])
        )
        if not _is_axis_aligned(rot):
            warnings.warn(f"{path.name}: non-axis-aligned qform ignored", stacklevel=2)
    if int(hdr["sform_code"]) > 0:
        srow = np.stack([hdr["srow_x"][:3], hdr["srow_y"][:3], hdr["srow_z"][:3]])
        if not _is_axis_aligned(srow):
            warnings.warn(f"{path.name}: non-axis-aligned sform ignored", stacklevel=2)

    nbytes = int(np.prod(shape)) * dtype.itemsize
    if single_file:
        offset = float(hdr["vox_offset"])
        if offset < HEADER_SIZE or offset != int(offset):
            raise NiftiFormatError("vox_offset", f"invalid offset {offset}")
        payload = raw[int(offset):]
    else:
        img_path = path.with_suffix(".img")
        if not img_path.exists():
            raise NiftiFormatError("magic", f"ni1 header without companion {img_path.name}")
        payload = img_path.read_bytes()
    if len(payload) != nbytes:
        raise NiftiFormatError(
            "dim", f"payload has {len(payload)} bytes, header implies {nbytes}"
        )

    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    is_int = dtype.kind in "iu"
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = data.astype(np.float64) * slope + inter
        is_int = False
    if dtype.kind == "f" or not is_int:
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.array(data, dtype=np.float64 if dtype == np.dtype("f8") else np.float32)
        if not np.all(np.isfinite(out)):
            raise NiftiDataError(f"{path.name}: non-finite voxel values")
    else:
        out = np.array(data)

    if kind == "label" or (kind == "auto" and is_int):
        if is_int and out.size and out.min() >= 0 and out.max() <= 2:
            return LabelMap(out, spacing, origin)
        if kind == "label":
            raise NiftiDataError(f"{path.name}: label values outside {{0, 1, 2}}")
    return Volume(out.astype(np.float32) if is_int else out, spacing, origin)


def write_nifti(v: Volume, path: Union[str, Path]) -> None:
    """Write ``v`` as a single-file little-endian NIfTI-1.

    LabelMaps are stored as uint8, Volumes as float32.
    """
    path = Path(path)
    if isinstance(v, LabelMap):
        code, arr = 2, v.data.astype(np.uint8)
    else:
        code, arr = 16, v.data.astype("<f4")
        if not np.all(np.isfinite(arr)):
            raise NiftiDataError("refusing to write non-finite voxel values")

    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *v.dims, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = arr.dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = v.origin
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    hdr["srow_x"] = [sx, 0, 0, ox]
    hdr["srow_y"] = [0, sy, 0, oy]
    hdr["srow_z"] = [0, 0, sz, oz]
    hdr["magic"] = b"n+1\x00"

    blob = hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + arr.tobytes(order="F")
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_binary_mask(path: Union[str, Path]) -> np.ndarray:
    """Load a mask file as a float32 {0,1} array (any non-zero is foreground)."""
    v = read_nifti(path)
    return (np.asarray(v.data) > 0).astype(np.float32)
