"""On-disk formats: PGM (P5), raw float64 with JSON sidecar, minimal NIfTI-1, dataset manifests."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError

NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def save_pgm(path, image, bits: int = 16, vmax: float | None = None) -> Path:
    """Quantize a 2D image in [0, vmax] to 8 or 16 bits and write a binary PGM.

    vmax defaults to the image maximum (or 1 for an all-zero image) and is
    recorded in a header comment so load_pgm can undo the scaling.
    """
    if bits not in (8, 16):
        raise ParameterError(f"bits must be 8 or 16, got {bits}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ParameterError(f"PGM needs a 2D image, got shape {img.shape}")
    if vmax is None:
        vmax = float(img.max()) if img.size and img.max() > 0 else 1.0
    if not vmax > 0:
        raise ParameterError(f"vmax must be positive, got {vmax}")
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(img / vmax, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w = img.shape
    header = f"P5\n# vmax={vmax!r}\n{w} {h}\n{maxval}\n".encode("ascii")
    path = Path(path)
    path.write_bytes(header + data)
    return path


_PGM_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM, rescaling to [0, vmax] when the comment is present."""
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM")
    m = re.search(rb"#\s*vmax=(\S+)", buf[:256])
    vmax = float(m.group(1)) if m else 1.0
    pos, fields = 2, []
    while len(fields) < 3:
        tok = _PGM_TOKEN.match(buf, pos)
        if tok is None:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(int(tok.group(2)))
        pos = tok.end()
    w, h, maxval = fields
    pos += 1  # single whitespace before the raster
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    if len(buf) - pos < w * h * dtype.itemsize:
        raise DataError(f"{path}: truncated PGM raster")
    raw = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval * vmax


def save_raw(path, array, **meta) -> Path:
    """Write little-endian float64 bytes plus a .json sidecar with dims and metadata."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    path = Path(path)
    path.write_bytes(arr.tobytes())
    sidecar = {"dims": list(arr.shape), "dtype": "float64-le", **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    if not side.exists():
        raise DataError(f"{path}: missing sidecar {side.name}")
    meta = json.loads(side.read_text())
    dims = tuple(meta["dims"])
    buf = path.read_bytes()
    if len(buf) != 8 * int(np.prod(dims, dtype=np.int64)):
        raise DataError(f"{path}: size {len(buf)} does not match dims {dims}")
    return np.frombuffer(buf, dtype="<f8").reshape(dims).astype(np.float64), meta


def read_nifti(path) -> tuple[np.ndarray, dict]:
    """Read an uncompressed single-file NIfTI-1 volume.

    Supports uint8, int16 and float32 voxels in either byte order. Returns
    float64 data indexed [i, j, k, ...] with scl_slope/scl_inter applied
    (a zero slope means no scaling) and a small header dict.
    """
    buf = Path(path).read_bytes()
    if len(buf) < NIFTI_HEADER_SIZE:
        raise DataError(f"{path}: shorter than a NIfTI-1 header")
    for end in "<>":
        if struct.unpack_from(end + "i", buf, 0)[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise DataError(f"{path}: sizeof_hdr is not 348")
    if buf[344:348] != b"n+1\x00":
        raise DataError(f"{path}: bad magic {buf[344:348]!r}")
    dim = struct.unpack_from(end + "8h", buf, 40)
    datatype, bitpix = struct.unpack_from(end + "2h", buf, 70)
    pixdim = struct.unpack_from(end + "8f", buf, 76)
    vox_offset, slope, inter = struct.unpack_from(end + "3f", buf, 108)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise DataError(f"{path}: invalid dim[0] = {ndim}")
    if datatype not in NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported datatype {datatype}")
    dtype = np.dtype(end + NIFTI_DTYPES[datatype])
    if bitpix != 8 * dtype.itemsize:
        raise DataError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    offset = int(vox_offset)
    count = int(np.prod(shape, dtype=np.int64))
    if offset < NIFTI_HEADER_SIZE or len(buf) < offset + count * dtype.itemsize:
        raise DataError(f"{path}: voxel data truncated")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        data = data * np.float64(slope) + np.float64(inter)
    header = {"dims": list(shape), "datatype": datatype, "pixdim": list(pixdim[1 : ndim + 1]),
              "scl_slope": slope, "scl_inter": inter, "byteorder": end}
    return data, header


def write_manifest(path, samples: list[dict], **meta) -> Path:
    """samples: dicts with path, seed, kind and an optional gt_path."""
    for s in samples:
        missing = {"path", "seed", "kind"} - set(s)
        if missing:
            raise ParameterError(f"manifest entry missing {sorted(missing)}")
    path = Path(path)
    path.write_text(json.dumps({**meta, "samples": samples}, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    if not isinstance(doc.get("samples"), list):
        raise DataError(f"{path}: manifest has no sample list")
    return doc


def load_image(path) -> np.ndarray:
    """Load a 2D image by extension (.pgm, .raw/.f64, .nii)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return load_pgm(path)
    if suffix == ".nii":
        return read_nifti(path)[0]
    return load_raw(path)[0]
