"""Bit-exact binary formats for cubes, height maps and split assignments.

All three formats share one layout so they are trivially parseable from any
language:

    magic bytes            "TCUB1\\n" | "CHM1\\n" | "SMAP1\\n"
    uint32 little-endian   byte length N of the JSON header
    N bytes UTF-8 JSON     shape and grid metadata
    payload                float32 LE (cube, chm) or uint8 (split),
                           row-major; cube order is [pol][x][y][z]

CHM payloads encode nodata as NaN.  Split payloads use one byte per pixel
(0=Train, 1=Val, 2=Test, 255=Excluded).  Headers carry no georeferencing;
pixel indices are the coordinate system.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    BandId,
    CanopyHeightMap,
    Polarization,
    SplitAssignment,
    TomoCube,
    check_chm,
    check_cube,
    check_split,
)
from .errors import (
    BadMagicError,
    HeaderParseError,
    IncompatibleSpacingError,
    InvariantViolationError,
    TruncatedPayloadError,
)

MAGIC_CUBE = b"TCUB1\n"
MAGIC_CHM = b"CHM1\n"
MAGIC_SPLIT = b"SMAP1\n"


@dataclass(frozen=True)
class AlignedScene:
    """A cube and height map cropped to their common (x, y) grid."""

    cube: TomoCube
    chm: CanopyHeightMap

    @property
    def nx(self) -> int:
        return self.cube.nx

    @property
    def ny(self) -> int:
        return self.cube.ny


def _write_blocks(path, magic: bytes, header: dict, payload: bytes) -> None:
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def _read_blocks(path, magic: bytes) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(magic):
        raise BadMagicError(f"{path}: expected magic {magic!r}")
    off = len(magic)
    if len(data) < off + 4:
        raise HeaderParseError(f"{path}: missing header length")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + hlen:
        raise HeaderParseError(f"{path}: header shorter than declared")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderParseError(f"{path}: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderParseError(f"{path}: header is not a JSON object")
    return header, data[off + hlen:]


def _header_fields(header: dict, required: tuple[str, ...], path) -> None:
    missing = [k for k in required if k not in header]
    if missing:
        raise HeaderParseError(f"{path}: header missing {missing}")


def _payload_array(payload: bytes, dtype, count: int, path) -> np.ndarray:
    expected = count * np.dtype(dtype).itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise HeaderParseError(
            f"{path}: payload longer than header declares ({len(payload)} > {expected})")
    return np.frombuffer(payload, dtype=dtype, count=count).copy()


# -- tomographic cube ---------------------------------------------------------

def write_cube(cube: TomoCube, path) -> None:
    check_cube(cube)
    header = {
        "band": cube.band.value,
        "pols": [p.value for p in cube.pols],
        "nx": cube.nx,
        "ny": cube.ny,
        "nz": cube.nz,
        "z_centers_m": np.asarray(cube.z_centers_m, dtype=np.float64).tolist(),
        "az_spacing_m": float(cube.az_spacing_m),
        "rng_spacing_m": float(cube.rng_spacing_m),
    }
    payload = np.ascontiguousarray(cube.intensity, dtype="<f4").tobytes()
    _write_blocks(path, MAGIC_CUBE, header, payload)


def read_cube(path) -> TomoCube:
    header, payload = _read_blocks(path, MAGIC_CUBE)
    _header_fields(header, ("band", "pols", "nx", "ny", "nz", "z_centers_m",
                            "az_spacing_m", "rng_spacing_m"), path)
    try:
        band = BandId(header["band"])
        pols = tuple(Polarization(p) for p in header["pols"])
        nx, ny, nz = int(header["nx"]), int(header["ny"]), int(header["nz"])
        z = np.asarray(header["z_centers_m"], dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise HeaderParseError(f"{path}: {exc}") from exc
    flat = _payload_array(payload, "<f4", len(pols) * nx * ny * nz, path)
    cube = TomoCube(band=band, pols=pols, z_centers_m=z,
                    intensity=flat.reshape(len(pols), nx, ny, nz),
                    az_spacing_m=float(header["az_spacing_m"]),
                    rng_spacing_m=float(header["rng_spacing_m"]))
    return check_cube(cube)


# -- canopy height map --------------------------------------------------------

def write_chm(chm: CanopyHeightMap, path, allow_negative: bool = False) -> None:
    """Write a 2D float grid; NaN encodes nodata.

    ``allow_negative`` relaxes the non-negative-height invariant so the same
    container can store signed error maps.
    """
    if not allow_negative:
        check_chm(chm)
    elif chm.heights_m.ndim != 2:
        raise InvariantViolationError("DimensionMismatch")
    header = {
        "nx": chm.nx,
        "ny": chm.ny,
        "az_spacing_m": float(chm.az_spacing_m),
        "rng_spacing_m": float(chm.rng_spacing_m),
    }
    payload = np.ascontiguousarray(chm.heights_m, dtype="<f4").tobytes()
    _write_blocks(path, MAGIC_CHM, header, payload)


def read_chm(path, allow_negative: bool = False) -> CanopyHeightMap:
    header, payload = _read_blocks(path, MAGIC_CHM)
    _header_fields(header, ("nx", "ny", "az_spacing_m", "rng_spacing_m"), path)
    nx, ny = int(header["nx"]), int(header["ny"])
    flat = _payload_array(payload, "<f4", nx * ny, path)
    chm = CanopyHeightMap(heights_m=flat.reshape(nx, ny),
                          az_spacing_m=float(header["az_spacing_m"]),
                          rng_spacing_m=float(header["rng_spacing_m"]))
    if not allow_negative:
        check_chm(chm)
    return chm


# -- split assignment ---------------------------------------------------------

def write_split(assignment: SplitAssignment, path) -> None:
    check_split(assignment)
    header = {"nx": assignment.nx, "ny": assignment.ny}
    payload = np.ascontiguousarray(assignment.labels, dtype=np.uint8).tobytes()
    _write_blocks(path, MAGIC_SPLIT, header, payload)


def read_split(path) -> SplitAssignment:
    header, payload = _read_blocks(path, MAGIC_SPLIT)
    _header_fields(header, ("nx", "ny"), path)
    nx, ny = int(header["nx"]), int(header["ny"])
    flat = _payload_array(payload, np.uint8, nx * ny, path)
    return check_split(SplitAssignment(labels=flat.reshape(nx, ny)))


# -- alignment ----------------------------------------------------------------

def align(cube: TomoCube, chm: CanopyHeightMap) -> AlignedScene:
    """Merge cube and height map on (x, y): crop both to the grid intersection.

    Both grids must share the pixel lattice origin and spacing; the output
    covers index ranges present in both inputs and no resampling is done.
    Nodata pixels of the height map persist inside the overlap.
    """
    if (abs(cube.az_spacing_m - chm.az_spacing_m) > 1e-9 * max(1.0, cube.az_spacing_m)
            or abs(cube.rng_spacing_m - chm.rng_spacing_m) > 1e-9 * max(1.0, cube.rng_spacing_m)):
        raise IncompatibleSpacingError(
            f"cube spacing ({cube.az_spacing_m}, {cube.rng_spacing_m}) != "
            f"chm spacing ({chm.az_spacing_m}, {chm.rng_spacing_m})")
    nx = min(cube.nx, chm.nx)
    ny = min(cube.ny, chm.ny)
    cropped_cube = cube
    if (nx, ny) != (cube.nx, cube.ny):
        cropped_cube = TomoCube(band=cube.band, pols=cube.pols,
                                z_centers_m=cube.z_centers_m,
                                intensity=np.ascontiguousarray(cube.intensity[:, :nx, :ny, :]),
                                az_spacing_m=cube.az_spacing_m,
                                rng_spacing_m=cube.rng_spacing_m)
    cropped_chm = chm
    if (nx, ny) != (chm.nx, chm.ny):
        cropped_chm = CanopyHeightMap(heights_m=np.ascontiguousarray(chm.heights_m[:nx, :ny]),
                                      az_spacing_m=chm.az_spacing_m,
                                      rng_spacing_m=chm.rng_spacing_m)
    return AlignedScene(cube=cropped_cube, chm=cropped_chm)
