"""Minimal FITS primary-HDU codec, scan-directory import and the ``.spa`` archive.

FITS support covers a single primary HDU with BITPIX 16, -32 or -64.
Header cards are kept verbatim so a parsed file re-encodes byte for byte.

``.spa`` archive layout (little-endian)::

    b"SPA1"  u32 version (1)
    u32 len  metadata JSON (UTF-8): {"metadata": {...}, "grid": {...}}
    u32 width  u32 height  u32 n_points
    f64 I cube, then f64 V cube; each cube is n_points wavelength planes,
        every plane height rows of width values
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import math
import os
import re
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (BadMagic, ChecksumMismatch, EmptyDirectory, FormatError, InconsistentShapes,
                     MissingEND, ShapeMismatch, Truncated, UnsupportedBITPIX, VersionUnsupported)
from .spectra import MapMetadata, SPMap, WavelengthGrid

BLOCK = 2880
CARD = 80
BITPIX_DTYPES = {16: ">i2", -32: ">f4", -64: ">f8"}


# -- header cards ----------------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, bool):
        return f"{'T' if value else 'F':>20}"
    if isinstance(value, (int, np.integer)):
        return f"{int(value):>20}"
    if isinstance(value, (float, np.floating)):
        text = repr(float(value)).upper()
        if "E" not in text and "." not in text:
            text += ".0"
        return f"{text:>20}"
    s = str(value).replace("'", "''")
    return f"'{s:<8}'"


def make_card(key: str, value=None, comment: str | None = None) -> str:
    key = key.upper()
    if len(key) > 8:
        raise ValueError(f"FITS keyword too long: {key!r}")
    if key in ("END", "COMMENT", "HISTORY", ""):
        text = f"{key:<8}" + ("" if value is None else str(value))
    else:
        text = f"{key:<8}= {_format_value(value)}"
        if comment:
            text += f" / {comment}"
    if len(text) > CARD:
        raise ValueError(f"card longer than 80 characters: {text!r}")
    return f"{text:<80}"


_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([ED][+-]?\d+)?$", re.I)


def parse_card_value(card: str):
    """Value of a ``KEY = value / comment`` card, or ``None`` for commentary cards."""
    if card[8:10] != "= ":
        return None
    body = card[10:].strip()
    if body.startswith("'"):
        out, k = [], 1
        while k < len(body):
            ch = body[k]
            if ch == "'":
                if body[k + 1:k + 2] == "'":
                    out.append("'")
                    k += 2
                    continue
                break
            out.append(ch)
            k += 1
        return "".join(out).rstrip()
    body = body.split("/", 1)[0].strip()
    if body in ("T", "F"):
        return body == "T"
    if re.fullmatch(r"[+-]?\d+", body):
        return int(body)
    if _NUMBER.match(body):
        return float(body.upper().replace("D", "E"))
    return body


@dataclass
class FitsHeader:
    cards: list[str] = field(default_factory=list)

    def get(self, key: str, default=None):
        key = key.upper()
        for c in self.cards:
            if c[:8].rstrip() == key:
                v = parse_card_value(c)
                return default if v is None else v
        return default

    def __contains__(self, key: str) -> bool:
        return any(c[:8].rstrip() == key.upper() for c in self.cards)

    @property
    def bitpix(self) -> int:
        return int(self.get("BITPIX"))

    @property
    def naxes(self) -> tuple[int, ...]:
        """``(NAXIS1, ..., NAXISn)``; axis 1 varies fastest."""
        return tuple(int(self.get(f"NAXIS{k}", 0)) for k in range(1, int(self.get("NAXIS", 0)) + 1))

    @property
    def bscale(self) -> float:
        return float(self.get("BSCALE", 1.0))

    @property
    def bzero(self) -> float:
        return float(self.get("BZERO", 0.0))

    @classmethod
    def primary(cls, bitpix: int, naxes, bscale: float | None = None, bzero: float | None = None,
                extra: list[tuple] = ()) -> "FitsHeader":
        cards = [make_card("SIMPLE", True, "conforms to FITS standard"),
                 make_card("BITPIX", int(bitpix)),
                 make_card("NAXIS", len(naxes))]
        cards += [make_card(f"NAXIS{k}", int(n)) for k, n in enumerate(naxes, start=1)]
        if bscale is not None:
            cards.append(make_card("BSCALE", float(bscale)))
        if bzero is not None:
            cards.append(make_card("BZERO", float(bzero)))
        cards += [make_card(*item) for item in extra]
        cards.append(make_card("END"))
        return cls(cards)


@dataclass
class FitsArray:
    """Raw big-endian samples plus linear scaling; ``physical = bzero + bscale * raw``."""

    raw: np.ndarray
    bscale: float = 1.0
    bzero: float = 0.0

    @property
    def physical(self) -> np.ndarray:
        data = self.raw.astype(np.float64)
        if self.bscale != 1.0:
            data = data * self.bscale
        if self.bzero != 0.0:
            data = data + self.bzero
        return data

    @property
    def naxes(self) -> tuple[int, ...]:
        return tuple(reversed(self.raw.shape))

    @classmethod
    def from_physical(cls, data, bitpix: int = -32, bscale: float = 1.0, bzero: float = 0.0) -> "FitsArray":
        if bitpix not in BITPIX_DTYPES:
            raise UnsupportedBITPIX(f"BITPIX {bitpix} not supported")
        data = np.asarray(data, dtype=np.float64)
        raw = (data - bzero) / bscale if (bscale != 1.0 or bzero != 0.0) else data
        if bitpix == 16:
            raw = np.clip(np.rint(raw), -32768, 32767)
        return cls(raw.astype(BITPIX_DTYPES[bitpix]), bscale, bzero)


def _padded(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def parse_fits(buf: bytes) -> tuple[FitsHeader, FitsArray]:
    if len(buf) == 0 or len(buf) % BLOCK:
        raise Truncated(f"FITS length {len(buf)} is not a positive multiple of {BLOCK}")
    cards = []
    pos = 0
    while True:
        if pos >= len(buf):
            raise MissingEND("no END card in header")
        card = buf[pos:pos + CARD].decode("ascii", errors="replace")
        pos += CARD
        cards.append(card)
        if card[:8] == "END     ":
            break
    header = FitsHeader(cards)
    data_start = _padded(pos)
    if header.get("SIMPLE") is not True:
        raise FormatError("primary header must start with SIMPLE = T")
    bitpix = header.get("BITPIX")
    if bitpix not in BITPIX_DTYPES:
        raise UnsupportedBITPIX(f"BITPIX {bitpix} not supported (16, -32, -64 only)")
    naxes = header.naxes
    if any(n <= 0 for n in naxes):
        raise ShapeMismatch(f"non-positive axis length in {naxes}")
    count = int(np.prod(naxes)) if naxes else 0
    nbytes = count * abs(bitpix) // 8
    if data_start + nbytes > len(buf):
        raise Truncated("data section shorter than NAXISn imply")
    if data_start + _padded(nbytes) != len(buf):
        raise ShapeMismatch("bytes beyond the primary HDU (extensions are not supported)")
    raw = np.frombuffer(buf, dtype=BITPIX_DTYPES[bitpix], count=count, offset=data_start)
    raw = raw.reshape(tuple(reversed(naxes))) if naxes else raw
    return header, FitsArray(raw.copy(), header.bscale, header.bzero)


def write_fits(header: FitsHeader, arr: FitsArray) -> bytes:
    bitpix = header.bitpix
    if bitpix not in BITPIX_DTYPES:
        raise UnsupportedBITPIX(f"BITPIX {bitpix} not supported")
    if np.dtype(BITPIX_DTYPES[bitpix]) != arr.raw.dtype.newbyteorder(">"):
        raise InconsistentShapes(f"array dtype {arr.raw.dtype} does not match BITPIX {bitpix}")
    naxes = header.naxes
    if not naxes:
        if arr.raw.size:
            raise InconsistentShapes("header declares no data axes but the array is not empty")
    elif naxes != arr.naxes:
        raise InconsistentShapes(f"header axes {naxes} != array axes {arr.naxes}")
    if header.bscale != arr.bscale or header.bzero != arr.bzero:
        raise InconsistentShapes("header BSCALE/BZERO differ from array scaling")
    if not header.cards or header.cards[-1][:8] != "END     ":
        raise MissingEND("header must end with an END card")
    text = "".join(f"{c:<80}"[:80] for c in header.cards).encode("ascii")
    out = bytearray(text)
    out += b" " * (_padded(len(out)) - len(out))
    data = np.ascontiguousarray(arr.raw, dtype=BITPIX_DTYPES[bitpix]).tobytes()
    out += data + b"\0" * (_padded(len(data)) - len(data))
    return bytes(out)


def read_fits(path) -> tuple[FitsHeader, FitsArray]:
    return parse_fits(Path(path).read_bytes())


# -- scan directories ------------------------------------------------------------

class AxisConvention(str, Enum):
    """FITS axis order of a scan file, NAXIS1 first."""

    WAVE_STOKES_SLIT = "wave-stokes-slit"
    WAVE_SLIT_STOKES = "wave-slit-stokes"


def _scan_to_iv(phys: np.ndarray, convention: AxisConvention) -> tuple[np.ndarray, np.ndarray]:
    if phys.ndim != 3:
        raise InconsistentShapes(f"scan must be 3-D, got {phys.ndim}-D")
    if convention is AxisConvention.WAVE_STOKES_SLIT:
        # numpy shape (slit, stokes, wave)
        return phys[:, 0, :], phys[:, 3, :]
    return phys[0], phys[3]


def continuum_normalize(i: np.ndarray, v: np.ndarray, grid: WavelengthGrid):
    """Divide I and V of every spectrum by its continuum-window mean of I.

    Spectra whose continuum mean is not positive are zeroed (and later
    excluded as degenerate).
    """
    cont = i[..., grid.continuum_slice].mean(axis=-1, keepdims=True)
    ok = cont > 0
    safe = np.where(ok, cont, 1.0)
    return np.where(ok, i / safe, 0.0), np.where(ok, v / safe, 0.0)


def import_scan_directory(path, axis_convention: AxisConvention | str = AxisConvention.WAVE_STOKES_SLIT,
                          metadata: MapMetadata | None = None, grid: WavelengthGrid | None = None) -> SPMap:
    """Assemble an SPMap from one FITS file per slit position (lexicographic order)."""
    convention = AxisConvention(axis_convention)
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".fits", ".fts", ".fit"))
    if not files:
        raise EmptyDirectory(f"no FITS files in {path}")
    columns_i, columns_v = [], []
    shape = None
    first_header = None
    for f in files:
        header, arr = read_fits(f)
        try:
            i, v = _scan_to_iv(arr.physical, convention)
        except (InconsistentShapes, IndexError) as exc:
            raise InconsistentShapes(f"{f.name}: unexpected scan shape {arr.naxes}") from exc
        if shape is None:
            shape = i.shape
            first_header = header
        elif i.shape != shape:
            raise InconsistentShapes(f"{f.name}: slit x wavelength {i.shape} differs from {shape}")
        columns_i.append(i)
        columns_v.append(v)
    n_points = shape[1]
    if grid is None:
        grid = WavelengthGrid(n_points=n_points)
    elif grid.n_points != n_points:
        raise InconsistentShapes(f"files have {n_points} wavelengths, grid expects {grid.n_points}")
    if metadata is None:
        metadata = MapMetadata()
        exptime = first_header.get("EXPTIME")
        if isinstance(exptime, (int, float)) and exptime > 0:
            metadata = MapMetadata(metadata.observed_datetime, metadata.obs_mode, metadata.slit_scale,
                                   float(exptime), metadata.slit_step)
    i = np.stack(columns_i, axis=1)  # (slit, scan, wave)
    v = np.stack(columns_v, axis=1)
    i, v = continuum_normalize(i, v, grid)
    return SPMap(i, v, metadata, grid)


def export_scan_directory(m: SPMap, path, axis_convention=AxisConvention.WAVE_STOKES_SLIT,
                          bitpix: int = -32, prefix: str = "scan") -> list[Path]:
    """Write one FITS file per slit position with Q = U = 0."""
    convention = AxisConvention(axis_convention)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(m.width)))
    out = []
    for x in range(m.width):
        stokes = np.zeros((4, m.height, m.grid.n_points))
        stokes[0] = m.i[:, x]
        stokes[3] = m.v[:, x]
        data = stokes.transpose(1, 0, 2) if convention is AxisConvention.WAVE_STOKES_SLIT else stokes
        arr = FitsArray.from_physical(data, bitpix)
        header = FitsHeader.primary(bitpix, arr.naxes, extra=[("EXPTIME", m.metadata.integration_time)])
        f = path / f"{prefix}{x:0{digits}d}.fits"
        f.write_bytes(write_fits(header, arr))
        out.append(f)
    return out


# -- native archive --------------------------------------------------------------

SPA_MAGIC = b"SPA1"
SPA_VERSION = 1


def archive_bytes(m: SPMap) -> bytes:
    meta = json.dumps({"metadata": m.metadata.to_dict(), "grid": m.grid.to_dict()}, sort_keys=True).encode()
    out = bytearray(SPA_MAGIC)
    out += struct.pack("<I", SPA_VERSION)
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<3I", m.width, m.height, m.grid.n_points)
    for cube in (m.i, m.v):
        out += np.ascontiguousarray(cube.transpose(2, 0, 1), dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def archive_from_bytes(buf: bytes) -> SPMap:
    if len(buf) < 4 or buf[:4] != SPA_MAGIC:
        raise BadMagic("not an SPA1 archive")
    if len(buf) < 16:
        raise Truncated("archive shorter than its header")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != SPA_VERSION:
        raise VersionUnsupported(f"archive version {version} (supported: {SPA_VERSION})")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("archive CRC32 mismatch")
    (mlen,) = struct.unpack("<I", buf[8:12])
    pos = 12 + mlen
    meta = json.loads(buf[12:pos].decode("utf-8"))
    width, height, n = struct.unpack("<3I", buf[pos:pos + 12])
    pos += 12
    count = width * height * n
    if pos + 16 * count != len(buf) - 4:
        raise Truncated("payload size does not match dimensions")
    cubes = []
    for _ in range(2):
        cube = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(n, height, width)
        cubes.append(cube.transpose(1, 2, 0).astype(np.float64))
        pos += 8 * count
    return SPMap(cubes[0], cubes[1], MapMetadata.from_dict(meta["metadata"]), WavelengthGrid.from_dict(meta["grid"]))


def write_archive(m: SPMap, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(archive_bytes(m))
    os.replace(tmp, path)


def read_archive(path) -> SPMap:
    return archive_from_bytes(Path(path).read_bytes())


# -- ground-truth sidecar ---------------------------------------------------------

def write_truth(anomalies, path) -> None:
    doc = {"anomalies": [a.to_dict() if hasattr(a, "to_dict") else dict(a) for a in anomalies]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_truth(path) -> list[dict]:
    doc = json.loads(Path(path).read_text())
    out = []
    for a in doc["anomalies"]:
        out.append({"x": int(a["x"]), "y": int(a["y"]), "kind": str(a["kind"]),
                    "strength": float(a.get("strength", math.nan))})
    return out
