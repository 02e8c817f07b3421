"""Binary concept-bundle files (``.cafb``).

Layout, all integers and floats little-endian::

    "CAFB" | u32 version=1 | u32 record_count | u32 D_in | u32 H | u32 W
    per record:
        u32 patient_id | u32 image_id | i32 label | u32 n_real
        D_in x f32 global feature
        per concept: D_in x f32 feature | 4 x f32 bbox | u32 rle_len | rle_len x u32 runs
    u32 CRC32 of every preceding byte

With ``D_in == 0`` features live in a sidecar directory ``<file>.crops/``
holding raw little-endian f32 arrays: ``p{pid}_i{iid}_global.f32`` (H x W x 3)
and ``p{pid}_i{iid}_c{j}.f32`` (c x c x 3).
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .types import ConceptBundle, ConceptRecord

MAGIC = b"CAFB"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
RECORD = struct.Struct("<IIiI")
RLE_LEN = struct.Struct("<I")


class BundleFormatError(ValueError):
    code = "FORMAT"


class BadMagicError(BundleFormatError):
    code = "BAD_MAGIC"


class VersionMismatchError(BundleFormatError):
    code = "VERSION_MISMATCH"


class TruncatedPayloadError(BundleFormatError):
    code = "TRUNCATED"


class ChecksumError(BundleFormatError):
    code = "CHECKSUM"


def sidecar_dir(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".crops")


def _d_in(bundles: Sequence[ConceptBundle]) -> int:
    dims = {b.global_source.shape for b in bundles}
    if len(dims) != 1:
        raise ValueError(f"bundles disagree on global feature shape: {sorted(dims)}")
    shape = dims.pop()
    return int(shape[0]) if len(shape) == 1 else 0


def encode_bundles(bundles: Sequence[ConceptBundle]) -> bytes:
    if not bundles:
        raise ValueError("need at least one bundle")
    grids = {tuple(b.grid) for b in bundles}
    if len(grids) != 1:
        raise ValueError(f"bundles come from different image grids: {sorted(grids)}")
    H, W = grids.pop()
    d_in = _d_in(bundles)
    parts = [HEADER.pack(MAGIC, VERSION, len(bundles), d_in, H, W)]
    for b in bundles:
        parts.append(RECORD.pack(b.patient_id, b.image_id, b.label, b.n_real))
        if d_in:
            parts.append(np.asarray(b.global_source, dtype="<f4").tobytes())
        for c in b.concepts:
            if d_in:
                if c.feature.shape != (d_in,):
                    raise ValueError(f"concept feature shape {c.feature.shape} != ({d_in},)")
                parts.append(np.asarray(c.feature, dtype="<f4").tobytes())
            parts.append(np.asarray(c.bbox, dtype="<f4").tobytes())
            runs = np.asarray(c.mask_rle, dtype="<u4")
            parts.append(RLE_LEN.pack(runs.size))
            parts.append(runs.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def write_bundle_file(bundles: Sequence[ConceptBundle], path) -> Path:
    path = Path(path)
    data = encode_bundles(bundles)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    if _d_in(bundles) == 0:
        side = sidecar_dir(path)
        side.mkdir(exist_ok=True)
        for b in bundles:
            stem = f"p{b.patient_id}_i{b.image_id}"
            (side / f"{stem}_global.f32").write_bytes(np.asarray(b.global_source, "<f4").tobytes())
            for j, c in enumerate(b.concepts):
                (side / f"{stem}_c{j}.f32").write_bytes(np.asarray(c.feature, "<f4").tobytes())
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"payload ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=dtype).copy()


def decode_bundles(data: bytes, sidecar: Path | None = None) -> list[ConceptBundle]:
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    _, version, count, d_in, H, W = HEADER.unpack(r.take(HEADER.size))
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {VERSION}")
    bundles = []
    for _ in range(count):
        pid, iid, label, n_real = RECORD.unpack(r.take(RECORD.size))
        glob = r.array("<f4", d_in) if d_in else None
        concepts = []
        for _ in range(n_real):
            feat = r.array("<f4", d_in) if d_in else None
            bbox = tuple(int(v) for v in r.array("<f4", 4))
            (rle_len,) = RLE_LEN.unpack(r.take(RLE_LEN.size))
            concepts.append(ConceptRecord(feat, bbox, r.array("<u4", rle_len)))
        bundles.append(ConceptBundle(pid, iid, label, glob, concepts, (H, W)))
    end = r.pos
    (crc,) = struct.unpack("<I", r.take(4))
    if r.pos != len(data):
        raise BundleFormatError(f"{len(data) - r.pos} unexpected trailing bytes")
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumError("CRC32 mismatch")
    if d_in == 0:
        if sidecar is None:
            raise BundleFormatError("raw-crop bundle file needs its sidecar directory")
        _load_sidecar(bundles, sidecar)
    return bundles


def _load_sidecar(bundles: list[ConceptBundle], side: Path) -> None:
    for b in bundles:
        stem = f"p{b.patient_id}_i{b.image_id}"
        H, W = b.grid
        b.global_source = np.fromfile(side / f"{stem}_global.f32", dtype="<f4").reshape(H, W, 3)
        for j, c in enumerate(b.concepts):
            flat = np.fromfile(side / f"{stem}_c{j}.f32", dtype="<f4")
            size = int(round((flat.size / 3) ** 0.5))
            c.feature = flat.reshape(size, size, 3)


def read_bundle_file(path) -> list[ConceptBundle]:
    path = Path(path)
    return decode_bundles(path.read_bytes(), sidecar_dir(path))
