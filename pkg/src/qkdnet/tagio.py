"""Bit-exact binary persistence for detection time tags.

File layout (little-endian, no padding):

    offset  size  field
    0       4     magic  b"QNT1"
    4       2     version (currently 1)
    6       2     user_id
    8       1     merged_flag (1 = detector ids stripped)
    9       8     record_count
    17      8     duration_ps
    25      ...   records

Records are 8 bytes (u64 timestamp) when merged, 9 bytes (u64 timestamp +
u8 detector id) otherwise, with non-decreasing timestamps.  Fixed-width
records keep random access O(1) and let large files be scanned in
constant-memory chunks.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"QNT1"
VERSION = 1

_HEADER = struct.Struct("<4sHHBQQ")
HEADER_SIZE = _HEADER.size  # 25 bytes

_MERGED_DTYPE = np.dtype("<u8")
_PRIVATE_DTYPE = np.dtype([("t", "<u8"), ("d", "u1")])

_CHUNK_RECORDS = 1 << 18


class TagFileError(Exception):
    """Base for all tag-file format errors."""


class BadMagic(TagFileError):
    """File does not start with a supported QNT header."""


class CountMismatch(TagFileError):
    """Header record count disagrees with the payload."""


class TruncatedFile(TagFileError):
    """File ends mid-header or mid-record."""


class UnsortedInput(TagFileError):
    """Timestamps are not non-decreasing."""


@dataclass(frozen=True)
class TagFileHeader:
    user_id: int
    merged: bool
    record_count: int
    duration_ps: int
    version: int = VERSION

    @property
    def record_size(self) -> int:
        return 8 if self.merged else 9

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.version, self.user_id, 1 if self.merged else 0,
            self.record_count, self.duration_ps,
        )


def write_stream(
    path: str | Path,
    user_id: int,
    timestamps: np.ndarray,
    detectors: np.ndarray | None = None,
    *,
    duration_ps: int = 0,
) -> TagFileHeader:
    """Write a tag stream; pass ``detectors=None`` for a merged file.

    Timestamps must be non-decreasing and non-negative.  The file is
    written to a temp name and renamed into place so readers never see a
    partial file.
    """
    ts = np.ascontiguousarray(timestamps, dtype=np.int64)
    if ts.size and (np.any(np.diff(ts) < 0)):
        raise UnsortedInput("timestamps must be non-decreasing")
    if ts.size and ts[0] < 0:
        raise UnsortedInput("timestamps must be non-negative")
    merged = detectors is None
    if not merged:
        det = np.ascontiguousarray(detectors, dtype=np.uint8)
        if det.shape != ts.shape:
            raise ValueError("timestamps and detectors must have equal length")

    header = TagFileHeader(
        user_id=user_id, merged=merged, record_count=int(ts.size),
        duration_ps=int(duration_ps),
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.pack())
        for lo in range(0, ts.size, _CHUNK_RECORDS):
            hi = min(lo + _CHUNK_RECORDS, ts.size)
            if merged:
                fh.write(ts[lo:hi].astype(_MERGED_DTYPE).tobytes())
            else:
                block = np.empty(hi - lo, dtype=_PRIVATE_DTYPE)
                block["t"] = ts[lo:hi]
                block["d"] = det[lo:hi]
                fh.write(block.tobytes())
    os.replace(tmp, path)
    return header


def read_header(fh) -> TagFileHeader:
    raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"file shorter than the {HEADER_SIZE}-byte header")
    magic, version, user_id, merged_flag, count, duration = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadMagic(f"unsupported version {version}")
    if merged_flag not in (0, 1):
        raise BadMagic(f"bad merged flag {merged_flag}")
    return TagFileHeader(
        user_id=user_id, merged=bool(merged_flag), record_count=count,
        duration_ps=duration, version=version,
    )


def iter_records(path: str | Path) -> Iterator[tuple[TagFileHeader, np.ndarray, np.ndarray | None]]:
    """Yield (header, timestamps, detectors) in constant-memory chunks.

    Each yielded chunk is validated for ordering against the previous one;
    format errors raise the typed exceptions of this module.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header = read_header(fh)
        payload = path.stat().st_size - HEADER_SIZE
        expected = header.record_count * header.record_size
        if payload < expected or payload % header.record_size != 0:
            raise TruncatedFile(
                f"payload is {payload} bytes, {expected} expected for {header.record_count} records"
            )
        if payload > expected:
            raise CountMismatch(
                f"payload holds {payload // header.record_size} records, header says {header.record_count}"
            )
        last = -1
        remaining = header.record_count
        while remaining > 0:
            n = min(remaining, _CHUNK_RECORDS)
            raw = fh.read(n * header.record_size)
            if len(raw) < n * header.record_size:
                raise TruncatedFile("file ends mid-record")
            if header.merged:
                ts = np.frombuffer(raw, dtype=_MERGED_DTYPE).astype(np.int64)
                det = None
            else:
                block = np.frombuffer(raw, dtype=_PRIVATE_DTYPE)
                ts = block["t"].astype(np.int64)
                det = block["d"].copy()
            if ts.size:
                if ts[0] < last or np.any(np.diff(ts) < 0):
                    raise UnsortedInput("timestamps decrease inside the file")
                last = int(ts[-1])
            remaining -= n
            yield header, ts, det


def read_stream(path: str | Path) -> tuple[TagFileHeader, np.ndarray, np.ndarray | None]:
    """Read and validate a whole tag file.

    Returns (header, timestamps int64, detectors uint8 or None).
    """
    chunks_ts: list[np.ndarray] = []
    chunks_det: list[np.ndarray] = []
    header = None
    for header, ts, det in iter_records(path):
        chunks_ts.append(ts)
        if det is not None:
            chunks_det.append(det)
    if header is None:
        # zero records: the generator validated the file but never yielded
        with open(path, "rb") as fh:
            header = read_header(fh)
    ts = np.concatenate(chunks_ts) if chunks_ts else np.empty(0, dtype=np.int64)
    det = np.concatenate(chunks_det) if chunks_det else None
    if not header.merged and det is None:
        det = np.empty(0, dtype=np.uint8)
    return header, ts, det


def export_csv(path_in: str | Path, path_out: str | Path) -> None:
    """Debug CSV dump of a tag file (timestamp_ps[, detector])."""
    header, ts, det = read_stream(path_in)
    with open(path_out, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header.merged:
            writer.writerow(["timestamp_ps"])
            writer.writerows([int(t)] for t in ts)
        else:
            writer.writerow(["timestamp_ps", "detector"])
            writer.writerows([int(t), int(d)] for t, d in zip(ts, det))
