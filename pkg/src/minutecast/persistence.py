"""Write-ahead event log and atomic checkpoints.

The log is a single append-only file of length-prefixed records:
little-endian u32 payload length, the payload (canonical JSON of the
record body), and a little-endian u32 CRC32 of the payload. Sequence
numbers are gapless from 0. One writer owns the log; recovery runs with
no concurrent writer.

On recovery the log is scanned sequentially: a torn final record (an
incomplete frame, or a CRC-invalid frame at the very end) is truncated
away, while a CRC-invalid record followed by further parseable records
is interior corruption and fatal.

Checkpoints are ``ckpt-<sequence>.snap`` files written via temp file +
atomic rename, holding the model and feature-builder state blobs plus a
CRC over both. ``up_to_sequence`` is the last log record already
reflected in the snapshot (-1 for a snapshot of a fresh log).
"""

from __future__ import annotations

import json
import logging
import os
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import CorruptionError, StorageError
from .predictor import canonical_json

logger = logging.getLogger(__name__)

LOG_FILENAME = "events.log"
_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
_CKPT_RE = re.compile(r"^ckpt-(-?\d+)\.snap$")

KIND_CLOSED_WINDOW = "closed_window"
KIND_PREDICTION = "prediction"
KIND_ACTUAL = "actual"
KIND_CHECKPOINT_MARKER = "checkpoint_marker"
_KINDS = {KIND_CLOSED_WINDOW, KIND_PREDICTION, KIND_ACTUAL, KIND_CHECKPOINT_MARKER}


@dataclass(frozen=True)
class LogRecord:
    sequence_no: int
    kind: str
    data: dict
    crc: int


def _encode_record(sequence_no: int, kind: str, data: dict) -> bytes:
    payload = canonical_json({"seq": sequence_no, "kind": kind, "data": data})
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return _LEN.pack(len(payload)) + payload + _CRC.pack(crc)


def scan_log(path: str | Path) -> tuple[list[LogRecord], int, bool]:
    """Read all valid records; returns (records, valid_byte_length, torn).

    ``valid_byte_length`` is where a writer should truncate before
    appending. Raises CorruptionError for interior corruption or a
    sequence-number gap.
    """
    path = Path(path)
    if not path.exists():
        return [], 0, False
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read log {path}: {exc}") from exc

    records: list[LogRecord] = []
    offset = 0
    bad_at: Optional[int] = None  # offset of a complete-but-CRC-invalid frame
    bad_seq_hint: Optional[int] = None
    while offset < len(blob):
        if offset + _LEN.size > len(blob):
            break  # torn length prefix
        (length,) = _LEN.unpack_from(blob, offset)
        frame_end = offset + _LEN.size + length + _CRC.size
        if frame_end > len(blob):
            break  # torn payload/crc
        payload = blob[offset + _LEN.size : offset + _LEN.size + length]
        (crc,) = _CRC.unpack_from(blob, frame_end - _CRC.size)
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            if bad_at is None:
                bad_at = offset
                bad_seq_hint = len(records)
                offset = frame_end
                continue
            # Two bad frames in a row: framing is untrustworthy; treat
            # the first bad frame as the tear point.
            break
        try:
            body = json.loads(payload.decode("utf-8"))
            seq, kind, data = int(body["seq"]), str(body["kind"]), body["data"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptionError(f"{path}: undecodable record at byte {offset}") from exc
        if bad_at is not None:
            raise CorruptionError(
                f"{path}: CRC-invalid interior record (sequence {bad_seq_hint})"
            )
        if kind not in _KINDS:
            raise CorruptionError(f"{path}: unknown record kind {kind!r} at seq {seq}")
        if seq != len(records):
            raise CorruptionError(f"{path}: sequence gap: expected {len(records)}, got {seq}")
        records.append(LogRecord(sequence_no=seq, kind=kind, data=data, crc=crc))
        offset = frame_end

    valid_len = offset if bad_at is None else bad_at
    torn = valid_len < len(blob)
    if torn:
        logger.warning(
            "%s: truncating torn tail at byte %d (%d valid records)",
            path,
            valid_len,
            len(records),
        )
    return records, valid_len, torn


class EventLog:
    """Single-writer append-only log with per-window durability."""

    def __init__(
        self,
        path: str | Path,
        next_sequence: int,
        durable: bool = True,
        last_kind: Optional[str] = None,
    ):
        self.path = Path(path)
        self.next_sequence = next_sequence
        self.durable = durable
        self.last_kind = last_kind
        try:
            self._fh = open(self.path, "ab")
        except OSError as exc:
            raise StorageError(f"cannot open log {self.path}: {exc}") from exc

    @classmethod
    def create(cls, data_dir: str | Path, durable: bool = True) -> "EventLog":
        """Start a fresh log in ``data_dir`` (which must not already have one)."""
        path = Path(data_dir) / LOG_FILENAME
        if path.exists():
            raise StorageError(f"log already exists at {path}")
        path.parent.mkdir(parents=True, exist_ok=True)
        return cls(path, next_sequence=0, durable=durable)

    @classmethod
    def open_existing(
        cls, data_dir: str | Path, durable: bool = True
    ) -> tuple["EventLog", list[LogRecord]]:
        """Scan an existing log, truncate any torn tail, open for append."""
        path = Path(data_dir) / LOG_FILENAME
        records, valid_len, torn = scan_log(path)
        if torn:
            with open(path, "r+b") as fh:
                fh.truncate(valid_len)
                fh.flush()
                os.fsync(fh.fileno())
        log = cls(
            path,
            next_sequence=len(records),
            durable=durable,
            last_kind=records[-1].kind if records else None,
        )
        return log, records

    def append(self, kind: str, data: dict) -> int:
        """Append one record; returns its gapless sequence number.

        IO failure is fatal to the pipeline: the exception propagates
        and nothing is silently dropped.
        """
        if kind not in _KINDS:
            raise StorageError(f"unknown record kind {kind!r}")
        seq = self.next_sequence
        try:
            self._fh.write(_encode_record(seq, kind, data))
        except OSError as exc:
            raise StorageError(f"log append failed at sequence {seq}: {exc}") from exc
        self.next_sequence = seq + 1
        self.last_kind = kind
        return seq

    def sync(self, force: bool = False) -> None:
        """Flush to the OS; fsync in durable mode (or when forced)."""
        try:
            self._fh.flush()
            if self.durable or force:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StorageError(f"log sync failed: {exc}") from exc

    def close(self) -> None:
        try:
            self.sync()
        finally:
            self._fh.close()


def checkpoint_path(data_dir: str | Path, up_to_sequence: int) -> Path:
    return Path(data_dir) / f"ckpt-{up_to_sequence}.snap"


def write_checkpoint(
    data_dir: str | Path,
    up_to_sequence: int,
    model_blob: Optional[dict],
    feature_blob: dict,
    created_at: str,
) -> Path:
    """Atomically write a snapshot file; raises StorageError on failure.

    ``created_at`` is an ISO timestamp from the data clock (the
    triggering window), keeping checkpoint bytes deterministic.
    """
    inner = canonical_json([model_blob, feature_blob])
    doc = {
        "up_to_sequence": up_to_sequence,
        "created_at": created_at,
        "crc": zlib.crc32(inner) & 0xFFFFFFFF,
        "model_state": model_blob,
        "feature_state": feature_blob,
    }
    final = checkpoint_path(data_dir, up_to_sequence)
    tmp = final.with_suffix(".snap.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(canonical_json(doc))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, final)
        dir_fd = os.open(str(final.parent), os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
    except OSError as exc:
        raise StorageError(f"checkpoint write failed: {exc}") from exc
    return final


def read_checkpoint(path: str | Path) -> tuple[int, Optional[dict], dict, str]:
    """Validate and load one snapshot; raises CorruptionError if bad."""
    try:
        doc = json.loads(Path(path).read_bytes().decode("utf-8"))
        up_to = int(doc["up_to_sequence"])
        model_blob = doc["model_state"]
        feature_blob = doc["feature_state"]
        created_at = str(doc["created_at"])
        crc = int(doc["crc"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"unreadable checkpoint {path}: {exc}") from exc
    inner = canonical_json([model_blob, feature_blob])
    if zlib.crc32(inner) & 0xFFFFFFFF != crc:
        raise CorruptionError(f"checkpoint {path} failed CRC validation")
    return up_to, model_blob, feature_blob, created_at


def list_checkpoints(data_dir: str | Path) -> list[Path]:
    """Snapshot files, newest (highest sequence) first; temp files ignored."""
    found = []
    for name in os.listdir(data_dir):
        m = _CKPT_RE.match(name)
        if m:
            found.append((int(m.group(1)), Path(data_dir) / name))
    return [path for _, path in sorted(found, reverse=True)]


def load_latest_checkpoint(
    data_dir: str | Path,
) -> Optional[tuple[int, Optional[dict], dict]]:
    """Newest CRC-valid snapshot, falling back to older ones; None if none."""
    for path in list_checkpoints(data_dir):
        try:
            up_to, model_blob, feature_blob, _ = read_checkpoint(path)
            return up_to, model_blob, feature_blob
        except CorruptionError as exc:
            logger.warning("skipping bad checkpoint: %s", exc)
    return None


def recover(
    data_dir: str | Path,
    make_initial: Callable[[], object],
    restore: Callable[[Optional[dict], dict], object],
    apply: Callable[[object, LogRecord], object],
) -> tuple[object, list[LogRecord], int, int]:
    """Rebuild state: latest valid checkpoint plus log-suffix replay.

    ``restore`` turns snapshot blobs into live state, ``make_initial``
    builds fresh state when no usable snapshot exists, and ``apply``
    routes one log record through the same deterministic update path as
    live operation. Returns (state, all_log_records, next_sequence,
    loaded_checkpoint_sequence) with -1 when no snapshot was usable.
    """
    data_dir = Path(data_dir)
    records, _, _ = scan_log(data_dir / LOG_FILENAME)
    state = None
    up_to = -1
    for path in list_checkpoints(data_dir):
        try:
            seq, model_blob, feature_blob, _ = read_checkpoint(path)
        except CorruptionError as exc:
            logger.warning("skipping bad checkpoint: %s", exc)
            continue
        if seq >= len(records):
            # Snapshot taken just before a tail that was torn away; an
            # older snapshot plus replay reproduces the same state.
            logger.warning("checkpoint %s is ahead of the log; falling back", path)
            continue
        state = restore(model_blob, feature_blob)
        up_to = seq
        break
    if state is None:
        state = make_initial()
    for record in records[up_to + 1 :]:
        state = apply(state, record)
    return state, records, len(records), up_to
