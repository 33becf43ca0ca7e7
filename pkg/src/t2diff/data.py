"""Interaction-log parsing, per-user behavior sequences, splits and persistence.

Raw user and item ids are remapped to contiguous indices starting at 1 (sorted
by raw id); index 0 is reserved for left-padding.
"""
from __future__ import annotations

import csv
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"T2DF"
VERSION = 1


class DataError(ValueError):
    """Base class for ingest failures."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class DatasetFormatError(DataError):
    pass


@dataclass(frozen=True, slots=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int
    label: int = 1


@dataclass(eq=False)
class BehaviorSequence:
    """One user's time-ordered items; the last element is the target.

    ``items[:n]`` is the behavior sequence, ``items[n]`` the next behavior.
    ``session_start`` indexes the first session element, so the session is
    ``items[session_start:n]`` and the history ``items[:session_start]``.
    """

    user_id: int
    items: np.ndarray
    timestamps: np.ndarray
    session_start: int | None = None

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.items.shape != self.timestamps.shape:
            raise ValueError("items and timestamps must be parallel")

    @property
    def n(self) -> int:
        return len(self.items) - 1

    @property
    def k(self) -> int:
        if self.session_start is None:
            raise ValueError("session not split yet")
        return self.n - self.session_start

    @property
    def sequence(self) -> np.ndarray:
        return self.items[: self.n]

    @property
    def history(self) -> np.ndarray:
        return self.items[: self.n - self.k]

    @property
    def session(self) -> np.ndarray:
        return self.items[self.n - self.k : self.n]

    @property
    def target(self) -> int:
        return int(self.items[-1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, BehaviorSequence):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and self.session_start == other.session_start
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.timestamps, other.timestamps)
        )


@dataclass
class DatasetSplit:
    train: list[BehaviorSequence] = field(default_factory=list)
    validation: list[BehaviorSequence] = field(default_factory=list)
    test: list[BehaviorSequence] = field(default_factory=list)
    item_count: int = 0
    user_count: int = 0
    excluded: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return (
            self.item_count == other.item_count
            and self.user_count == other.user_count
            and self.excluded == other.excluded
            and self.train == other.train
            and self.validation == other.validation
            and self.test == other.test
        )


# ---------------------------------------------------------------- parsing
def _remap(raw: list[tuple[int, int, int]]) -> list[Interaction]:
    users = {u: i for i, u in enumerate(sorted({r[0] for r in raw}), start=1)}
    items = {m: i for i, m in enumerate(sorted({r[1] for r in raw}), start=1)}
    out = [Interaction(users[u], items[m], ts) for u, m, ts in raw]
    log.info("parsed %d interactions: %d users / %d items", len(out), len(users), len(items))
    return out


def parse_ml1m(path) -> list[Interaction]:
    """Read MovieLens-1M ``ratings.dat`` (``UserID::MovieID::Rating::Timestamp``).

    Every rating counts as a positive interaction.
    """
    raw: list[tuple[int, int, int]] = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 '::' fields, got {len(parts)}")
            try:
                uid, mid, _rating, ts = (int(p) for p in parts)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer field in {line!r}") from exc
            if ts < 0:
                raise ParseError(f"{path}:{lineno}: negative timestamp")
            raw.append((uid, mid, ts))
    if not raw:
        raise EmptyDatasetError(f"{path}: no interactions")
    return _remap(raw)


KUAIRAND_COLUMNS = ("user_id", "video_id", "time_ms", "is_click", "tab")


def parse_kuairand(path) -> list[Interaction]:
    """Read a KuaiRand log CSV, keeping clicks in the main feed (``tab == 1``)."""
    raw: list[tuple[int, int, int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in KUAIRAND_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}")
        col = {c: header.index(c) for c in KUAIRAND_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = {c: int(float(row[i])) for c, i in col.items()}
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric or missing field") from exc
            if vals["tab"] != 1 or vals["is_click"] != 1:
                continue
            raw.append((vals["user_id"], vals["video_id"], vals["time_ms"] // 1000))
    if not raw:
        raise EmptyDatasetError(f"{path}: no positive tab=1 interactions")
    return _remap(raw)


# ---------------------------------------------------------------- sequences
def build_sequences(interactions: Iterable[Interaction], max_len: int = 50,
                    min_count: int = 5) -> list[BehaviorSequence]:
    """Group by user, sort by time (stable), drop sparse users, keep the tail.

    Users with fewer than ``min_count`` interactions are dropped before
    truncation to the most recent ``max_len + 1`` behaviors.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    per_user: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for it in interactions:
        per_user[it.user_id].append((it.timestamp, it.item_id))
    out = []
    for uid in sorted(per_user):
        events = per_user[uid]
        if len(events) < min_count:
            continue
        events.sort(key=lambda e: e[0])
        events = events[-(max_len + 1):]
        out.append(BehaviorSequence(uid, [e[1] for e in events], [e[0] for e in events]))
    if not out:
        log.warning("build_sequences produced no sequences (min_count=%d)", min_count)
    return out


def split_session(seq: BehaviorSequence, gap_seconds: int = 1800, k_max: int = 10) -> BehaviorSequence:
    """Return a copy with ``session_start`` set.

    The session is the longest suffix of the behavior sequence whose adjacent
    gaps are all below ``gap_seconds``, capped at ``k_max`` and never empty.
    """
    n = seq.n
    if n < 1:
        raise ValueError("sequence needs at least one behavior plus a target")
    ts = seq.timestamps[:n]
    k = 1
    while k < min(n, k_max) and ts[n - k] - ts[n - k - 1] < gap_seconds:
        k += 1
    return BehaviorSequence(seq.user_id, seq.items, seq.timestamps, n - k)


def leave_one_out(sequences: Sequence[BehaviorSequence], gap_seconds: int = 1800, k_max: int = 10,
                  item_count: int | None = None, user_count: int | None = None) -> DatasetSplit:
    """Last item is the test target, second to last the validation target.

    Training examples predict every earlier position ``i >= 1`` from the
    prefix ``items[:i]``.  Sequences shorter than 3 are excluded and counted.
    """
    split = DatasetSplit()
    max_item = 0
    for seq in sequences:
        items, ts = seq.items, seq.timestamps
        length = len(items)
        if length < 3:
            split.excluded += 1
            continue
        max_item = max(max_item, int(items.max()))
        for end in range(2, length - 1):
            split.train.append(split_session(BehaviorSequence(seq.user_id, items[:end], ts[:end]), gap_seconds, k_max))
        split.validation.append(
            split_session(BehaviorSequence(seq.user_id, items[: length - 1], ts[: length - 1]), gap_seconds, k_max)
        )
        split.test.append(split_session(BehaviorSequence(seq.user_id, items, ts), gap_seconds, k_max))
    if split.excluded:
        log.info("leave_one_out: excluded %d sequences shorter than 3", split.excluded)
    split.item_count = item_count if item_count is not None else max_item
    split.user_count = user_count if user_count is not None else len(split.test)
    return split


def dataset_stats(interactions: Sequence[Interaction]) -> dict:
    return {
        "users": len({i.user_id for i in interactions}),
        "items": len({i.item_id for i in interactions}),
        "interactions": len(interactions),
    }


# ---------------------------------------------------------------- persistence
# File: MAGIC | u8 version | u32 item_count | u32 user_count | u32 excluded
#       then for train, validation, test: u32 count, records.
# Record: u32 payload_len | payload
# Payload: u32 user | i32 session_start (-1 = unset) | u32 length | u32 items[] | i64 timestamps[]
_HEAD = struct.Struct("<III")
_REC = struct.Struct("<IiI")


def _encode(seq: BehaviorSequence) -> bytes:
    ss = -1 if seq.session_start is None else seq.session_start
    body = (
        _REC.pack(seq.user_id, ss, len(seq.items))
        + seq.items.astype("<u4").tobytes()
        + seq.timestamps.astype("<i8").tobytes()
    )
    return struct.pack("<I", len(body)) + body


def save_split(split: DatasetSplit, path) -> None:
    parts = [MAGIC, bytes([VERSION]), _HEAD.pack(split.item_count, split.user_count, split.excluded)]
    for part in (split.train, split.validation, split.test):
        parts.append(struct.pack("<I", len(part)))
        parts.extend(_encode(s) for s in part)
    Path(path).write_bytes(b"".join(parts))


def load_split(path) -> DatasetSplit:
    buf = Path(path).read_bytes()
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: not a processed dataset (bad magic {buf[:4]!r})")
    if buf[4] != VERSION:
        raise DatasetFormatError(f"{path}: version {buf[4]} unsupported (expected {VERSION})")
    try:
        item_count, user_count, excluded = _HEAD.unpack_from(buf, 5)
        off = 5 + _HEAD.size
        lists: list[list[BehaviorSequence]] = []
        for _ in range(3):
            (count,) = struct.unpack_from("<I", buf, off)
            off += 4
            seqs = []
            for _ in range(count):
                (plen,) = struct.unpack_from("<I", buf, off)
                off += 4
                if off + plen > len(buf):
                    raise DatasetFormatError(f"{path}: truncated record")
                uid, ss, length = _REC.unpack_from(buf, off)
                if _REC.size + 12 * length != plen:
                    raise DatasetFormatError(f"{path}: record length mismatch")
                p = off + _REC.size
                items = np.frombuffer(buf, "<u4", length, p).astype(np.int64)
                ts = np.frombuffer(buf, "<i8", length, p + 4 * length).astype(np.int64)
                seqs.append(BehaviorSequence(uid, items, ts, None if ss < 0 else ss))
                off += plen
            lists.append(seqs)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated file") from exc
    if off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return DatasetSplit(lists[0], lists[1], lists[2], item_count, user_count, excluded)


def prepare(interactions: Sequence[Interaction], max_len: int = 50, min_count: int = 5,
            gap_seconds: int = 1800, k_max: int = 10) -> DatasetSplit:
    """Full ingest pipeline after parsing."""
    stats = dataset_stats(interactions)
    seqs = build_sequences(interactions, max_len=max_len, min_count=min_count)
    return leave_one_out(seqs, gap_seconds, k_max, item_count=stats["items"], user_count=stats["users"])
