"""Utterance tables, SWGF feature files and dataset manipulation.

Table format (CSV)::

    utterance_id,system_id,mos
    sys000-utt000,sys000,3.25
    sys000-utt001,sys000,          <- empty mos: unlabeled

Feature format (SWGF, little-endian)::

    b"SWGF" | u8 version=1 | u32 count | u32 dim |
    count x ( u16 id_len | id_len UTF-8 bytes | dim x f64 )
"""
from __future__ import annotations

import csv
import io
import logging
import math
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptinessError, FormatError, IntegrityError, LabelError, RangeError

log = logging.getLogger(__name__)

MOS_LOW = 1.0
MOS_HIGH = 5.0
SWGF_MAGIC = b"SWGF"
SWGF_VERSION = 1
TABLE_HEADER = ("utterance_id", "system_id", "mos")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    system_id: str
    features: np.ndarray
    mos: float | None = None

    @property
    def labeled(self) -> bool:
        return self.mos is not None


@dataclass(frozen=True)
class Dataset:
    records: tuple[UtteranceRecord, ...]
    feature_dim: int
    name: str = "data"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [r.utterance_id for r in self.records]
        index = {uid: i for i, uid in enumerate(ids)}
        if len(index) != len(ids):
            dupes = sorted({u for u in ids if ids.count(u) > 1})
            raise IntegrityError(f"duplicate utterance ids in {self.name!r}: {dupes[:10]}")
        for r in self.records:
            if r.features.shape != (self.feature_dim,):
                raise FormatError(
                    f"{r.utterance_id}: feature length {r.features.shape} != {self.feature_dim}"
                )
            if r.mos is not None and not (MOS_LOW <= r.mos <= MOS_HIGH):
                raise RangeError(f"{r.utterance_id}: mos {r.mos} outside [1, 5]")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def ids(self) -> list[str]:
        return [r.utterance_id for r in self.records]

    def index_of(self, utterance_id: str) -> int:
        return self._index[utterance_id]

    def __contains__(self, utterance_id) -> bool:
        return utterance_id in self._index

    def features(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.feature_dim))
        return np.stack([r.features for r in self.records])

    def labels(self) -> np.ndarray:
        missing = [r.utterance_id for r in self.records if r.mos is None]
        if missing:
            raise LabelError(f"unlabeled records where labels are required: {missing[:10]}")
        return np.array([r.mos for r in self.records], dtype=np.float64)

    def labeled(self) -> Dataset:
        """The subset of records that carry a MOS label."""
        return replace(self, records=tuple(r for r in self.records if r.mos is not None))

    def subset(self, indices: Iterable[int], name: str | None = None) -> Dataset:
        return Dataset(
            tuple(self.records[i] for i in indices), self.feature_dim, name or self.name
        )


def make_dataset(
    ids: Sequence[str],
    systems: Sequence[str],
    features: np.ndarray,
    mos: Sequence[float | None] | None = None,
    name: str = "data",
) -> Dataset:
    features = np.asarray(features, dtype=np.float64)
    if mos is None:
        mos = [None] * len(ids)
    records = tuple(
        UtteranceRecord(u, s, features[i].copy(), None if m is None else float(m))
        for i, (u, s, m) in enumerate(zip(ids, systems, mos))
    )
    return Dataset(records, features.shape[1] if features.ndim == 2 else 0, name)


# --- table ---------------------------------------------------------------

def read_table(path: str | Path) -> list[tuple[str, str, float | None]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TABLE_HEADER:
            raise FormatError(f"{path}: header must be {','.join(TABLE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            uid, sid, mos_s = row
            mos_s = mos_s.strip()
            if mos_s:
                try:
                    mos = float(mos_s)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: mos {mos_s!r} is not a number") from None
                if not math.isfinite(mos) or not MOS_LOW <= mos <= MOS_HIGH:
                    raise RangeError(f"{path}:{lineno}: mos {mos} for {uid} outside [1, 5]")
            else:
                mos = None
            rows.append((uid, sid, mos))
    return rows


def format_table(rows: Iterable[tuple[str, str, float | None]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for uid, sid, mos in rows:
        w.writerow([uid, sid, "" if mos is None else repr(float(mos))])
    return buf.getvalue()


def write_table(path: str | Path, rows: Iterable[tuple[str, str, float | None]]) -> None:
    Path(path).write_text(format_table(rows), encoding="utf-8")


# --- SWGF features -------------------------------------------------------

def encode_features(ids: Sequence[str], features: np.ndarray) -> bytes:
    features = np.asarray(features, dtype="<f8")
    count = len(ids)
    dim = features.shape[1] if features.ndim == 2 else 0
    if features.shape[0] != count:
        raise FormatError(f"{count} ids but {features.shape[0]} feature rows")
    parts = [SWGF_MAGIC, struct.pack("<BII", SWGF_VERSION, count, dim)]
    for uid, row in zip(ids, features):
        raw = uid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"utterance id too long: {uid[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(row.tobytes())
    return b"".join(parts)


def decode_features(blob: bytes, source: str = "<bytes>") -> tuple[list[str], np.ndarray]:
    if blob[:4] != SWGF_MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}, expected {SWGF_MAGIC!r}")
    if len(blob) < 13:
        raise FormatError(f"{source}: truncated header")
    version, count, dim = struct.unpack_from("<BII", blob, 4)
    if version != SWGF_VERSION:
        raise FormatError(f"{source}: unsupported SWGF version {version}")
    pos = 13
    ids: list[str] = []
    out = np.empty((count, dim), dtype=np.float64)
    row_bytes = 8 * dim
    for i in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"{source}: payload ends inside record {i} (header says {count})")
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + n + row_bytes > len(blob):
            raise FormatError(
                f"{source}: record {i} is shorter than header dimension {dim} implies"
            )
        ids.append(blob[pos : pos + n].decode("utf-8"))
        pos += n
        out[i] = np.frombuffer(blob, dtype="<f8", count=dim, offset=pos)
        pos += row_bytes
    if pos != len(blob):
        raise FormatError(
            f"{source}: {len(blob) - pos} trailing bytes; payload does not match header dimension {dim}"
        )
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{source}: non-finite feature values")
    return ids, out


def read_features(path: str | Path) -> tuple[list[str], np.ndarray]:
    return decode_features(Path(path).read_bytes(), str(path))


def write_features(path: str | Path, ids: Sequence[str], features: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(ids, features))


# --- datasets ------------------------------------------------------------

def load_dataset(table_path: str | Path, features_path: str | Path, name: str | None = None) -> Dataset:
    """Join a table with its feature file; records keep table order."""
    rows = read_table(table_path)
    feat_ids, feats = read_features(features_path)
    where = {uid: i for i, uid in enumerate(feat_ids)}
    missing = [uid for uid, _, _ in rows if uid not in where]
    if missing:
        raise IntegrityError(
            f"{len(missing)} utterance(s) in {table_path} have no features in "
            f"{features_path}: {', '.join(missing[:20])}"
        )
    records = tuple(
        UtteranceRecord(uid, sid, feats[where[uid]].copy(), mos) for uid, sid, mos in rows
    )
    return Dataset(records, feats.shape[1], name or Path(table_path).stem)


def load_labels(table_path: str | Path, name: str | None = None) -> Dataset:
    """Table-only dataset (zero-dimensional features), enough for evaluation."""
    rows = read_table(table_path)
    empty = np.zeros(0)
    records = tuple(UtteranceRecord(uid, sid, empty, mos) for uid, sid, mos in rows)
    return Dataset(records, 0, name or Path(table_path).stem)


def save_dataset(d: Dataset, table_path: str | Path, features_path: str | Path) -> None:
    write_table(table_path, ((r.utterance_id, r.system_id, r.mos) for r in d.records))
    write_features(features_path, d.ids, d.features())


def filter_by_ids(d: Dataset, exclude: Iterable[str]) -> Dataset:
    exclude = set(exclude)
    unknown = exclude.difference(d.ids)
    if unknown:
        log.warning("%d excluded id(s) not present in %s: %s", len(unknown), d.name, sorted(unknown))
    kept = tuple(r for r in d.records if r.utterance_id not in exclude)
    if not kept:
        raise EmptinessError(f"filtering removed every record of {d.name!r}")
    return replace(d, records=kept)


def group_by_system(d: Dataset) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(d.records):
        groups.setdefault(r.system_id, []).append(i)
    return groups


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension standardisation with statistics from a training set."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, d: Dataset) -> Standardizer:
        x = d.features()
        if len(x) == 0:
            raise EmptinessError("cannot fit a standardizer on an empty dataset")
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        return cls(x.mean(axis=0), sd)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def apply(self, d: Dataset) -> Dataset:
        x = self.transform(d.features())
        return replace(
            d,
            records=tuple(replace(r, features=x[i]) for i, r in enumerate(d.records)),
        )

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> Standardizer:
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["scale"], dtype=np.float64))
