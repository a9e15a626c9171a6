"""Record schema, normalization, the EMR1 container, partitioning and
few-shot support selection.

EMR1 layout (little-endian)::

    header   b"EMR1" | u32 version | u64 record count
    record*  u32 presence bitmap | attribute block | u32 sample count | f32 I,Q pairs
    footer   u64 offset * N | u32 crc32 * N | u32 json length | json index
    trailer  u64 footer offset | u32 footer crc32 | b"EMR1"

The attribute block is fixed width: dataset name (32 bytes, utf-8, NUL
padded), sampling rate (f64), then the fourteen optional attributes in
``OPTIONAL_ATTRS`` order as i64, f64 or 16-byte strings. Absent attributes
are zero-filled and flagged off in the presence bitmap. The json index in the
footer carries per-record columns used for filtering and stratification, so
partitioning never touches record bodies.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorpusIOError, InsufficientDataError, ShapeError
from .synth import IQWaveform, from_components, to_grid

MAGIC = b"EMR1"
VERSION = 1
NAME_BYTES = 32
ENUM_BYTES = 16

# (name, kind) in on-disk order; kind is one of "int", "real", "enum"
OPTIONAL_ATTRS: tuple[tuple[str, str], ...] = (
    ("device_id", "int"),
    ("transmission_id", "int"),
    ("infer_class", "int"),
    ("snr_db", "real"),
    ("isr_db", "real"),
    ("modulation_type", "enum"),
    ("radar_waveform_type", "enum"),
    ("pri_us", "real"),
    ("pulse_time_delay_us", "real"),
    ("num_pulses", "int"),
    ("pulse_width_us", "real"),
    ("band_width_hz", "real"),
    ("amplitude", "real"),
    ("radar_segmentation_type", "enum"),
)
ATTRIBUTE_NAMES = ("iq_data", "dataset_name", "sampling_rate") + tuple(n for n, _ in OPTIONAL_ATTRS)
INDEX_COLUMNS = ("snr_db", "infer_class", "modulation_type", "radar_waveform_type", "device_id")

_KIND_FMT = {"int": "q", "real": "d", "enum": f"{ENUM_BYTES}s"}
_BLOCK_FMT = "<" + f"{NAME_BYTES}s" + "d" + "".join(_KIND_FMT[k] for _, k in OPTIONAL_ATTRS)
_BLOCK = struct.Struct(_BLOCK_FMT)
_HEADER = struct.Struct("<4sIQ")
_TRAILER = struct.Struct("<QI4s")
_U32 = struct.Struct("<I")


@dataclass(eq=False)
class IQRecord:
    waveform: IQWaveform
    dataset_name: str
    sampling_rate: float | None = None
    device_id: int | None = None
    transmission_id: int | None = None
    infer_class: int | None = None
    snr_db: float | None = None
    isr_db: float | None = None
    modulation_type: str | None = None
    radar_waveform_type: str | None = None
    pri_us: float | None = None
    pulse_time_delay_us: float | None = None
    num_pulses: int | None = None
    pulse_width_us: float | None = None
    band_width_hz: float | None = None
    amplitude: float | None = None
    radar_segmentation_type: str | None = None

    def __post_init__(self):
        if self.sampling_rate is None:
            self.sampling_rate = self.waveform.sample_rate_hz
        if float(self.sampling_rate) != self.waveform.sample_rate_hz:
            raise ShapeError("sampling_rate must equal waveform.sample_rate_hz")
        self.sampling_rate = float(self.sampling_rate)
        # records hold container precision so that write/read is lossless
        self.waveform = IQWaveform(to_grid(self.waveform.samples), self.sampling_rate)
        if len(self.dataset_name.encode()) > NAME_BYTES:
            raise ConfigError(f"dataset_name longer than {NAME_BYTES} bytes")
        for name, kind in OPTIONAL_ATTRS:
            v = getattr(self, name)
            if v is None:
                continue
            if kind == "int":
                setattr(self, name, int(v))
            elif kind == "real":
                setattr(self, name, float(v))
            elif len(str(v).encode()) > ENUM_BYTES:
                raise ConfigError(f"{name} value {v!r} longer than {ENUM_BYTES} bytes")

    @property
    def length(self) -> int:
        return self.waveform.length

    def attributes(self) -> dict[str, Any]:
        """All 17 attributes; absent ones map to None."""
        out = {"iq_data": self.waveform.iq, "dataset_name": self.dataset_name, "sampling_rate": self.sampling_rate}
        out.update({n: getattr(self, n) for n, _ in OPTIONAL_ATTRS})
        return out

    def same_as(self, other: "IQRecord") -> bool:
        if not self.waveform.same_as(other.waveform):
            return False
        for f in fields(self):
            if f.name == "waveform":
                continue
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, float) and isinstance(b, float):
                if struct.pack("<d", a) != struct.pack("<d", b):
                    return False
            elif a != b:
                return False
        return True


# ---------------------------------------------------------------------------
# normalization


def normalize_iq(w: IQWaveform, mode: str = "component") -> IQWaveform:
    """Scale so the largest absolute I or Q component is 1.

    ``mode="modulus"`` divides by the largest complex magnitude instead.
    All-zero input is returned unchanged.
    """
    if mode == "component":
        peak = max(float(np.max(np.abs(w.samples.real))), float(np.max(np.abs(w.samples.imag))))
    elif mode == "modulus":
        peak = float(np.max(np.abs(w.samples)))
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    if peak == 0:
        return w.with_samples(w.samples.copy())
    return w.with_samples(w.samples / peak)


def minmax_normalize(values, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise ConfigError(f"min-max range needs hi > lo, got [{lo}, {hi}]")
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)


def minmax_denormalize(values, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise ConfigError(f"min-max range needs hi > lo, got [{lo}, {hi}]")
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


# ---------------------------------------------------------------------------
# EMR1 container


@dataclass
class DatasetEntry:
    name: str
    record_count: int
    offsets: list[int]
    length_histogram: dict[int, int]
    presence: int


@dataclass
class CorpusManifest:
    version: int
    offsets: np.ndarray
    checksums: np.ndarray
    footer_offset: int
    dataset_names: list[str]
    columns: dict[str, list] = field(default_factory=dict)

    @property
    def record_count(self) -> int:
        return int(self.offsets.size)

    def __len__(self) -> int:
        return self.record_count

    def record_span(self, i: int) -> tuple[int, int]:
        start = int(self.offsets[i])
        stop = int(self.offsets[i + 1]) if i + 1 < self.record_count else self.footer_offset
        return start, stop

    def column(self, name: str) -> list:
        if name == "dataset_name":
            return [self.dataset_names[d] for d in self.columns["dataset"]]
        if name not in self.columns:
            raise ConfigError(f"attribute {name!r} is not indexed in the manifest")
        return self.columns[name]

    @property
    def datasets(self) -> list[DatasetEntry]:
        entries = []
        ds = np.asarray(self.columns["dataset"])
        lengths = np.asarray(self.columns["length"])
        presence = np.asarray(self.columns["presence"], dtype=np.int64)
        for d, name in enumerate(self.dataset_names):
            sel = np.flatnonzero(ds == d)
            vals, counts = np.unique(lengths[sel], return_counts=True)
            entries.append(
                DatasetEntry(
                    name=name,
                    record_count=int(sel.size),
                    offsets=[int(self.offsets[i]) for i in sel],
                    length_histogram={int(v): int(c) for v, c in zip(vals, counts)},
                    presence=int(np.bitwise_or.reduce(presence[sel])) if sel.size else 0,
                )
            )
        return entries

    def to_text(self) -> str:
        """Human-readable JSON summary for tooling."""
        doc = {
            "format": "EMR1",
            "version": self.version,
            "record_count": self.record_count,
            "datasets": [
                {
                    "name": e.name,
                    "record_count": e.record_count,
                    "first_offset": e.offsets[0] if e.offsets else None,
                    "length_histogram": {str(k): v for k, v in e.length_histogram.items()},
                    "presence": [n for b, (n, _) in enumerate(OPTIONAL_ATTRS) if e.presence >> b & 1],
                }
                for e in self.datasets
            ],
        }
        return json.dumps(doc, indent=2)


def _encode_record(r: IQRecord) -> bytes:
    bitmap = 0
    vals: list[Any] = [r.dataset_name.encode(), r.sampling_rate]
    for bit, (name, kind) in enumerate(OPTIONAL_ATTRS):
        v = getattr(r, name)
        if v is None:
            vals.append(b"" if kind == "enum" else (0 if kind == "int" else 0.0))
        else:
            bitmap |= 1 << bit
            vals.append(str(v).encode() if kind == "enum" else v)
    iq = np.empty(2 * r.length, dtype="<f4")
    iq[0::2] = r.waveform.samples.real
    iq[1::2] = r.waveform.samples.imag
    return _U32.pack(bitmap) + _BLOCK.pack(*vals) + _U32.pack(r.length) + iq.tobytes()


def _decode_record(buf: bytes) -> IQRecord:
    try:
        (bitmap,) = _U32.unpack_from(buf, 0)
        vals = _BLOCK.unpack_from(buf, 4)
        pos = 4 + _BLOCK.size
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        if len(buf) != pos + 8 * n:
            raise CorpusIOError("record body length does not match its sample count")
    except struct.error as exc:
        raise CorpusIOError(f"truncated record: {exc}") from exc
    iq = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=pos).astype(np.float64)
    rate = vals[1]
    kwargs: dict[str, Any] = {}
    for bit, ((name, kind), v) in enumerate(zip(OPTIONAL_ATTRS, vals[2:])):
        if bitmap >> bit & 1:
            kwargs[name] = v.rstrip(b"\0").decode() if kind == "enum" else v
    return IQRecord(
        waveform=IQWaveform(from_components(iq[0::2], iq[1::2]), rate),
        dataset_name=vals[0].rstrip(b"\0").decode(),
        sampling_rate=rate,
        **kwargs,
    )


def write_records(records: Iterable[IQRecord], path: str | os.PathLike) -> CorpusManifest:
    records = list(records)
    names: list[str] = []
    name_idx: dict[str, int] = {}
    columns: dict[str, list] = {"dataset": [], "length": [], "presence": []}
    columns.update({c: [] for c in INDEX_COLUMNS})
    offsets, checksums = [], []
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(records)))
        for r in records:
            body = _encode_record(r)
            offsets.append(fh.tell())
            checksums.append(zlib.crc32(body))
            fh.write(body)
            if r.dataset_name not in name_idx:
                name_idx[r.dataset_name] = len(names)
                names.append(r.dataset_name)
            columns["dataset"].append(name_idx[r.dataset_name])
            columns["length"].append(r.length)
            columns["presence"].append(_U32.unpack_from(body, 0)[0])
            for c in INDEX_COLUMNS:
                columns[c].append(getattr(r, c))
        footer_offset = fh.tell()
        index = json.dumps({"datasets": names, "columns": columns}, separators=(",", ":")).encode()
        footer = (
            np.asarray(offsets, dtype="<u8").tobytes()
            + np.asarray(checksums, dtype="<u4").tobytes()
            + _U32.pack(len(index))
            + index
        )
        fh.write(footer)
        fh.write(_TRAILER.pack(footer_offset, zlib.crc32(footer), MAGIC))
    return CorpusManifest(
        version=VERSION,
        offsets=np.asarray(offsets, dtype=np.uint64),
        checksums=np.asarray(checksums, dtype=np.uint32),
        footer_offset=footer_offset,
        dataset_names=names,
        columns=columns,
    )


class CorpusReader:
    """Random-access reader. Counts bytes read and records materialized."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self.bytes_read = 0
        self.records_materialized = 0
        try:
            self._fh: io.BufferedReader = open(self.path, "rb")
        except OSError as exc:
            raise CorpusIOError(f"cannot open corpus {self.path}: {exc}") from exc
        try:
            self.manifest = self._load_manifest()
        except Exception:
            self._fh.close()
            raise

    def _read_at(self, offset: int, size: int) -> bytes:
        self._fh.seek(offset)
        data = self._fh.read(size)
        self.bytes_read += len(data)
        if len(data) != size:
            raise CorpusIOError(f"truncated corpus file {self.path}")
        return data

    def _load_manifest(self) -> CorpusManifest:
        size = os.fstat(self._fh.fileno()).st_size
        if size < _HEADER.size + _TRAILER.size:
            raise CorpusIOError(f"truncated corpus file {self.path}")
        magic, version, count = _HEADER.unpack(self._read_at(0, _HEADER.size))
        if magic != MAGIC:
            raise CorpusIOError(f"bad magic {magic!r} in {self.path}")
        if version != VERSION:
            raise CorpusIOError(f"unsupported EMR1 version {version}")
        footer_offset, footer_crc, tail = _TRAILER.unpack(self._read_at(size - _TRAILER.size, _TRAILER.size))
        if tail != MAGIC:
            raise CorpusIOError("missing trailer; file is truncated or not EMR1")
        if not _HEADER.size <= footer_offset <= size - _TRAILER.size:
            raise CorpusIOError("footer offset out of range")
        footer = self._read_at(footer_offset, size - _TRAILER.size - footer_offset)
        if zlib.crc32(footer) != footer_crc:
            raise CorpusIOError("manifest checksum mismatch")
        offsets = np.frombuffer(footer, dtype="<u8", count=count).astype(np.uint64)
        pos = 8 * count
        checksums = np.frombuffer(footer, dtype="<u4", count=count, offset=pos).astype(np.uint32)
        pos += 4 * count
        (n_index,) = _U32.unpack_from(footer, pos)
        index = json.loads(footer[pos + 4 : pos + 4 + n_index].decode())
        if count and (np.any(np.diff(offsets.astype(np.int64)) <= 0) or int(offsets[-1]) >= footer_offset):
            raise CorpusIOError("record offsets are not strictly increasing")
        return CorpusManifest(
            version=version,
            offsets=offsets,
            checksums=checksums,
            footer_offset=int(footer_offset),
            dataset_names=index["datasets"],
            columns=index["columns"],
        )

    def __len__(self) -> int:
        return self.manifest.record_count

    def read(self, i: int) -> IQRecord:
        n = self.manifest.record_count
        if not 0 <= i < n:
            raise IndexError(f"record index {i} out of range [0, {n})")
        start, stop = self.manifest.record_span(i)
        buf = self._read_at(start, stop - start)
        if zlib.crc32(buf) != int(self.manifest.checksums[i]):
            raise CorpusIOError(f"checksum mismatch for record {i}")
        self.records_materialized += 1
        return _decode_record(buf)

    def read_many(self, indices: Iterable[int]) -> list[IQRecord]:
        return [self.read(int(i)) for i in indices]

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path: str | os.PathLike, indices: Iterable[int] | None = None) -> list[IQRecord]:
    with CorpusReader(path) as reader:
        if indices is None:
            indices = range(len(reader))
        return reader.read_many(indices)


def read_manifest(path: str | os.PathLike) -> CorpusManifest:
    with CorpusReader(path) as reader:
        return reader.manifest


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0
    min_snr_db: float | None = None
    stratify_by: str | None = None

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


def _largest_remainder(sizes: Sequence[int], fraction: float) -> list[int]:
    total = int(math.floor(fraction * sum(sizes) + 0.5))
    exact = [fraction * s for s in sizes]
    quota = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(sizes)), key=lambda k: (-(exact[k] - quota[k]), k))
    for k in order[: total - sum(quota)]:
        quota[k] += 1
    return quota


def partition(manifest: CorpusManifest, spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Seeded train/validation split over record indices.

    With ``min_snr_db`` set, only records whose SNR is known and strictly
    greater than the threshold take part.
    """
    n = manifest.record_count
    if n == 0:
        raise ConfigError("cannot partition an empty corpus")
    ids = np.arange(n)
    if spec.min_snr_db is not None:
        snr = manifest.column("snr_db")
        keep = [s is not None and s > spec.min_snr_db for s in snr]
        ids = ids[np.asarray(keep, dtype=bool)]
    if ids.size == 0:
        raise ConfigError(f"no records left after SNR filter > {spec.min_snr_db} dB")
    rng = np.random.default_rng(spec.seed)
    if spec.stratify_by is None:
        groups = [ids]
    else:
        col = manifest.column(spec.stratify_by)
        keys = sorted({repr(col[i]) for i in ids})
        groups = [ids[[repr(col[i]) == k for i in ids]] for k in keys]
    quotas = _largest_remainder([g.size for g in groups], spec.train_fraction)
    train, val = [], []
    for g, q in zip(groups, quotas):
        perm = rng.permutation(g)
        train.extend(int(i) for i in perm[:q])
        val.extend(int(i) for i in perm[q:])
    return sorted(train), sorted(val)


def few_shot_select(
    train_ids: Sequence[int],
    k: int,
    classes: Sequence,
    snrs: Sequence | None = None,
    seed: int = 0,
) -> list[int]:
    """Draw exactly ``k`` ids per class (or per class and SNR cell).

    ``classes`` and ``snrs`` are aligned with ``train_ids``.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    train_ids = list(train_ids)
    if len(classes) != len(train_ids) or (snrs is not None and len(snrs) != len(train_ids)):
        raise ShapeError("label columns must align with train_ids")
    cells: dict[tuple, list[int]] = {}
    for j, rid in enumerate(train_ids):
        key = (classes[j],) if snrs is None else (classes[j], snrs[j])
        cells.setdefault(key, []).append(rid)
    rng = np.random.default_rng(seed)
    support: list[int] = []
    for key in sorted(cells, key=repr):
        members = cells[key]
        if len(members) < k:
            label = f"class={key[0]!r}" + ("" if snrs is None else f", snr={key[1]!r}")
            raise InsufficientDataError(f"cell ({label}) has {len(members)} records, fewer than k={k}")
        support.extend(int(members[i]) for i in rng.choice(len(members), size=k, replace=False))
    return support
