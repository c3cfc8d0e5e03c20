"""Flow CSV ingestion, cleaning and the clean-baseline day split."""
from __future__ import annotations

import configparser
import csv
import io
import ipaddress
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import IO, Iterable, Sequence, Union

logger = logging.getLogger(__name__)

BENIGN = "BENIGN"

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]


class SchemaError(ValueError):
    """A configured column is missing from the CSV header."""


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class FlowRecord:
    row_id: int
    timestamp: datetime
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    byte_count: int
    label: str

    @property
    def is_attack(self) -> bool:
        return self.label != BENIGN


@dataclass(frozen=True)
class DatasetSplit:
    train_day: date
    train: tuple[FlowRecord, ...]
    test: tuple[FlowRecord, ...]


@dataclass(frozen=True)
class Rejection:
    line_number: int
    reason: str
    source: str = ""


@dataclass
class FlowSchema:
    """Maps FlowRecord fields onto CSV header names.

    Header names are compared after stripping surrounding whitespace, since
    the CICIDS2017 exports carry a leading space on most column names.
    """

    timestamp: str = "Timestamp"
    src_ip: str = "Source IP"
    dst_ip: str = "Destination IP"
    src_port: str = "Source Port"
    dst_port: str = "Destination Port"
    protocol: str = "Protocol"
    label: str = "Label"
    byte_columns: tuple[str, ...] = (
        "Total Length of Fwd Packets",
        "Total Length of Bwd Packets",
    )
    # tried in order; the first matches CICIDS2017's "M/D/YYYY H:MM"
    timestamp_formats: tuple[str, ...] = ("%m/%d/%Y %H:%M", "%m/%d/%Y %H:%M:%S")

    def columns(self) -> list[str]:
        return [
            self.timestamp, self.src_ip, self.dst_ip, self.src_port,
            self.dst_port, self.protocol, self.label, *self.byte_columns,
        ]

    @classmethod
    def from_config(cls, path: str | os.PathLike, section: str = "schema") -> "FlowSchema":
        """Read a ``[schema]`` section of key = value pairs.

        ``byte_columns`` and ``timestamp_formats`` are ``|``-separated lists.
        """
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        if not parser.has_section(section):
            raise ConfigError(f"{path}: no [{section}] section")
        return cls.from_mapping(dict(parser.items(section)))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "FlowSchema":
        kwargs: dict = {}
        for key, value in values.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown schema key {key!r}")
            if key in ("byte_columns", "timestamp_formats"):
                kwargs[key] = tuple(v.strip() for v in value.split("|") if v.strip())
            else:
                kwargs[key] = value.strip()
        return cls(**kwargs)


@dataclass
class ParseResult:
    records: list[FlowRecord] = field(default_factory=list)
    rejected: list[Rejection] = field(default_factory=list)
    # first row id not used by this parse, for numbering the next file
    next_row_id: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.records) + len(self.rejected)


def _open_text(source) -> IO[str]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8", errors="replace", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", errors="replace", newline="")


class _TimestampParser:
    def __init__(self, formats: Sequence[str]):
        self.formats = tuple(formats)
        self._cache: dict[str, datetime] = {}

    def __call__(self, text: str) -> datetime:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        for fmt in self.formats:
            try:
                value = datetime.strptime(text, fmt)
            except ValueError:
                continue
            self._cache[text] = value
            return value
        raise ValueError(text)


def _parse_int(text: str, lo: int, hi: int) -> int:
    value = int(text)
    if not lo <= value <= hi:
        raise ValueError(text)
    return value


def parse_flow_csv(source, schema: FlowSchema | None = None, start_row_id: int = 0) -> ParseResult:
    """Parse a header-bearing flow CSV into FlowRecords.

    ``source`` may be a path, a binary stream or a text stream. Rows with an
    absent or unparseable required field are rejected with a reason code and
    never stop the parse. Row ids are ``start_row_id`` plus the zero-based
    index of the data row, so they are unique and stable across reruns.
    """
    schema = schema or FlowSchema()
    result = ParseResult(next_row_id=start_row_id)
    fh = _open_text(source)
    close = isinstance(source, (str, os.PathLike))
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty input: no header row") from None
        names = [h.strip() for h in header]
        index = {}
        for i, name in enumerate(names):
            index.setdefault(name, i)
        missing = [c for c in schema.columns() if c.strip() not in index]
        if missing:
            raise SchemaError(f"missing configured column(s): {', '.join(missing)}")

        i_ts = index[schema.timestamp.strip()]
        i_src = index[schema.src_ip.strip()]
        i_dst = index[schema.dst_ip.strip()]
        i_sport = index[schema.src_port.strip()]
        i_dport = index[schema.dst_port.strip()]
        i_proto = index[schema.protocol.strip()]
        i_label = index[schema.label.strip()]
        i_bytes = [index[c.strip()] for c in schema.byte_columns]
        needed = [i_ts, i_src, i_dst, i_sport, i_dport, i_proto, i_label, *i_bytes]
        width = max(needed) + 1
        parse_ts = _TimestampParser(schema.timestamp_formats)
        ip_ok: dict[str, bool] = {}

        for data_index, row in enumerate(reader):
            line = reader.line_num
            if not row:
                # blank line: not a data row
                continue
            row_id = start_row_id + data_index
            result.next_row_id = row_id + 1
            if len(row) < width or any(not row[i].strip() for i in needed):
                result.rejected.append(Rejection(line, "incomplete"))
                continue
            src, dst = row[i_src].strip(), row[i_dst].strip()
            bad_ip = False
            for ip in (src, dst):
                ok = ip_ok.get(ip)
                if ok is None:
                    try:
                        ipaddress.ip_address(ip)
                        ok = True
                    except ValueError:
                        ok = False
                    ip_ok[ip] = ok
                bad_ip = bad_ip or not ok
            if bad_ip:
                result.rejected.append(Rejection(line, "bad_ip"))
                continue
            try:
                sport = _parse_int(row[i_sport].strip(), 0, 65535)
                dport = _parse_int(row[i_dport].strip(), 0, 65535)
            except ValueError:
                result.rejected.append(Rejection(line, "bad_port"))
                continue
            try:
                proto = _parse_int(row[i_proto].strip(), 0, 255)
            except ValueError:
                result.rejected.append(Rejection(line, "bad_protocol"))
                continue
            try:
                nbytes = sum(_parse_int(row[i].strip(), 0, 2**63) for i in i_bytes)
            except ValueError:
                result.rejected.append(Rejection(line, "bad_bytes"))
                continue
            try:
                ts = parse_ts(row[i_ts].strip())
            except ValueError:
                result.rejected.append(Rejection(line, "bad_timestamp"))
                continue
            result.records.append(
                FlowRecord(row_id, ts, src, dst, sport, dport, proto, nbytes, row[i_label].strip())
            )
    finally:
        if close:
            fh.close()
    return result


def write_rejections(rejected: Iterable[Rejection], path: str | os.PathLike) -> None:
    """CSV of (line_number, reason); a leading source column appears only for multi-file input."""
    rejected = list(rejected)
    multi = len({r.source for r in rejected}) > 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "line_number", "reason"] if multi else ["line_number", "reason"])
        for r in rejected:
            w.writerow([r.source, r.line_number, r.reason] if multi else [r.line_number, r.reason])


class InternalNetworks:
    """Set of internal addresses and CIDR blocks with cached membership."""

    def __init__(self, entries: Iterable[str]):
        self.networks = tuple(ipaddress.ip_network(e.strip(), strict=False) for e in entries)
        if not self.networks:
            raise ConfigError("internal IP set is empty")
        self._cache: dict[str, bool] = {}

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "InternalNetworks":
        entries = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                entries.append(line)
        return cls(entries)

    def __contains__(self, ip: str) -> bool:
        hit = self._cache.get(ip)
        if hit is None:
            addr = ipaddress.ip_address(ip)
            hit = any(addr in net for net in self.networks)
            self._cache[ip] = hit
        return hit

    def __iter__(self):
        return iter(self.networks)

    def __len__(self) -> int:
        return len(self.networks)


def as_internal(internal_ips) -> InternalNetworks:
    if isinstance(internal_ips, InternalNetworks):
        return internal_ips
    return InternalNetworks(list(internal_ips))


def clean(records: Iterable[FlowRecord], internal_ips) -> list[FlowRecord]:
    """Keep records with at least one endpoint inside the internal set."""
    internal = as_internal(internal_ips)
    return [r for r in records if r.src_ip in internal or r.dst_ip in internal]


def sort_records(records: Iterable[FlowRecord]) -> list[FlowRecord]:
    return sorted(records, key=lambda r: (r.timestamp, r.row_id))


def split_by_day(records: Iterable[FlowRecord], train_day: date) -> DatasetSplit:
    train, test = [], []
    for r in records:
        d = r.timestamp.date()
        if d == train_day:
            train.append(r)
        elif d > train_day:
            test.append(r)
        else:
            raise SplitError(
                f"row {r.row_id} dated {d} precedes training day {train_day}; "
                "the clean-baseline split needs the training day first"
            )
    if not train:
        raise SplitError(f"training day {train_day} does not occur in the data")
    if not test:
        logger.warning("all %d records fall on the training day; test split is empty", len(train))
    return DatasetSplit(train_day, tuple(train), tuple(test))


def day_histogram(records: Iterable[FlowRecord]) -> dict[date, Counter]:
    """Per-day counts of flows by hour of day.

    Exposes 12-hour-clock artefacts in the source timestamps (e.g. afternoon
    traffic piling up in hours 1-5) without trying to repair them.
    """
    hist: dict[date, Counter] = defaultdict(Counter)
    for r in records:
        hist[r.timestamp.date()][r.timestamp.hour] += 1
    return dict(sorted(hist.items()))


RECORD_FIELDS = (
    "row_id", "timestamp", "src_ip", "dst_ip", "src_port", "dst_port",
    "protocol", "byte_count", "label",
)
_ISO = "%Y-%m-%dT%H:%M:%S"


def write_records(records: Iterable[FlowRecord], path: str | os.PathLike, split: dict[int, str] | None = None) -> None:
    """Write normalized records; ``split`` optionally tags each row train/test."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*RECORD_FIELDS, "split"] if split is not None else RECORD_FIELDS)
        for r in records:
            row = [r.row_id, r.timestamp.strftime(_ISO), r.src_ip, r.dst_ip, r.src_port,
                   r.dst_port, r.protocol, r.byte_count, r.label]
            if split is not None:
                row.append(split[r.row_id])
            w.writerow(row)


def read_records(path: str | os.PathLike) -> tuple[list[FlowRecord], dict[int, str]]:
    """Inverse of :func:`write_records`; returns records and the split tags (may be empty)."""
    records, split = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rec = FlowRecord(
                int(row["row_id"]), datetime.strptime(row["timestamp"], _ISO),
                row["src_ip"], row["dst_ip"], int(row["src_port"]), int(row["dst_port"]),
                int(row["protocol"]), int(row["byte_count"]), row["label"],
            )
            records.append(rec)
            if row.get("split"):
                split[rec.row_id] = row["split"]
    return records, split
