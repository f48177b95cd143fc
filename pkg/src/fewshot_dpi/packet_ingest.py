"""PCAP payload extraction, ground-truth labelling, and tokenisation.

Classic libpcap files with Ethernet link type are read without third-party
dependencies. Only IPv4 TCP/UDP packets that actually carry transport
payload become :class:`PayloadRecord` objects; everything else is counted
in :class:`ParseStats` and skipped.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD_ID = 256
DEFAULT_MAX_LEN = 1500

LINKTYPE_ETHERNET = 1
ETHERTYPE_IPV4 = 0x0800

_MAGIC_USEC = 0xA1B2C3D4
_MAGIC_NSEC = 0xA1B23C4D
_MAGIC_USEC_SWAPPED = 0xD4C3B2A1
_MAGIC_NSEC_SWAPPED = 0x4D3CB2A1


class PcapError(Exception):
    """Base class for capture-file errors."""


class PcapParseError(PcapError):
    """The capture is structurally broken (e.g. truncated) at ``offset``."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnsupportedFormatError(PcapError):
    pass


class Protocol(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


@dataclass(frozen=True)
class FiveTuple:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise ValueError(f"port {port} outside 0-65535")
        if not isinstance(self.protocol, Protocol):
            object.__setattr__(self, "protocol", Protocol(self.protocol))


@dataclass(frozen=True)
class PayloadRecord:
    """One transport-layer payload. ``label`` is None until labelled."""

    payload: bytes
    tuple: FiveTuple
    timestamp_us: int
    label: str | None = None

    def __post_init__(self):
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))
        if len(self.payload) == 0:
            raise ValueError("payload records must carry at least one byte")


@dataclass
class ParseStats:
    packets: int = 0
    records: int = 0
    zero_payload: int = 0
    non_ipv4: int = 0
    non_transport: int = 0
    fragments: int = 0
    malformed: int = 0

    @property
    def skipped(self) -> int:
        return self.zero_payload + self.non_ipv4 + self.non_transport + self.fragments + self.malformed

    def merge(self, other: ParseStats) -> None:
        for name in ("packets", "records", "zero_payload", "non_ipv4", "non_transport", "fragments", "malformed"):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def as_dict(self) -> dict:
        return {
            "packets": self.packets,
            "records": self.records,
            "skipped": self.skipped,
            "zero_payload": self.zero_payload,
            "non_ipv4": self.non_ipv4,
            "non_transport": self.non_transport,
            "fragments": self.fragments,
            "malformed": self.malformed,
        }


# ---------------------------------------------------------------------------
# PCAP parsing


def _read_global_header(buf: bytes) -> tuple[str, int]:
    """Return (struct byte-order prefix, timestamp fraction divisor to microseconds)."""
    if len(buf) < 24:
        raise PcapParseError(f"truncated global header ({len(buf)} of 24 bytes)", 0)
    (magic,) = struct.unpack("<I", buf[:4])
    if magic == _MAGIC_USEC:
        order, divisor = "<", 1
    elif magic == _MAGIC_NSEC:
        order, divisor = "<", 1000
    elif magic == _MAGIC_USEC_SWAPPED:
        order, divisor = ">", 1
    elif magic == _MAGIC_NSEC_SWAPPED:
        order, divisor = ">", 1000
    else:
        raise UnsupportedFormatError(f"unknown capture magic 0x{magic:08x} (pcapng is not supported)")
    _vmaj, _vmin, _zone, _sigfigs, _snaplen, linktype = struct.unpack(order + "HHiIII", buf[4:24])
    if linktype != LINKTYPE_ETHERNET:
        raise UnsupportedFormatError(f"link type {linktype} is not Ethernet")
    return order, divisor


def _extract(frame: bytes, ts_us: int, stats: ParseStats) -> PayloadRecord | None:
    if len(frame) < 14:
        stats.malformed += 1
        return None
    (ethertype,) = struct.unpack("!H", frame[12:14])
    if ethertype != ETHERTYPE_IPV4:
        stats.non_ipv4 += 1
        return None
    ip = frame[14:]
    if len(ip) < 20 or ip[0] >> 4 != 4:
        stats.malformed += 1
        return None
    ihl = (ip[0] & 0x0F) * 4
    (total_len,) = struct.unpack("!H", ip[2:4])
    if ihl < 20 or total_len < ihl or total_len > len(ip):
        stats.malformed += 1
        return None
    # total_len excludes Ethernet trailer padding on short frames
    ip = ip[:total_len]
    (flags_frag,) = struct.unpack("!H", ip[6:8])
    if flags_frag & 0x2000 or flags_frag & 0x1FFF:
        stats.fragments += 1
        return None
    proto = ip[9]
    src_ip = ".".join(str(b) for b in ip[12:16])
    dst_ip = ".".join(str(b) for b in ip[16:20])
    segment = ip[ihl:]
    if proto == 6:
        if len(segment) < 20:
            stats.malformed += 1
            return None
        data_offset = (segment[12] >> 4) * 4
        if data_offset < 20 or data_offset > len(segment):
            stats.malformed += 1
            return None
        sport, dport = struct.unpack("!HH", segment[:4])
        payload = segment[data_offset:]
        protocol = Protocol.TCP
    elif proto == 17:
        if len(segment) < 8:
            stats.malformed += 1
            return None
        sport, dport, udp_len = struct.unpack("!HHH", segment[:6])
        if udp_len < 8 or udp_len > len(segment):
            stats.malformed += 1
            return None
        payload = segment[8:udp_len]
        protocol = Protocol.UDP
    else:
        stats.non_transport += 1
        return None
    if not payload:
        stats.zero_payload += 1
        return None
    stats.records += 1
    return PayloadRecord(bytes(payload), FiveTuple(src_ip, dst_ip, sport, dport, protocol), ts_us)


def parse_pcap_bytes(buf: bytes, stats: ParseStats | None = None) -> list[PayloadRecord]:
    stats = stats if stats is not None else ParseStats()
    order, divisor = _read_global_header(buf)
    header = struct.Struct(order + "IIII")
    records = []
    offset = 24
    while offset < len(buf):
        if offset + 16 > len(buf):
            raise PcapParseError("truncated record header", offset)
        ts_sec, ts_frac, incl_len, _orig_len = header.unpack_from(buf, offset)
        start = offset + 16
        if start + incl_len > len(buf):
            raise PcapParseError(f"truncated packet data ({incl_len} bytes declared)", offset)
        stats.packets += 1
        rec = _extract(buf[start:start + incl_len], ts_sec * 1_000_000 + ts_frac // divisor, stats)
        if rec is not None:
            records.append(rec)
        offset = start + incl_len
    return records


def parse_pcap(path: str | Path, stats: ParseStats | None = None) -> list[PayloadRecord]:
    """Read every TCP/UDP payload from a classic pcap file (unlabelled).

    Pass a :class:`ParseStats` to collect skip and malformation counts.
    """
    path = Path(path)
    records = parse_pcap_bytes(path.read_bytes(), stats)
    logger.debug("parsed %d payload records from %s", len(records), path)
    return records


# ---------------------------------------------------------------------------
# labelling


@dataclass(frozen=True)
class LabelRule:
    """Five-tuple pattern (None fields are wildcards) plus an inclusive time window."""

    label: str
    src_ip: str | None = None
    dst_ip: str | None = None
    src_port: int | None = None
    dst_port: int | None = None
    protocol: Protocol | None = None
    window_start_us: int | None = None
    window_end_us: int | None = None

    def __post_init__(self):
        if self.protocol is not None and not isinstance(self.protocol, Protocol):
            object.__setattr__(self, "protocol", Protocol(str(self.protocol).upper()))
        if (
            self.window_start_us is not None
            and self.window_end_us is not None
            and self.window_start_us > self.window_end_us
        ):
            raise ValueError("window_start_us must not exceed window_end_us")

    def matches(self, record: PayloadRecord) -> bool:
        t = record.tuple
        for want, have in (
            (self.src_ip, t.src_ip),
            (self.dst_ip, t.dst_ip),
            (self.src_port, t.src_port),
            (self.dst_port, t.dst_port),
            (self.protocol, t.protocol),
        ):
            if want is not None and want != have:
                return False
        if self.window_start_us is not None and record.timestamp_us < self.window_start_us:
            return False
        if self.window_end_us is not None and record.timestamp_us > self.window_end_us:
            return False
        return True


RULE_FIELDS = ("src_ip", "dst_ip", "src_port", "dst_port", "protocol", "start_us", "end_us", "label")


def load_label_rules(path: str | Path) -> list[LabelRule]:
    """Read a rule CSV with header ``src_ip,dst_ip,src_port,dst_port,protocol,start_us,end_us,label``.

    ``*`` in any column except ``label`` is a wildcard.
    """

    def opt(value: str, conv):
        value = value.strip()
        return None if value in ("*", "") else conv(value)

    rules = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RULE_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: rule file lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rules.append(
                    LabelRule(
                        label=row["label"].strip(),
                        src_ip=opt(row["src_ip"], str),
                        dst_ip=opt(row["dst_ip"], str),
                        src_port=opt(row["src_port"], int),
                        dst_port=opt(row["dst_port"], int),
                        protocol=opt(row["protocol"], lambda s: Protocol(s.upper())),
                        window_start_us=opt(row["start_us"], int),
                        window_end_us=opt(row["end_us"], int),
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rules


def apply_labels(records: Iterable[PayloadRecord], rules: Sequence[LabelRule], default_label: str) -> list[PayloadRecord]:
    """Label each record with the first matching rule, else ``default_label``."""
    out = []
    for rec in records:
        label = next((r.label for r in rules if r.matches(rec)), default_label)
        out.append(replace(rec, label=label))
    return out


# ---------------------------------------------------------------------------
# cleaning


def deduplicate(records: Iterable[PayloadRecord]) -> list[PayloadRecord]:
    """Keep the first record for every distinct payload byte string."""
    seen: set[bytes] = set()
    out = []
    for rec in records:
        if rec.payload not in seen:
            seen.add(rec.payload)
            out.append(rec)
    return out


def balance_classes(records: Sequence[PayloadRecord], seed: int, classes: Sequence[str] | None = None) -> list[PayloadRecord]:
    """Downsample every class to the smallest class size, then shuffle.

    If ``classes`` is given, only those classes are kept and each must be present.
    """
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(records):
        if rec.label is None:
            raise ValueError(f"record {i} is unlabelled; run apply_labels first")
        by_class[rec.label].append(i)
    names = sorted(by_class) if classes is None else list(classes)
    for name in names:
        if not by_class.get(name):
            raise ValueError(f"class {name!r} has no records")
    if not names:
        return []
    n = min(len(by_class[name]) for name in names)
    rng = np.random.default_rng(seed)
    chosen = []
    for name in sorted(names):
        picked = rng.choice(len(by_class[name]), size=n, replace=False)
        chosen.extend(by_class[name][j] for j in np.sort(picked))
    order = rng.permutation(len(chosen))
    return [records[chosen[j]] for j in order]


def class_counts(records: Iterable[PayloadRecord]) -> dict[str, int]:
    return dict(sorted(Counter(r.label for r in records).items()))


# ---------------------------------------------------------------------------
# tokenised dataset


@dataclass
class TokenizedDataset:
    """Right-padded byte tokens (0-255, pad 256) with labels."""

    sequences: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    pad_id: int = PAD_ID
    # run metadata (seed, config hash) written to the container header; not part of equality
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.uint16)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = list(self.class_names)
        if self.sequences.ndim != 2:
            raise ValueError("sequences must be a 2-D matrix")
        n = self.sequences.shape[0]
        if self.lengths.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("lengths and labels must have one entry per row")
        if n and (self.lengths.max() > self.row_len or self.labels.max() >= len(self.class_names)):
            raise ValueError("length or label index out of range")

    def __len__(self) -> int:
        return self.sequences.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenizedDataset):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and self.pad_id == other.pad_id
            and np.array_equal(self.sequences, other.sequences)
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def row_len(self) -> int:
        return self.sequences.shape[1]

    def subset(self, indices) -> TokenizedDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return TokenizedDataset(self.sequences[idx], self.lengths[idx], self.labels[idx], self.class_names, self.pad_id)

    def select_classes(self, names: Sequence[str]) -> TokenizedDataset:
        """Rows of the named classes only, relabelled 0..len(names)-1 in the given order."""
        unknown = [n for n in names if n not in self.class_names]
        if unknown:
            raise KeyError(f"unknown classes {unknown}; available: {self.class_names}")
        old = [self.class_names.index(n) for n in names]
        mask = np.isin(self.labels, old)
        remap = np.full(len(self.class_names), -1, dtype=np.int64)
        remap[old] = np.arange(len(old))
        return TokenizedDataset(self.sequences[mask], self.lengths[mask], remap[self.labels[mask]], list(names), self.pad_id)

    def truncate(self, max_len: int) -> TokenizedDataset:
        """Re-cut rows to ``max_len`` columns, dropping bytes past it."""
        if max_len >= self.row_len:
            pad = np.full((len(self), max_len - self.row_len), self.pad_id, dtype=np.uint16)
            return TokenizedDataset(np.hstack([self.sequences, pad]), self.lengths, self.labels, self.class_names, self.pad_id)
        return TokenizedDataset(
            self.sequences[:, :max_len], np.minimum(self.lengths, max_len), self.labels, self.class_names, self.pad_id
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.class_names).encode())
        for arr in (self.sequences, self.lengths, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def class_count(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        return {name: int(c) for name, c in zip(self.class_names, counts)}


def tokenize(records: Sequence[PayloadRecord], max_len: int = DEFAULT_MAX_LEN,
             class_names: Sequence[str] | None = None) -> TokenizedDataset:
    """Pack payload bytes into a ``[n, max_len]`` matrix padded with 256.

    Payloads longer than ``max_len`` are truncated. Classes are indexed in
    lexicographic order unless ``class_names`` fixes the order.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if any(r.label is None for r in records):
        raise ValueError("tokenize needs labelled records")
    names = sorted({r.label for r in records}) if class_names is None else list(class_names)
    index = {name: i for i, name in enumerate(names)}
    n = len(records)
    seqs = np.full((n, max_len), PAD_ID, dtype=np.uint16)
    lengths = np.zeros(n, dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    for i, rec in enumerate(records):
        row = np.frombuffer(rec.payload[:max_len], dtype=np.uint8)
        seqs[i, : row.size] = row
        lengths[i] = row.size
        try:
            labels[i] = index[rec.label]
        except KeyError:
            raise ValueError(f"label {rec.label!r} not in class list {names}") from None
    return TokenizedDataset(seqs, lengths, labels, names)


# ---------------------------------------------------------------------------
# dataset container
#
#   magic(8) | version u16 | header_len u32 | header JSON (utf-8)
#   | lengths int64[n] | labels int64[n] | sequences uint16[n*L] | sha256(32)
# all integers little-endian; the digest covers every preceding byte.

DATASET_MAGIC = b"FSDPIDS\x00"
DATASET_VERSION = 1


class DatasetFormatError(Exception):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


class DatasetTruncatedError(DatasetFormatError):
    pass


class DatasetChecksumError(DatasetFormatError):
    pass


def dataset_to_bytes(ds: TokenizedDataset) -> bytes:
    header = json.dumps(
        {"class_names": ds.class_names, "rows": len(ds), "row_len": ds.row_len, "pad_id": ds.pad_id,
         "provenance": ds.provenance},
        sort_keys=True,
    ).encode()
    body = b"".join(
        [
            DATASET_MAGIC,
            struct.pack("<HI", DATASET_VERSION, len(header)),
            header,
            ds.lengths.astype("<i8").tobytes(),
            ds.labels.astype("<i8").tobytes(),
            ds.sequences.astype("<u2").tobytes(),
        ]
    )
    return body + hashlib.sha256(body).digest()


def dataset_from_bytes(buf: bytes) -> TokenizedDataset:
    fixed = len(DATASET_MAGIC) + 6
    if len(buf) < fixed:
        raise DatasetTruncatedError(f"dataset file is {len(buf)} bytes, shorter than its fixed header")
    if buf[:8] != DATASET_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    version, header_len = struct.unpack("<HI", buf[8:fixed])
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"dataset format version {version}, expected {DATASET_VERSION}")
    if len(buf) < fixed + header_len:
        raise DatasetTruncatedError("dataset header truncated")
    try:
        header = json.loads(buf[fixed:fixed + header_len])
        rows, row_len = int(header["rows"]), int(header["row_len"])
    except (ValueError, KeyError) as exc:
        raise DatasetFormatError(f"unreadable dataset header: {exc}") from None
    start = fixed + header_len
    expected = start + 16 * rows + 2 * rows * row_len + 32
    if len(buf) < expected:
        raise DatasetTruncatedError(f"dataset file is {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise DatasetFormatError(f"dataset file has {len(buf) - expected} trailing bytes")
    if hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise DatasetChecksumError("dataset checksum mismatch")
    lengths = np.frombuffer(buf, dtype="<i8", count=rows, offset=start)
    labels = np.frombuffer(buf, dtype="<i8", count=rows, offset=start + 8 * rows)
    seqs = np.frombuffer(buf, dtype="<u2", count=rows * row_len, offset=start + 16 * rows).reshape(rows, row_len)
    return TokenizedDataset(seqs.copy(), lengths.copy(), labels.copy(), header["class_names"], header["pad_id"],
                            header.get("provenance", {}))


def save_dataset(ds: TokenizedDataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path: str | Path) -> TokenizedDataset:
    return dataset_from_bytes(Path(path).read_bytes())
