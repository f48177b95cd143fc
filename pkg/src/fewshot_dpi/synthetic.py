"""Synthetic stand-ins for real captures: byte-motif malware families,
Gaussian embedding clusters, and a minimal classic-pcap writer."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EmbeddingMatrix
from .packet_ingest import FiveTuple, PayloadRecord, Protocol


def make_motifs(n_families: int, motif_len: int, rng: np.random.Generator) -> list[bytes]:
    motifs: list[bytes] = []
    while len(motifs) < n_families:
        m = rng.integers(0, 256, motif_len, dtype=np.uint8).tobytes()
        if m not in motifs:
            motifs.append(m)
    return motifs


def motif_families(n_per_class: int, n_families: int = 3, payload_len: int | tuple[int, int] = 48,
                   motif_len: int = 8, seed: int = 0, names: Sequence[str] | None = None) -> list[PayloadRecord]:
    """Random payloads, each carrying its family's motif at a random offset.

    ``payload_len`` is a fixed length or an inclusive ``(low, high)`` range.
    Records of family ``k`` come from host 10.0.0.(k+1) so label rules can
    recover the family from the five-tuple.
    """
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else [f"family_{chr(ord('a') + k)}" for k in range(n_families)]
    motifs = make_motifs(n_families, motif_len, rng)
    lo, hi = (payload_len, payload_len) if isinstance(payload_len, int) else payload_len
    if lo < motif_len:
        raise ValueError("payloads must be at least as long as the motif")
    records = []
    ts = 1_600_000_000_000_000
    for k, (name, motif) in enumerate(zip(names, motifs)):
        for i in range(n_per_class):
            length = int(rng.integers(lo, hi + 1))
            body = bytearray(rng.integers(0, 256, length, dtype=np.uint8).tobytes())
            at = int(rng.integers(0, length - motif_len + 1))
            body[at:at + motif_len] = motif
            tup = FiveTuple(f"10.0.0.{k + 1}", "192.168.1.10", 40000 + i % 20000, 80, Protocol.TCP)
            ts += int(rng.integers(1, 1000))
            records.append(PayloadRecord(bytes(body), tup, ts, name))
    return records


def byte_histograms(payloads: Sequence[bytes]) -> np.ndarray:
    """Normalised 256-bin byte histogram per payload."""
    out = np.zeros((len(payloads), 256))
    for i, p in enumerate(payloads):
        out[i] = np.bincount(np.frombuffer(p, dtype=np.uint8), minlength=256) / len(p)
    return out


def nearest_centroid_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> float:
    classes = np.unique(train_y)
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((classes[d.argmin(axis=1)] == test_y).mean())


def gaussian_clusters(n_per_class: int, n_classes: int = 3, dim: int = 16, separation: float = 10.0,
                      spread: float = 1.0, seed: int = 0) -> EmbeddingMatrix:
    """Isotropic clusters whose centres are pairwise ``separation`` apart."""
    if n_classes > dim:
        raise ValueError("need dim >= n_classes for equidistant centres")
    rng = np.random.default_rng(seed)
    centres = np.eye(dim)[:n_classes] * (separation / np.sqrt(2.0))
    rows = np.concatenate([c + spread * rng.standard_normal((n_per_class, dim)) for c in centres])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return EmbeddingMatrix(rows, labels, [f"cluster_{k}" for k in range(n_classes)])


# ---------------------------------------------------------------------------
# pcap writer (Ethernet / IPv4 / TCP or UDP, no options)


def _ipv4(src: str, dst: str, proto: int, segment: bytes) -> bytes:
    header = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, 20 + len(segment), 0, 0, 64, proto, 0,
        bytes(int(o) for o in src.split(".")), bytes(int(o) for o in dst.split(".")),
    )
    return header + segment


def frame_for(record: PayloadRecord) -> bytes:
    t = record.tuple
    if t.protocol is Protocol.TCP:
        segment = struct.pack("!HHIIBBHHH", t.src_port, t.dst_port, 0, 0, 5 << 4, 0x18, 65535, 0, 0) + record.payload
        proto = 6
    else:
        segment = struct.pack("!HHHH", t.src_port, t.dst_port, 8 + len(record.payload), 0) + record.payload
        proto = 17
    eth = b"\x00\x11\x22\x33\x44\x55" + b"\x66\x77\x88\x99\xaa\xbb" + b"\x08\x00"
    return eth + _ipv4(t.src_ip, t.dst_ip, proto, segment)


def write_pcap(path: str | Path, records: Sequence[PayloadRecord]) -> None:
    """Write records as a microsecond little-endian classic pcap."""
    chunks = [struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)]
    for rec in records:
        frame = frame_for(rec)
        sec, usec = divmod(rec.timestamp_us, 1_000_000)
        chunks.append(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
        chunks.append(frame)
    Path(path).write_bytes(b"".join(chunks))
