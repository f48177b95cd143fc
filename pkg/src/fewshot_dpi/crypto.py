"""Encrypted-payload ablation.

Payloads are encrypted per packet with AES-256-CBC (PKCS#7) or packed into
Fernet tokens, re-tokenised exactly like plaintext, and classified by the
byte encoder. The AES block primitive comes from ``cryptography``; the Fernet
token layout is assembled here so IVs and timestamps stay under our control
(the library's own Fernet is used only as a cross-check in tests).

Fernet token (binary form)::

    0x80 | timestamp u64 BE | IV (16) | AES-128-CBC ciphertext | HMAC-SHA256 (32)
"""

from __future__ import annotations

import base64
import enum
import hashlib
import hmac
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .encoder import EncoderConfig, EncoderModel, PretrainConfig, evaluate_classifier, pretrain
from .packet_ingest import FiveTuple, PayloadRecord, TokenizedDataset, tokenize
from .protonet import MetricsReport, confusion_matrix, metrics_from_confusion, split_per_class
from .seeding import config_hash, derive_seed

BLOCK = 16
FERNET_VERSION = 0x80


class Scheme(str, enum.Enum):
    AES256_CBC = "aes256_cbc"
    FERNET = "fernet"


class IVPolicy(str, enum.Enum):
    RANDOM_PER_PACKET = "random_per_packet"
    FIXED_FOR_TEST = "fixed_for_test"


class FernetAuthError(ValueError):
    """HMAC verification of a Fernet token failed."""


# ---------------------------------------------------------------------------
# AES-256-CBC


def _check_lengths(key: bytes, iv: bytes, key_len: int) -> None:
    if len(key) != key_len:
        raise ValueError(f"key must be {key_len} bytes, got {len(key)}")
    if len(iv) != BLOCK:
        raise ValueError(f"IV must be {BLOCK} bytes, got {len(iv)}")


def _cbc_encrypt(plaintext: bytes, key: bytes, iv: bytes) -> bytes:
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    return enc.update(padded) + enc.finalize()


def _cbc_decrypt(ciphertext: bytes, key: bytes, iv: bytes) -> bytes:
    if not ciphertext or len(ciphertext) % BLOCK:
        raise ValueError("ciphertext length must be a positive multiple of 16")
    dec = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    return unpadder.update(padded) + unpadder.finalize()


def aes256_cbc_encrypt(plaintext: bytes, key: bytes, iv: bytes) -> bytes:
    """PKCS#7-padded AES-256-CBC; output is ``16 * ceil((len + 1) / 16)`` bytes."""
    _check_lengths(key, iv, 32)
    return _cbc_encrypt(bytes(plaintext), key, iv)


def aes256_cbc_decrypt(ciphertext: bytes, key: bytes, iv: bytes) -> bytes:
    _check_lengths(key, iv, 32)
    return _cbc_decrypt(ciphertext, key, iv)


def aes256_cbc_encrypt_block(block: bytes, key: bytes) -> bytes:
    """Raw single-block AES-256 (no chaining, no padding), for known-answer checks."""
    if len(block) != BLOCK:
        raise ValueError("block must be 16 bytes")
    _check_lengths(key, bytes(BLOCK), 32)
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


# ---------------------------------------------------------------------------
# Fernet


def _fernet_keys(key) -> tuple[bytes, bytes]:
    raw = key if isinstance(key, bytes) and len(key) == 32 else base64.urlsafe_b64decode(key)
    if len(raw) != 32:
        raise ValueError("Fernet key material must decode to 32 bytes")
    return raw[:16], raw[16:]


def generate_fernet_key(rng: np.random.Generator | None = None) -> bytes:
    raw = os.urandom(32) if rng is None else rng.bytes(32)
    return base64.urlsafe_b64encode(raw)


def fernet_encrypt(plaintext: bytes, key, timestamp: int, iv: bytes | None = None) -> bytes:
    """Binary Fernet token. ``key`` is the url-safe base64 key or its 32 raw bytes."""
    signing_key, encryption_key = _fernet_keys(key)
    iv = os.urandom(BLOCK) if iv is None else iv
    _check_lengths(encryption_key, iv, 16)
    body = bytes([FERNET_VERSION]) + int(timestamp).to_bytes(8, "big") + iv + _cbc_encrypt(bytes(plaintext), encryption_key, iv)
    return body + hmac.new(signing_key, body, hashlib.sha256).digest()


def fernet_decrypt(token: bytes, key) -> tuple[bytes, int]:
    """Verify then decrypt a binary token; returns ``(plaintext, timestamp)``."""
    signing_key, encryption_key = _fernet_keys(key)
    if len(token) < 1 + 8 + BLOCK + BLOCK + 32 or token[0] != FERNET_VERSION:
        raise FernetAuthError("malformed Fernet token")
    body, mac = token[:-32], token[-32:]
    if not hmac.compare_digest(hmac.new(signing_key, body, hashlib.sha256).digest(), mac):
        raise FernetAuthError("Fernet HMAC mismatch")
    timestamp = int.from_bytes(body[1:9], "big")
    return _cbc_decrypt(body[25:], encryption_key, body[9:25]), timestamp


def fernet_token_text(token: bytes) -> bytes:
    """The url-safe base64 text form other Fernet implementations exchange."""
    return base64.urlsafe_b64encode(token)


# ---------------------------------------------------------------------------
# dataset encryption


@dataclass
class EncryptionConfig:
    scheme: Scheme
    key: bytes
    iv_policy: IVPolicy = IVPolicy.RANDOM_PER_PACKET
    seed: int | None = None
    test_mode: bool = False
    fixed_iv: bytes = bytes(BLOCK)
    fernet_timestamp: int = 1_700_000_000
    fernet_as_text: bool = False

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        self.iv_policy = IVPolicy(self.iv_policy)
        if self.scheme is Scheme.AES256_CBC and len(self.key) != 32:
            raise ValueError(f"AES-256 key must be 32 bytes, got {len(self.key)}")
        if self.scheme is Scheme.FERNET:
            _fernet_keys(self.key)
        if self.iv_policy is IVPolicy.FIXED_FOR_TEST and not self.test_mode:
            raise ValueError("a fixed IV is only allowed with test_mode=True")
        if len(self.fixed_iv) != BLOCK:
            raise ValueError("fixed_iv must be 16 bytes")


@dataclass(frozen=True)
class CiphertextRecord:
    payload: bytes
    tuple: FiveTuple | None
    timestamp_us: int
    label: str | None
    scheme: Scheme


def encrypt_dataset(records: Sequence[PayloadRecord], cfg: EncryptionConfig) -> list[CiphertextRecord]:
    """Encrypt each payload independently, carrying labels and five-tuples over.

    Random IVs come from ``cfg.seed`` when set (reproducible experiments) and
    from the OS otherwise. Fernet timestamps increase by one per record.
    """
    rng = np.random.default_rng(cfg.seed) if cfg.seed is not None else None

    def next_iv() -> bytes:
        if cfg.iv_policy is IVPolicy.FIXED_FOR_TEST:
            return cfg.fixed_iv
        return rng.bytes(BLOCK) if rng is not None else os.urandom(BLOCK)

    out = []
    for i, rec in enumerate(records):
        if cfg.scheme is Scheme.AES256_CBC:
            ct = aes256_cbc_encrypt(rec.payload, cfg.key, next_iv())
        else:
            ct = fernet_encrypt(rec.payload, cfg.key, cfg.fernet_timestamp + i, next_iv())
            if cfg.fernet_as_text:
                ct = fernet_token_text(ct)
        out.append(CiphertextRecord(ct, rec.tuple, rec.timestamp_us, rec.label, cfg.scheme))
    return out


def records_from_dataset(ds: TokenizedDataset) -> list[PayloadRecord]:
    """Rebuild (tuple-less) payload records from tokenised rows."""
    placeholder = FiveTuple("0.0.0.0", "0.0.0.0", 0, 0, "TCP")
    return [
        PayloadRecord(ds.sequences[i, : ds.lengths[i]].astype(np.uint8).tobytes(), placeholder, 0,
                      ds.class_names[ds.labels[i]])
        for i in range(len(ds))
    ]


def load_aes_key(path: str | Path) -> bytes:
    key = Path(path).read_bytes()
    if len(key) != 32:
        raise ValueError(f"{path}: AES key file must hold exactly 32 raw bytes, found {len(key)}")
    return key


def load_fernet_key(path: str | Path) -> bytes:
    key = Path(path).read_bytes().strip()
    _fernet_keys(key)
    return key


# ---------------------------------------------------------------------------
# the ablation


@dataclass
class EncryptionReport:
    schemes: dict[str, MetricsReport]
    seed: int
    config_hash: str
    chance: float
    fernet_encoding: str
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schemes": {name: r.to_dict() for name, r in self.schemes.items()},
            "seed": self.seed,
            "config_hash": self.config_hash,
            "chance": self.chance,
            "fernet_encoding": self.fernet_encoding,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _binary_relabel(records, benign: str):
    return [replace(r, label="benign" if r.label == benign else "malicious") for r in records]


def run_encryption_experiment(records: Sequence[PayloadRecord] | TokenizedDataset, encoder_cfg: EncoderConfig,
                              pretrain_cfg: PretrainConfig, seed: int = 0, aes_key: bytes | None = None,
                              fernet_key: bytes | None = None, test_fraction: float = 0.5,
                              iv_policy: IVPolicy = IVPolicy.RANDOM_PER_PACKET, test_mode: bool = False,
                              fernet_as_text: bool = False, benign_class: str | None = None) -> EncryptionReport:
    """Train and test the encoder classifier on plaintext, AES and Fernet bytes.

    All three runs share the train/test split, model initialisation and
    training seed. ``benign_class`` switches to benign-vs-malicious framing.
    Keys default to ones derived from ``seed``.
    """
    if isinstance(records, TokenizedDataset):
        records = records_from_dataset(records)
    records = list(records)
    if benign_class is not None:
        records = _binary_relabel(records, benign_class)
    names = sorted({r.label for r in records})
    if len(names) < 2:
        raise ValueError("the encryption experiment needs at least two classes")
    key_rng = np.random.default_rng(derive_seed(seed, "crypto", "keys"))
    aes_key = aes_key if aes_key is not None else key_rng.bytes(32)
    fernet_key = fernet_key if fernet_key is not None else generate_fernet_key(key_rng)
    labels = np.array([names.index(r.label) for r in records])
    train_idx, test_idx = split_per_class(labels, test_fraction, np.random.default_rng(derive_seed(seed, "crypto", "split")))
    max_len = encoder_cfg.max_positions
    cfg = replace(encoder_cfg, n_classes=len(names))
    variants = {
        "plaintext": records,
        Scheme.AES256_CBC.value: encrypt_dataset(records, EncryptionConfig(
            Scheme.AES256_CBC, aes_key, iv_policy, derive_seed(seed, "crypto", "aes"), test_mode)),
        Scheme.FERNET.value: encrypt_dataset(records, EncryptionConfig(
            Scheme.FERNET, fernet_key, iv_policy, derive_seed(seed, "crypto", "fernet"), test_mode,
            fernet_as_text=fernet_as_text)),
    }
    settings = {"encoder": cfg.to_dict(), "pretrain": pretrain_cfg.to_dict(), "test_fraction": test_fraction,
                "iv_policy": IVPolicy(iv_policy).value, "fernet_as_text": fernet_as_text, "classes": names,
                "benign_class": benign_class}
    h = config_hash(settings)
    reports = {}
    for name, recs in variants.items():
        ds = tokenize(recs, max_len=max_len, class_names=names)
        train, test = ds.subset(train_idx), ds.subset(test_idx)
        model = EncoderModel(cfg, seed=derive_seed(seed, "crypto", "init"))
        model, _ = pretrain(model, train, replace(pretrain_cfg, seed=derive_seed(seed, "crypto", "train")))
        preds = evaluate_classifier(model, test)
        reports[name] = metrics_from_confusion(confusion_matrix(test.labels, preds, len(names)), names,
                                               seed=seed, config_hash=h, protocol=settings)
    encoding = "text" if fernet_as_text else "raw"
    notes = [f"fernet tokens fed as {encoding} bytes; the alternative encoding is selectable"]
    return EncryptionReport(reports, seed, h, 1.0 / len(names), encoding, notes)
