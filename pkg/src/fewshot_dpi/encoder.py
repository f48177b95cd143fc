"""Transformer byte encoder: embeddings, sinusoidal positions, post-LN blocks,
mean pooling over real (non-pad) positions, and a classifier on the pooled vector.

Row-vector convention throughout: activations are ``[batch, positions, d_model]``
and linear maps are ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import truncnorm

from . import autograd as ag
from .autograd import Tensor
from .optim import Adam, AdamState, WarmupLinearSchedule
from .packet_ingest import PAD_ID, TokenizedDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    d_ff: int = 3072
    max_positions: int = 1500
    n_classes: int = 2
    dropout: float = 0.1
    vocab_size: int = PAD_ID + 1
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.n_layers, self.d_ff, self.max_positions, self.n_classes, self.vocab_size) < 1:
            raise ValueError("layer count, widths, positions and classes must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PAPER_SCALE = EncoderConfig()
TOY_SCALE = EncoderConfig(d_model=64, n_layers=2, n_heads=2, d_ff=128, max_positions=128)
PRESETS = {"paper-scale": PAPER_SCALE, "toy-scale": TOY_SCALE}


def positional_encoding(max_positions: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos table ``[max_positions, d_model]`` (float64)."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((max_positions, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


# ---------------------------------------------------------------------------
# attention


def key_padding_mask(lengths, seq_len: int) -> np.ndarray:
    """Boolean ``[batch, 1, 1, seq_len]``; True where the key is a real token."""
    lengths = np.asarray(lengths)
    if (lengths <= 0).any():
        raise ValueError("attention over an all-pad sequence is undefined")
    return (np.arange(seq_len)[None, :] < lengths[:, None])[:, None, None, :]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return ag.transpose(ag.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(z: Tensor, wq, bq, wk, bk, wv, bv, n_heads: int, key_mask: np.ndarray | None = None):
    """Scaled dot-product attention per head.

    Returns ``(context, weights)`` where ``context`` is the head outputs
    concatenated back to ``[batch, positions, d_model]`` (before the output
    projection) and ``weights`` is ``[batch, heads, queries, keys]``.
    """
    if z.ndim != 3:
        raise ag.DimensionError(f"attention input must be [batch, positions, d_model], got {z.shape}")
    b, n, d = z.shape
    d_k = d // n_heads
    q = _split_heads(z @ wq + bq, n_heads)
    k = _split_heads(z @ wk + bk, n_heads)
    v = _split_heads(z @ wv + bv, n_heads)
    scores = ag.scale(q @ ag.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(d_k))
    weights = ag.softmax(scores, axis=-1, mask=key_mask)
    context = weights @ v
    context = ag.reshape(ag.transpose(context, (0, 2, 1, 3)), (b, n, d))
    return context, weights


def self_attention(z: Tensor, layer: dict, n_heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    context, _ = multi_head_attention(
        z, layer["attn.q.weight"], layer["attn.q.bias"], layer["attn.k.weight"], layer["attn.k.bias"],
        layer["attn.v.weight"], layer["attn.v.bias"], n_heads, key_mask,
    )
    return context @ layer["attn.out.weight"] + layer["attn.out.bias"]


# ---------------------------------------------------------------------------
# model


def _param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embeddings.word": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for name in ("q", "k", "v", "out"):
            shapes[p + f"attn.{name}.weight"] = (d, d)
            shapes[p + f"attn.{name}.bias"] = (d,)
        shapes[p + "attn_norm.gamma"] = (d,)
        shapes[p + "attn_norm.beta"] = (d,)
        shapes[p + "ff.in.weight"] = (d, f)
        shapes[p + "ff.in.bias"] = (f,)
        shapes[p + "ff.out.weight"] = (f, d)
        shapes[p + "ff.out.bias"] = (d,)
        shapes[p + "ff_norm.gamma"] = (d,)
        shapes[p + "ff_norm.beta"] = (d,)
    shapes["classifier.weight"] = (d, cfg.n_classes)
    shapes["classifier.bias"] = (cfg.n_classes,)
    return shapes


def _init_value(name: str, shape, std: float, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith((".bias", ".beta")):
        return np.zeros(shape)
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class EncoderModel:
    """Parameters live in ``self.params`` (name -> Tensor), ordered deterministically."""

    def __init__(self, config: EncoderConfig, seed: int | np.random.Generator | None = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            name: Tensor(_init_value(name, shape, config.init_std, rng), requires_grad=True, dtype=self.dtype, name=name)
            for name, shape in _param_shapes(config).items()
        }
        self.metadata: dict = {}
        self._pe = positional_encoding(config.max_positions, config.d_model).astype(self.dtype)

    # -- parameter utilities --------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def decay_mask(self) -> list[bool]:
        """Biases and normalisation parameters are exempt from weight decay."""
        return [not name.endswith((".bias", ".gamma", ".beta")) for name in self.params]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = _param_shapes(self.config)
        if set(state) != set(expected):
            raise ConfigMismatchError(f"parameter names differ: {sorted(set(state) ^ set(expected))}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != shape:
                raise ConfigMismatchError(f"{name}: shape {state[name].shape} != {shape} implied by config")
            self.params[name].data = np.array(state[name], dtype=self.dtype)

    def astype(self, dtype) -> EncoderModel:
        clone = EncoderModel.__new__(EncoderModel)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.params = {n: Tensor(p.data, requires_grad=True, dtype=clone.dtype, name=n) for n, p in self.params.items()}
        clone.metadata = dict(self.metadata)
        clone._pe = positional_encoding(self.config.max_positions, self.config.d_model).astype(clone.dtype)
        return clone

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {n[len(prefix):]: p for n, p in self.params.items() if n.startswith(prefix)}

    # -- forward -----------------------------------------------------------
    def embed_tokens(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError(f"token outside vocabulary [0, {self.config.vocab_size})")
        return ag.embedding(self.params["embeddings.word"], tokens.astype(np.int64))

    def hidden_states(self, tokens, lengths, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Final-layer states ``[batch, positions, d_model]`` (pad rows are computed but never attended)."""
        cfg = self.config
        tokens = np.atleast_2d(np.asarray(tokens))
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        n = tokens.shape[1]
        if n > cfg.max_positions:
            raise ValueError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
        mask = key_padding_mask(lengths, n)
        p_drop = cfg.dropout if training else 0.0
        x = self.embed_tokens(tokens) + self._pe[:n]
        x = ag.dropout(x, p_drop, rng, training)
        for i in range(cfg.n_layers):
            lw = self.layer(i)
            a = self_attention(x, lw, cfg.n_heads, mask)
            x = ag.layer_norm(x + ag.dropout(a, p_drop, rng, training), lw["attn_norm.gamma"], lw["attn_norm.beta"],
                              cfg.layer_norm_eps)
            h = ag.gelu(x @ lw["ff.in.weight"] + lw["ff.in.bias"])
            h = h @ lw["ff.out.weight"] + lw["ff.out.bias"]
            x = ag.layer_norm(x + ag.dropout(h, p_drop, rng, training), lw["ff_norm.gamma"], lw["ff_norm.beta"],
                              cfg.layer_norm_eps)
        return x

    def forward(self, tokens, lengths, training: bool = False, rng: np.random.Generator | None = None):
        """Return ``(pooled [batch, d_model], logits [batch, n_classes])``.

        Columns past the longest sequence in the batch are dropped first; they
        hold only padding, which the attention mask and pooling ignore anyway.
        """
        tokens = np.atleast_2d(np.asarray(tokens))
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        if tokens.shape[0] != lengths.shape[0]:
            raise ValueError("one length per sequence required")
        longest = int(lengths.max()) if lengths.size else 0
        if longest > self.config.max_positions:
            raise ValueError(f"sequence length {longest} exceeds max_positions {self.config.max_positions}")
        tokens = tokens[:, :longest]
        h = self.hidden_states(tokens, lengths, training=training, rng=rng)
        pooled = mean_pool(h, lengths)
        logits = pooled @ self.params["classifier.weight"] + self.params["classifier.bias"]
        return pooled, logits

    __call__ = forward


class ConfigMismatchError(ValueError):
    pass


def mean_pool(h: Tensor, lengths) -> Tensor:
    """Average of ``h`` over the first ``lengths[b]`` positions of each row."""
    lengths = np.asarray(lengths)
    n = h.shape[1]
    weights = (np.arange(n)[None, :] < lengths[:, None]).astype(h.dtype) / lengths[:, None].astype(h.dtype)
    return ag.sum_(h * weights[:, :, None], axis=1)


def encoder_forward(model: EncoderModel, tokens, lengths):
    """Inference-mode forward for numpy results: ``(pooled, logits)`` arrays."""
    pooled, logits = model.forward(tokens, lengths, training=False)
    return pooled.data, logits.data


# ---------------------------------------------------------------------------
# supervised pretraining


@dataclass
class PretrainConfig:
    epochs: int = 15
    learning_rate: float = 2e-5
    batch_size: int = 16
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain(model: EncoderModel, dataset: TokenizedDataset, config: PretrainConfig,
             log_fn=None) -> tuple[EncoderModel, list[EpochLog]]:
    """Minimise cross-entropy of the pooled-embedding classifier with AdamW.

    ``dataset.class_names`` must line up with the model's classifier head.
    Training mutates ``model`` and returns it with the per-epoch log.
    """
    if len(dataset.class_names) != model.config.n_classes:
        raise ValueError(f"dataset has {len(dataset.class_names)} classes, model head expects {model.config.n_classes}")
    counts = dataset.class_count()
    empty = [c for c, k in counts.items() if k == 0]
    if empty:
        raise ValueError(f"classes with no training records: {empty}")
    if config.epochs < 0 or config.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = -(-len(dataset) // config.batch_size)
    total = max(steps_per_epoch * config.epochs, 1)
    schedule = WarmupLinearSchedule.with_warmup_fraction(total, config.learning_rate, config.warmup_fraction)
    opt = Adam(model.parameters(), AdamState(learning_rate=config.learning_rate, weight_decay=config.weight_decay),
               schedule=schedule, decay_mask=model.decay_mask())
    history = []
    for epoch in range(config.epochs):
        loss_sum, correct, lr = 0.0, 0, 0.0
        for idx in _batches(len(dataset), config.batch_size, rng):
            opt.zero_grad()
            _, logits = model.forward(dataset.sequences[idx], dataset.lengths[idx], training=True, rng=rng)
            loss = ag.cross_entropy(logits, dataset.labels[idx])
            loss.backward()
            lr = opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == dataset.labels[idx]).sum())
        entry = EpochLog(epoch=epoch + 1, loss=loss_sum / len(dataset), accuracy=correct / len(dataset), lr=lr)
        history.append(entry)
        logger.info("epoch %d loss %.4f acc %.4f", entry.epoch, entry.loss, entry.accuracy)
        if log_fn is not None:
            log_fn(entry)
    model.metadata.update(pretrain=config.to_dict(), classes=list(dataset.class_names), dataset=dataset.digest()[:16])
    return model, history


def class_pairs(class_names: Sequence[str]) -> list[tuple[str, str]]:
    return [tuple(p) for p in itertools.combinations(sorted(class_names), 2)]


def pretrain_pairs(dataset: TokenizedDataset, known_classes: Sequence[str], encoder_cfg: EncoderConfig,
                   config: PretrainConfig) -> dict[tuple[str, str], tuple[EncoderModel, list[EpochLog]]]:
    """One freshly initialised model per unordered pair of known classes."""
    out = {}
    for pair in class_pairs(known_classes):
        cfg = replace(encoder_cfg, n_classes=2)
        model = EncoderModel(cfg, seed=config.seed)
        out[pair] = pretrain(model, dataset.select_classes(pair), config)
    return out


def evaluate_classifier(model: EncoderModel, dataset: TokenizedDataset, batch_size: int = 64) -> np.ndarray:
    """Predicted class index per row (inference mode)."""
    preds = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        _, logits = encoder_forward(model, dataset.sequences[sl], dataset.lengths[sl])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# embedding extraction


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    config_hash: str = ""
    dataset_hash: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2 or self.rows.shape[0] != self.labels.shape[0]:
            raise ValueError("rows must be [n, d] with one label per row")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def subset(self, indices) -> EmbeddingMatrix:
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingMatrix(self.rows[idx], self.labels[idx], self.class_names, self.config_hash, self.dataset_hash)

    def by_class(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in range(len(self.class_names))}


def extract_embeddings(model: EncoderModel, dataset: TokenizedDataset, batch_size: int = 64) -> EmbeddingMatrix:
    """Pooled final-layer embedding for every row, no dropout, no graph kept."""
    if len(dataset) and int(dataset.lengths.max()) > model.config.max_positions:
        raise ValueError(
            f"dataset holds payloads of {int(dataset.lengths.max())} bytes; model accepts {model.config.max_positions}"
        )
    frozen = {n: p.requires_grad for n, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        chunks = []
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            pooled, _ = model.forward(dataset.sequences[sl], dataset.lengths[sl], training=False)
            chunks.append(pooled.data)
    finally:
        for n, p in model.params.items():
            p.requires_grad = frozen[n]
    rows = np.concatenate(chunks) if chunks else np.zeros((0, model.config.d_model), dtype=model.dtype)
    if np.isnan(rows).any():
        raise FloatingPointError("NaN in extracted embeddings")
    return EmbeddingMatrix(rows, dataset.labels.copy(), list(dataset.class_names), model.config.digest(),
                           dataset.digest()[:16])


# ---------------------------------------------------------------------------
# checkpoints
#
#   magic(8) | version u16 | header_len u32 | header JSON
#   | float32 LE arrays in header order | sha256 of the array block (32)

CHECKPOINT_MAGIC = b"FSDPCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def checkpoint_bytes(model: EncoderModel) -> bytes:
    arrays = [(name, p.data.astype("<f4")) for name, p in model.params.items()]
    header = json.dumps(
        {
            "config": model.config.to_dict(),
            "metadata": model.metadata,
            "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        },
        sort_keys=True,
    ).encode()
    block = b"".join(a.tobytes() for _, a in arrays)
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(header)), header, block,
                     hashlib.sha256(block).digest()])


def save_model(model: EncoderModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_model(path: str | Path, expected_config: EncoderConfig | None = None) -> EncoderModel:
    buf = Path(path).read_bytes()
    if len(buf) < 14 or buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<HI", buf[8:14])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(buf[14:14 + header_len])
        config = EncoderConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigMismatchError(f"{path}: invalid config block: {exc}") from None
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"{path}: checkpoint config {config} differs from expected {expected_config}")
    expected = _param_shapes(config)
    listed = {a["name"]: tuple(a["shape"]) for a in header["arrays"]}
    if listed != expected:
        bad = sorted(n for n in set(listed) | set(expected) if listed.get(n) != expected.get(n))
        raise ConfigMismatchError(f"{path}: array shapes disagree with config for {bad[:5]}")
    start = 14 + header_len
    size = sum(int(np.prod(s)) for s in listed.values()) * 4
    block = buf[start:start + size]
    if len(block) != size or len(buf) != start + size + 32:
        raise CheckpointError(f"{path}: checkpoint truncated or padded")
    if hashlib.sha256(block).digest() != buf[start + size:]:
        raise CheckpointChecksumError(f"{path}: checkpoint checksum mismatch")
    state, offset = {}, 0
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        state[entry["name"]] = np.frombuffer(block, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset += count * 4
    model = EncoderModel.__new__(EncoderModel)
    model.config = config
    model.dtype = np.dtype(np.float32)
    model.params = {n: Tensor(np.zeros(s, dtype=np.float32), requires_grad=True, name=n) for n, s in expected.items()}
    model.metadata = header.get("metadata", {})
    model._pe = positional_encoding(config.max_positions, config.d_model).astype(np.float32)
    model.load_state_dict(state)
    return model
