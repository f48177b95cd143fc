"""Episodic prototypical-network classification over encoder embeddings.

A linear projection (:class:`ProtoHead`) maps embeddings into a metric
space; each class prototype is the mean of its projected support vectors and
queries go to the nearest prototype under squared Euclidean distance. The
head is trained on the per-query loss ``d(q, c_true) + log sum_k exp(-d(q, c_k))``
averaged over the episode.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import (EmbeddingMatrix, EncoderConfig, EncoderModel, PretrainConfig, extract_embeddings,
                      pretrain)
from .optim import Adam, AdamState
from .packet_ingest import TokenizedDataset
from .seeding import config_hash, derive_seed

logger = logging.getLogger(__name__)


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class FewShotProtocol:
    way: int = 3
    shot: int = 5
    query: int = 5
    epochs: int = 10
    episodes_per_epoch: int = 1000
    eval_episodes: int = 1000
    d_proj: int = 128
    learning_rate: float = 1e-3
    prototype_norm: str = "mean"
    resample_support: bool = True

    def __post_init__(self):
        if min(self.way, self.shot, self.query) < 1:
            raise ValueError("way, shot and query must be >= 1")
        if self.prototype_norm not in ("mean", "n_classes"):
            raise ValueError("prototype_norm must be 'mean' or 'n_classes'")
        if self.epochs < 0 or self.episodes_per_epoch < 0 or self.eval_episodes < 0:
            raise ValueError("epoch and episode counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Episode:
    """``support[k]`` is ``[shot, d]`` and ``query[k]`` is ``[query, d]`` for episode class ``k``."""

    classes: list[int]
    support: np.ndarray
    query: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def shot(self) -> int:
        return self.support.shape[1]

    @property
    def n_query(self) -> int:
        return self.query.shape[1]

    def query_targets(self) -> np.ndarray:
        """Episode-local target (0..way-1) for each row of ``query.reshape(-1, d)``."""
        return np.repeat(np.arange(self.way), self.n_query)


def sample_episode(embeddings: EmbeddingMatrix, way: int, shot: int, query: int, rng: np.random.Generator,
                   fixed_support: dict[int, np.ndarray] | None = None) -> Episode:
    """Draw ``way`` classes, then disjoint support/query rows within each class.

    ``fixed_support`` maps class -> row indices to reuse as support; queries
    are then drawn from the remaining rows of that class.
    """
    pools = embeddings.by_class()
    available = [c for c, rows in pools.items() if len(rows)]
    if way > len(available):
        raise InsufficientSamplesError(f"{way}-way episode needs {way} classes, only {len(available)} present")
    classes = sorted(int(c) for c in rng.choice(available, size=way, replace=False))
    sup_idx, qry_idx = [], []
    for c in classes:
        rows = pools[c]
        if fixed_support is not None and c in fixed_support:
            support = np.asarray(fixed_support[c])
            rest = np.setdiff1d(rows, support)
            if len(rest) < query:
                raise InsufficientSamplesError(
                    f"class {embeddings.class_names[c]!r} has {len(rest)} rows outside the fixed support, needs {query}")
            sup_idx.append(support)
            qry_idx.append(rng.choice(rest, size=query, replace=False))
            continue
        if len(rows) < shot + query:
            raise InsufficientSamplesError(
                f"class {embeddings.class_names[c]!r} has {len(rows)} rows, needs {shot + query} ({shot} shot + {query} query)")
        picked = rng.choice(rows, size=shot + query, replace=False)
        sup_idx.append(picked[:shot])
        qry_idx.append(picked[shot:])
    sup_idx, qry_idx = np.stack(sup_idx), np.stack(qry_idx)
    return Episode(classes, embeddings.rows[sup_idx], embeddings.rows[qry_idx], sup_idx, qry_idx)


class ProtoHead:
    """Affine projection ``x @ weight + bias`` into the prototype space."""

    def __init__(self, d_in: int, d_proj: int = 128, seed: int | np.random.Generator | None = 0, dtype=np.float64):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (d_in, d_proj)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, d_proj), requires_grad=True, dtype=dtype)

    @classmethod
    def identity(cls, d: int, dtype=np.float64) -> ProtoHead:
        head = cls.__new__(cls)
        head.weight = Tensor(np.eye(d), requires_grad=True, dtype=dtype)
        head.bias = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        return head

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.weight.dtype)
        return x @ self.weight + self.bias

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.weight.dtype)
        return x @ self.weight.data + self.bias.data

    def copy(self) -> ProtoHead:
        head = ProtoHead.__new__(ProtoHead)
        head.weight = Tensor(self.weight.data.copy(), requires_grad=True)
        head.bias = Tensor(self.bias.data.copy(), requires_grad=True)
        return head


@dataclass
class Prototypes:
    vectors: np.ndarray
    classes: list[int]


def _norm_factor(way: int, shot: int, prototype_norm: str) -> float:
    return 1.0 / (shot if prototype_norm == "mean" else way)


def compute_prototypes(episode: Episode, head: ProtoHead, prototype_norm: str = "mean") -> Prototypes:
    """Per-class sum of projected support vectors, scaled by 1/shot (default) or 1/way."""
    projected = head.project(episode.support.reshape(-1, episode.support.shape[-1]))
    projected = projected.reshape(episode.way, episode.shot, -1)
    vectors = projected.sum(axis=1) * _norm_factor(episode.way, episode.shot, prototype_norm)
    return Prototypes(vectors, list(episode.classes))


def squared_distances(points: np.ndarray, centres: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centres[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def classify_query(q, prototypes: Prototypes, head: ProtoHead) -> tuple[int, np.ndarray]:
    """Nearest prototype for a single embedding; ties go to the lower class index."""
    z = head.project(np.asarray(q)[None, :])
    d = squared_distances(z, prototypes.vectors)[0]
    return prototypes.classes[int(np.argmin(d))], d


def classify_queries(queries: np.ndarray, prototypes: Prototypes, head: ProtoHead) -> tuple[np.ndarray, np.ndarray]:
    d = squared_distances(head.project(queries), prototypes.vectors)
    return np.asarray(prototypes.classes)[d.argmin(axis=1)], d


def episode_distances(episode: Episode, head: ProtoHead, prototype_norm: str = "mean") -> Tensor:
    """Differentiable ``[way * query, way]`` squared distances from projected queries to prototypes."""
    d_in = episode.support.shape[-1]
    support = head(episode.support.reshape(-1, d_in))
    support = ag.reshape(support, (episode.way, episode.shot, -1))
    protos = ag.scale(ag.sum_(support, axis=1), _norm_factor(episode.way, episode.shot, prototype_norm))
    queries = head(episode.query.reshape(-1, d_in))
    diff = ag.reshape(queries, (queries.shape[0], 1, -1)) - ag.reshape(protos, (1, episode.way, -1))
    return ag.sum_(diff * diff, axis=-1)


def episode_loss_terms(episode: Episode, head: ProtoHead, prototype_norm: str = "mean") -> Tensor:
    """Per-query bracket ``d(q, c_true) + log sum_k exp(-d(q, c_k))``."""
    d = episode_distances(episode, head, prototype_norm)
    onehot = np.eye(episode.way, dtype=d.dtype)[episode.query_targets()]
    return ag.sum_(d * onehot, axis=1) + ag.logsumexp(-d, axis=1)


def episode_loss(episode: Episode, head: ProtoHead, prototype_norm: str = "mean") -> Tensor:
    """Episode objective: the per-query terms summed with weight 1/(way * query)."""
    terms = episode_loss_terms(episode, head, prototype_norm)
    return ag.scale(ag.sum_(terms), 1.0 / (episode.way * episode.n_query))


def train_fewshot(embeddings: EmbeddingMatrix, protocol: FewShotProtocol, seed: int,
                  head: ProtoHead | None = None) -> tuple[ProtoHead, list[float]]:
    """Episodic Adam training of the projection head; returns the head and per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    if head is None:
        head = ProtoHead(embeddings.rows.shape[1], protocol.d_proj, seed=rng)
    opt = Adam(head.parameters(), AdamState(learning_rate=protocol.learning_rate, weight_decay=0.0))
    curve = []
    for epoch in range(protocol.epochs):
        if protocol.episodes_per_epoch == 0:
            break
        total = 0.0
        for _ in range(protocol.episodes_per_epoch):
            episode = sample_episode(embeddings, protocol.way, protocol.shot, protocol.query, rng)
            opt.zero_grad()
            loss = episode_loss(episode, head, protocol.prototype_norm)
            loss.backward()
            opt.step()
            total += loss.item()
        curve.append(total / protocol.episodes_per_epoch)
        logger.debug("few-shot epoch %d loss %.4f", epoch + 1, curve[-1])
    return head, curve


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    accuracy: float
    f1_macro: float
    f1_per_class: dict[str, float]
    precision_per_class: dict[str, float]
    recall_per_class: dict[str, float]
    confusion: list[list[int]]
    class_names: list[str]
    episodes: int = 0
    seed: int | None = None
    config_hash: str = ""
    protocol: dict = field(default_factory=dict)
    iterations: list[dict] = field(default_factory=list)
    accuracy_std: float | None = None
    f1_macro_std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(confusion, class_names: Sequence[str] | None = None, **extra) -> MetricsReport:
    """Rows are true classes, columns predictions. Undefined ratios count as 0."""
    cm = np.asarray(confusion, dtype=np.int64)
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.shape[0])]
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    actual = cm.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    total = cm.sum()
    return MetricsReport(
        accuracy=float(tp.sum() / total) if total else 0.0,
        f1_macro=float(f1.mean()) if len(f1) else 0.0,
        f1_per_class={n: float(v) for n, v in zip(names, f1)},
        precision_per_class={n: float(v) for n, v in zip(names, precision)},
        recall_per_class={n: float(v) for n, v in zip(names, recall)},
        confusion=cm.tolist(),
        class_names=names,
        **extra,
    )


def evaluate(embeddings: EmbeddingMatrix, head: ProtoHead, protocol: FewShotProtocol, n_eval_episodes: int | None = None,
             seed: int = 0) -> MetricsReport:
    """Classify every episode's queries against prototypes built from that episode's support.

    With ``protocol.resample_support`` False, one support set per class is drawn
    once and reused; queries always come from rows outside it.
    """
    n_eval_episodes = protocol.eval_episodes if n_eval_episodes is None else n_eval_episodes
    rng = np.random.default_rng(seed)
    n_classes = len(embeddings.class_names)
    fixed = None
    if not protocol.resample_support:
        fixed = {}
        for c, rows in embeddings.by_class().items():
            if len(rows) < protocol.shot + protocol.query:
                raise InsufficientSamplesError(
                    f"class {embeddings.class_names[c]!r} has {len(rows)} rows, needs {protocol.shot + protocol.query}")
            fixed[c] = rng.choice(rows, size=protocol.shot, replace=False)
    y_true, y_pred = [], []
    for _ in range(n_eval_episodes):
        episode = sample_episode(embeddings, protocol.way, protocol.shot, protocol.query, rng, fixed_support=fixed)
        protos = compute_prototypes(episode, head, protocol.prototype_norm)
        preds, _ = classify_queries(episode.query.reshape(-1, episode.query.shape[-1]), protos, head)
        y_pred.append(preds)
        y_true.append(np.repeat(episode.classes, episode.n_query))
    cm = confusion_matrix(np.concatenate(y_true) if y_true else [], np.concatenate(y_pred) if y_pred else [], n_classes)
    return metrics_from_confusion(
        cm, embeddings.class_names, episodes=n_eval_episodes, seed=seed, protocol=protocol.to_dict(),
        config_hash=config_hash({"protocol": protocol.to_dict(), "encoder": embeddings.config_hash}),
    )


# ---------------------------------------------------------------------------
# full experiment: pretrain on a known pair, few-shot over all classes


def split_per_class(labels: np.ndarray, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test row indices."""
    train, test = [], []
    for c in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(len(rows) * (1.0 - test_fraction)))
        train.append(rows[:cut])
        test.append(rows[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def aggregate_reports(reports: Sequence[MetricsReport], **extra) -> MetricsReport:
    """Mean accuracy/F1 over iterations with sample standard deviations; confusions are summed."""
    if not reports:
        raise ValueError("nothing to aggregate")
    acc = np.array([r.accuracy for r in reports])
    f1 = np.array([r.f1_macro for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    names = reports[0].class_names
    confusion = np.sum([np.asarray(r.confusion) for r in reports], axis=0).tolist()
    per_class = {n: float(np.mean([r.f1_per_class[n] for r in reports])) for n in names}
    prec = {n: float(np.mean([r.precision_per_class[n] for r in reports])) for n in names}
    rec = {n: float(np.mean([r.recall_per_class[n] for r in reports])) for n in names}
    iterations = [
        {"iteration": i, "seed": r.seed, "accuracy": r.accuracy, "f1_macro": r.f1_macro} for i, r in enumerate(reports)
    ]
    extra.setdefault("episodes", int(sum(r.episodes for r in reports)))
    return MetricsReport(
        accuracy=float(acc.mean()), f1_macro=float(f1.mean()), f1_per_class=per_class, precision_per_class=prec,
        recall_per_class=rec, confusion=confusion, class_names=names, iterations=iterations,
        accuracy_std=float(acc.std(ddof=ddof)), f1_macro_std=float(f1.std(ddof=ddof)), **extra,
    )


def run_experiment_shots(dataset: TokenizedDataset, known_pair: Sequence[str], novel_class: str,
                         encoder_cfg: EncoderConfig, pretrain_cfg: PretrainConfig, protocol: FewShotProtocol,
                         shots: Sequence[int], iterations: int = 10, seed: int = 0,
                         test_fraction: float = 0.5) -> dict[int, MetricsReport]:
    """Run the known-pair / novel-class experiment for several shot counts.

    Each iteration re-initialises and pretrains the encoder once, then trains
    and evaluates a fresh head per shot setting on the same embeddings.
    """
    classes = sorted([*known_pair, novel_class])
    if len(set(classes)) != 3 or len(known_pair) != 2:
        raise ValueError("need two distinct known classes and a distinct novel class")
    data = dataset.select_classes(classes)
    per_shot: dict[int, list[MetricsReport]] = {s: [] for s in shots}
    for it in range(iterations):
        iter_seed = derive_seed(seed, "iteration", it)
        split_rng = np.random.default_rng(derive_seed(iter_seed, "split"))
        train_idx, test_idx = split_per_class(data.labels, test_fraction, split_rng)
        train, test = data.subset(train_idx), data.subset(test_idx)
        model = EncoderModel(replace(encoder_cfg, n_classes=2), seed=derive_seed(iter_seed, "pretrain", "init"))
        pcfg = replace(pretrain_cfg, seed=derive_seed(iter_seed, "pretrain"))
        model, _ = pretrain(model, train.select_classes(sorted(known_pair)), pcfg)
        train_emb, test_emb = extract_embeddings(model, train), extract_embeddings(model, test)
        for shot in shots:
            proto = replace(protocol, shot=shot)
            fs_seed = derive_seed(iter_seed, "fewshot", shot)
            head, _ = train_fewshot(train_emb, proto, seed=fs_seed)
            report = evaluate(test_emb, head, proto, seed=derive_seed(fs_seed, "eval"))
            report.seed = iter_seed
            per_shot[shot].append(report)
            logger.info("%s+%s -> %s, %d-shot, iteration %d: acc %.4f", *known_pair, novel_class, shot, it,
                        report.accuracy)
    out = {}
    for shot, reports in per_shot.items():
        proto = replace(protocol, shot=shot)
        settings = {
            "known_pair": list(known_pair), "novel_class": novel_class, "encoder": encoder_cfg.to_dict(),
            "pretrain": pretrain_cfg.to_dict(), "protocol": proto.to_dict(), "iterations": iterations,
            "test_fraction": test_fraction,
        }
        out[shot] = aggregate_reports(reports, seed=seed, protocol=proto.to_dict(), config_hash=config_hash(settings))
    return out


def run_experiment(dataset: TokenizedDataset, known_pair: Sequence[str], novel_class: str, encoder_cfg: EncoderConfig,
                   fewshot_protocol: FewShotProtocol, iterations: int = 10, pretrain_cfg: PretrainConfig | None = None,
                   seed: int = 0, test_fraction: float = 0.5) -> MetricsReport:
    """Mean/std accuracy and F1 over ``iterations`` re-initialised runs."""
    pretrain_cfg = pretrain_cfg or PretrainConfig()
    return run_experiment_shots(dataset, known_pair, novel_class, encoder_cfg, pretrain_cfg, fewshot_protocol,
                                [fewshot_protocol.shot], iterations, seed, test_fraction)[fewshot_protocol.shot]
