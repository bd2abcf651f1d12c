"""Model construction, training, evaluation, and prediction.

Builders turn declarative configs into concrete parameter tensors with
seeded initialization; ``train`` runs the mini-batch loop and records a
metrics curve; ``predict`` maps one raw query to ranked category ids.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nncore
from .errors import (
    ConfigMismatch,
    EmptyQuery,
    FormatVersionMismatch,
    InvalidArgument,
    InvalidSpec,
    VocabHashMismatch,
)
from .fsio import atomic_write_text, read_text
from .nncore import (
    AffineLayer,
    CnnModel,
    ConvFilterBank,
    DenseSoftmaxLayer,
    MlpModel,
    OptimizerConfig,
    OptimizerState,
    backward,
    batch_accuracy,
    batch_loss,
    forward,
    init_embedding,
    optimizer_step,
)
from .textprep import Dataset, Vocabulary, encode, normalize


def _validate_common(vocab_rows: int, embedding_dim: int, seq_len: int, class_ids: Sequence[int]) -> None:
    if vocab_rows < 2:
        raise InvalidSpec("vocab_rows must cover the pad and unk rows")
    if embedding_dim < 1:
        raise InvalidSpec("embedding_dim must be >= 1")
    if seq_len < 1:
        raise InvalidSpec("seq_len must be >= 1")
    if len(class_ids) < 2:
        raise InvalidSpec("need at least two classes")
    if len(set(class_ids)) != len(class_ids):
        raise InvalidSpec("class_ids must be distinct")


@dataclass(frozen=True)
class CnnConfig:
    """Hyperparameters of the convolutional classifier."""

    vocab_rows: int
    class_ids: tuple[int, ...]
    embedding_dim: int = 128
    filter_widths: tuple[int, ...] = (1, 2, 3)
    filters_per_width: int = 128
    keep_prob: float = 0.5
    activation: str = "relu"
    seq_len: int = 10
    seed: int = 0
    embedding_trainable: bool = True
    vocab_hash: str = ""

    def __post_init__(self) -> None:
        _validate_common(self.vocab_rows, self.embedding_dim, self.seq_len, self.class_ids)
        if not self.filter_widths:
            raise InvalidSpec("need at least one filter width")
        if len(set(self.filter_widths)) != len(self.filter_widths):
            raise InvalidSpec("filter widths must be distinct")
        for w in self.filter_widths:
            if not (1 <= w <= self.seq_len):
                raise InvalidSpec(f"filter width {w} must be in [1, seq_len={self.seq_len}]")
        if self.filters_per_width < 1:
            raise InvalidSpec("filters_per_width must be >= 1")
        if not (0.0 < self.keep_prob <= 1.0):
            raise InvalidSpec(f"keep_prob must be in (0,1], got {self.keep_prob}")
        if self.activation not in ("relu", "tanh"):
            raise InvalidSpec(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class MlpConfig:
    """Hyperparameters of the flat baseline."""

    vocab_rows: int
    class_ids: tuple[int, ...]
    embedding_dim: int = 128
    hidden_sizes: tuple[int, ...] = (200, 200)
    activation: str = "relu"
    seq_len: int = 10
    seed: int = 0
    embedding_trainable: bool = True
    vocab_hash: str = ""

    def __post_init__(self) -> None:
        _validate_common(self.vocab_rows, self.embedding_dim, self.seq_len, self.class_ids)
        if not (1 <= len(self.hidden_sizes) <= 2):
            raise InvalidSpec("the baseline takes one or two hidden layers")
        for h in self.hidden_sizes:
            if h < 1:
                raise InvalidSpec("hidden sizes must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise InvalidSpec(f"unknown activation {self.activation!r}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_cnn(config: CnnConfig) -> CnnModel:
    """Materialize a CNN with seeded init.

    Each tensor draws from its own seed stream so adding filters of one
    width never reshuffles another width's values. Embedding entries are
    uniform in (-1, 1); filters and the dense layer are Glorot-uniform
    with zero biases.
    """
    embedding = init_embedding(config.vocab_rows, config.embedding_dim, seed=[config.seed, 0])
    embedding.trainable = config.embedding_trainable
    banks = []
    for i, width in enumerate(config.filter_widths):
        rng = np.random.default_rng([config.seed, 1 + i])
        fan_in = width * config.embedding_dim
        filters = _glorot(rng, fan_in, config.filters_per_width,
                          (config.filters_per_width, width, config.embedding_dim))
        banks.append(ConvFilterBank(filters=filters, biases=np.zeros(config.filters_per_width)))
    m = config.filters_per_width * len(config.filter_widths)
    n_classes = len(config.class_ids)
    rng = np.random.default_rng([config.seed, 100])
    dense = DenseSoftmaxLayer(
        weights=_glorot(rng, m, n_classes, (m, n_classes)),
        biases=np.zeros(n_classes),
    )
    return CnnModel(
        embedding=embedding,
        banks=banks,
        dense=dense,
        activation=config.activation,
        keep_prob=config.keep_prob,
        seq_len=config.seq_len,
        class_ids=list(config.class_ids),
        vocab_hash=config.vocab_hash,
    )


def build_mlp(config: MlpConfig) -> MlpModel:
    """Materialize the baseline: flattened embeddings through dense layers."""
    embedding = init_embedding(config.vocab_rows, config.embedding_dim, seed=[config.seed, 0])
    embedding.trainable = config.embedding_trainable
    hidden = []
    fan_in = config.seq_len * config.embedding_dim
    for i, size in enumerate(config.hidden_sizes):
        rng = np.random.default_rng([config.seed, 1 + i])
        hidden.append(AffineLayer(
            weights=_glorot(rng, fan_in, size, (fan_in, size)),
            biases=np.zeros(size),
        ))
        fan_in = size
    n_classes = len(config.class_ids)
    rng = np.random.default_rng([config.seed, 100])
    dense = DenseSoftmaxLayer(
        weights=_glorot(rng, fan_in, n_classes, (fan_in, n_classes)),
        biases=np.zeros(n_classes),
    )
    return MlpModel(
        embedding=embedding,
        hidden=hidden,
        dense=dense,
        activation=config.activation,
        seq_len=config.seq_len,
        class_ids=list(config.class_ids),
        vocab_hash=config.vocab_hash,
    )


def parameter_count(model: nncore.Model) -> int:
    return sum(int(a.size) for a in model.parameters().values())


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsRow:
    step: int
    epoch: int
    split: str  # "train" | "eval"
    loss: float
    accuracy: float


@dataclass
class MetricsCurve:
    rows: list[MetricsRow] = field(default_factory=list)

    def eval_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.split == "eval"]

    def train_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.split == "train"]

    def to_csv(self, path: str | Path) -> None:
        lines = ["step,epoch,split,loss,accuracy"]
        lines.extend(
            f"{r.step},{r.epoch},{r.split},{r.loss:.6f},{r.accuracy:.6f}" for r in self.rows
        )
        atomic_write_text(path, "\n".join(lines) + "\n")

    @staticmethod
    def from_csv(path: str | Path) -> "MetricsCurve":
        text = read_text(path)
        lines = [ln for ln in text.split("\n") if ln != ""]
        if not lines or lines[0] != "step,epoch,split,loss,accuracy":
            raise FormatVersionMismatch("bad metrics header")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 5 or parts[2] not in ("train", "eval"):
                raise FormatVersionMismatch(f"bad metrics row: {ln!r}")
            try:
                rows.append(MetricsRow(
                    step=int(parts[0]),
                    epoch=int(parts[1]),
                    split=parts[2],
                    loss=float(parts[3]),
                    accuracy=float(parts[4]),
                ))
            except ValueError as exc:
                raise FormatVersionMismatch(f"bad metrics row: {ln!r}") from exc
        return MetricsCurve(rows=rows)


# ---------------------------------------------------------------------------
# training / evaluation


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    eval_batch_size: int = 512
    verbose: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise InvalidSpec("epochs and batch sizes must be >= 1")


def _check_compatible(model: nncore.Model, dataset: Dataset, what: str) -> None:
    if dataset.seq_len != model.seq_len:
        raise ConfigMismatch(f"{what} seq_len {dataset.seq_len} != model seq_len {model.seq_len}")
    if list(dataset.class_ids) != list(model.class_ids):
        raise ConfigMismatch(f"{what} class ids {dataset.class_ids} != model class ids {model.class_ids}")
    if dataset.ids.size and dataset.ids.max() >= model.embedding.rows:
        raise ConfigMismatch(f"{what} contains token ids beyond the embedding table")


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray  # (C, C), rows = true class, cols = predicted


def evaluate(model: nncore.Model, dataset: Dataset, batch_size: int = 512) -> EvalResult:
    """Inference-mode pass over a dataset: accuracy, mean loss, confusion."""
    _check_compatible(model, dataset, "eval dataset")
    n = len(dataset)
    if n == 0:
        raise InvalidArgument("cannot evaluate an empty dataset")
    n_classes = model.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        ids = dataset.ids[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        cache = forward(model, ids, train_mode=False, labels=labels)
        picked = cache.probs[np.arange(ids.shape[0]), labels]
        total_loss += float(-np.log(np.maximum(picked, nncore.PROB_FLOOR)).sum())
        preds = cache.probs.argmax(axis=1)
        correct += int((preds == labels).sum())
        np.add.at(confusion, (labels, preds), 1)
    return EvalResult(accuracy=correct / n, mean_loss=total_loss / n, confusion=confusion)


def train(
    model: nncore.Model,
    train_set: Dataset,
    eval_set: Dataset | None,
    config: TrainConfig,
    stop: "Callable[[MetricsCurve], bool] | None" = None,
) -> MetricsCurve:
    """Mini-batch training loop.

    Each epoch reshuffles with the run's rng stream and visits every
    example (the trailing partial batch included). One metrics row is
    recorded per optimizer step and, when an eval set is given, one eval
    row per epoch. ``stop``, checked on the curve after each epoch, ends
    the run early when it returns True. Fully deterministic for a fixed
    seed.
    """
    _check_compatible(model, train_set, "train dataset")
    if eval_set is not None:
        _check_compatible(model, eval_set, "eval dataset")
    if len(train_set) == 0:
        raise InvalidArgument("cannot train on an empty dataset")
    rng = np.random.default_rng([config.seed, 2])
    state = OptimizerState()
    params = model.parameters()
    frozen = model.frozen_parameters()
    curve = MetricsCurve()
    step = 0
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            cache = forward(
                model,
                train_set.ids[batch],
                train_mode=True,
                rng=rng,
                labels=train_set.labels[batch],
            )
            grads = backward(model, cache)
            optimizer_step(params, grads, state, config.optimizer, frozen=frozen)
            step += 1
            curve.rows.append(MetricsRow(
                step=step,
                epoch=epoch,
                split="train",
                loss=batch_loss(cache),
                accuracy=batch_accuracy(cache),
            ))
        if eval_set is not None:
            result = evaluate(model, eval_set, batch_size=config.eval_batch_size)
            curve.rows.append(MetricsRow(
                step=step,
                epoch=epoch,
                split="eval",
                loss=result.mean_loss,
                accuracy=result.accuracy,
            ))
            if config.verbose:
                print(
                    f"epoch {epoch}/{config.epochs} "
                    f"eval_loss={result.mean_loss:.6f} eval_acc={result.accuracy:.4f}",
                    file=sys.stderr,
                )
        elif config.verbose:
            last = curve.rows[-1]
            print(
                f"epoch {epoch}/{config.epochs} "
                f"train_loss={last.loss:.6f} train_acc={last.accuracy:.4f}",
                file=sys.stderr,
            )
        if stop is not None and stop(curve):
            break
    return curve


# ---------------------------------------------------------------------------
# prediction


def predict(
    model: nncore.Model,
    vocab: Vocabulary,
    query: str,
    top_k: int = 3,
) -> list[tuple[int, float]]:
    """Rank category ids for one raw query.

    Returns (category_id, probability) pairs sorted by probability
    descending, category id ascending on ties. The vocabulary must be the
    one the model was trained with (checked by content hash).
    """
    if top_k < 1:
        raise InvalidArgument("top_k must be >= 1")
    if model.vocab_hash and vocab.content_hash() != model.vocab_hash:
        raise VocabHashMismatch("vocabulary does not match the model checkpoint")
    query_norm = normalize(query)
    if query_norm == "":
        raise EmptyQuery("query is empty after normalization")
    ids = encode(query_norm, vocab, model.seq_len)
    cache = forward(model, ids[None, :], train_mode=False)
    probs = cache.probs[0]
    ranked = sorted(zip(model.class_ids, probs), key=lambda t: (-t[1], t[0]))
    return [(int(c), float(p)) for c, p in ranked[:min(top_k, len(ranked))]]
