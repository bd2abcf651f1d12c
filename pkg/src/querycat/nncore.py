"""Dense numeric kernel for the convolutional query classifier.

Everything here is plain numpy in 64-bit floats: embedding lookup,
multi-width 1-D convolution over word windows, max-over-time pooling,
inverted dropout, a dense softmax head, hand-derived backpropagation,
finite-difference gradient checking, Adam/SGD updates, and a binary
checkpoint container (serialized as 32-bit floats).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    FormatVersionMismatch,
    IndexOutOfRange,
    InvalidArgument,
    ShapeMismatch,
    StateMissing,
)
from .fsio import atomic_write_bytes, read_bytes

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"QCAT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layer containers


@dataclass
class EmbeddingMatrix:
    """Token-id to vector table; row 0 is the padding row."""

    weights: np.ndarray  # (rows, k)
    trainable: bool = True

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class ConvFilterBank:
    """All filters of one window width.

    ``filters`` is (num_filters, width, k); each filter's dot product with a
    width-window of embedded words plus its bias feeds the activation.
    """

    filters: np.ndarray
    biases: np.ndarray

    @property
    def width(self) -> int:
        return self.filters.shape[1]

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]


@dataclass
class FeatureMap:
    """Convolution outputs, one row per filter, one column per window
    position (n - width + 1 columns)."""

    values: np.ndarray  # (num_filters, positions)


@dataclass
class DenseSoftmaxLayer:
    """Affine map from pooled features to class logits."""

    weights: np.ndarray  # (m, C)
    biases: np.ndarray  # (C,)


@dataclass(frozen=True)
class DropoutSpec:
    keep_prob: float
    mode: str = "train"  # "train" | "inference"

    def __post_init__(self) -> None:
        if not (0.0 < self.keep_prob <= 1.0):
            raise InvalidArgument(f"keep_prob must be in (0,1], got {self.keep_prob}")
        if self.mode not in ("train", "inference"):
            raise InvalidArgument(f"unknown dropout mode {self.mode!r}")


# ---------------------------------------------------------------------------
# elementwise pieces


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "tanh":
        return np.tanh(pre)
    raise InvalidArgument(f"unknown activation {activation!r}")


def _activation_grad(act: np.ndarray, activation: str) -> np.ndarray:
    # Both gradients are recoverable from the post-activation values.
    if activation == "relu":
        return (act > 0.0).astype(act.dtype)
    if activation == "tanh":
        return 1.0 - act * act
    raise InvalidArgument(f"unknown activation {activation!r}")


def init_embedding(rows: int, dim: int, seed: int) -> EmbeddingMatrix:
    """I.i.d. uniform entries strictly inside (-1, 1), seeded."""
    if rows < 2 or dim < 1:
        raise InvalidArgument("embedding needs rows >= 2 and dim >= 1")
    w = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(rows, dim))
    # uniform() includes the low endpoint; nudge the measure-zero case inside.
    w = np.where(w == -1.0, np.nextafter(-1.0, 0.0), w)
    return EmbeddingMatrix(weights=w)


def embed(ids: np.ndarray, embedding: EmbeddingMatrix) -> np.ndarray:
    """Gather embedding rows for one id vector; returns (n, k)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= embedding.rows):
        raise IndexOutOfRange(f"ids must be in [0, {embedding.rows})")
    return embedding.weights[ids]


def _window_stack(X: np.ndarray, width: int) -> np.ndarray:
    """(B, n, k) -> (B, n-width+1, width*k) word windows, row-major."""
    B, n, k = X.shape
    if width == 1:
        return X.reshape(B, n, k)
    win = np.lib.stride_tricks.sliding_window_view(X, (width,), axis=1)
    return win.transpose(0, 1, 3, 2).reshape(B, n - width + 1, width * k)


def conv_forward(X: np.ndarray, bank: ConvFilterBank, activation: str = "relu") -> FeatureMap:
    """Convolve one embedded query (n, k) against a filter bank.

    values[f][i] = activation(<filter_f, X[i:i+width]> + bias_f) for every
    window position i; requires n >= width.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch("X must be (n, k)")
    n, k = X.shape
    if k != bank.filters.shape[2]:
        raise ShapeMismatch(f"filter dim {bank.filters.shape[2]} != embedding dim {k}")
    if n < bank.width:
        raise ShapeMismatch(f"sequence length {n} shorter than filter width {bank.width}")
    windows = _window_stack(X[None], bank.width)[0]  # (P, width*k)
    flat = bank.filters.reshape(bank.num_filters, -1)
    pre = windows @ flat.T + bank.biases  # (P, F)
    return FeatureMap(values=_activate(pre, activation).T)


def max_pool(fm: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-filter maximum over window positions.

    Returns (pooled values, argmax positions); the argmax is recorded for
    backprop routing and ties go to the lowest position index.
    """
    values = np.asarray(fm.values)
    if values.ndim != 2 or values.shape[1] < 1:
        raise ShapeMismatch("feature map needs at least one column")
    return values.max(axis=1), values.argmax(axis=1)


def dropout(z: np.ndarray, spec: DropoutSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Inverted dropout: in train mode, surviving coordinates are scaled by
    1/keep_prob so the expected output equals the input; in inference mode
    this is the identity."""
    z = np.asarray(z, dtype=np.float64)
    if spec.mode == "inference" or spec.keep_prob == 1.0:
        return z.copy()
    if rng is None:
        raise InvalidArgument("train-mode dropout needs an rng")
    mask = rng.random(z.shape) < spec.keep_prob
    return z * mask / spec.keep_prob


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax(z: np.ndarray, layer: DenseSoftmaxLayer) -> np.ndarray:
    """Class probabilities for one pooled feature vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (layer.weights.shape[0],):
        raise ShapeMismatch(f"z must be ({layer.weights.shape[0]},), got {z.shape}")
    return softmax(z @ layer.weights + layer.biases)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """Negative log-likelihood of the true class, floored at 1e-12."""
    probs = np.asarray(probs)
    if not (0 <= label < probs.shape[-1]):
        raise InvalidArgument(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(float(probs[label]), PROB_FLOOR)))


# ---------------------------------------------------------------------------
# model containers


@dataclass
class AffineLayer:
    """Hidden affine layer of the MLP baseline."""

    weights: np.ndarray  # (in, out)
    biases: np.ndarray  # (out,)


@dataclass
class CnnModel:
    """Multi-width convolutional classifier over encoded queries."""

    embedding: EmbeddingMatrix
    banks: list[ConvFilterBank]
    dense: DenseSoftmaxLayer
    activation: str = "relu"
    keep_prob: float = 0.5
    seq_len: int = 10
    class_ids: list[int] = field(default_factory=list)
    vocab_hash: str = ""

    @property
    def n_classes(self) -> int:
        return self.dense.biases.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {"embedding": self.embedding.weights}
        for bank in self.banks:
            params[f"conv{bank.width}.filters"] = bank.filters
            params[f"conv{bank.width}.biases"] = bank.biases
        params["dense.weights"] = self.dense.weights
        params["dense.biases"] = self.dense.biases
        return params

    def frozen_parameters(self) -> frozenset[str]:
        return frozenset() if self.embedding.trainable else frozenset({"embedding"})


@dataclass
class MlpModel:
    """Baseline: flattened embedded query through 1-2 hidden layers."""

    embedding: EmbeddingMatrix
    hidden: list[AffineLayer]
    dense: DenseSoftmaxLayer
    activation: str = "relu"
    seq_len: int = 10
    class_ids: list[int] = field(default_factory=list)
    vocab_hash: str = ""
    keep_prob: float = 1.0  # the baseline trains without dropout

    @property
    def n_classes(self) -> int:
        return self.dense.biases.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {"embedding": self.embedding.weights}
        for i, layer in enumerate(self.hidden, start=1):
            params[f"hidden{i}.weights"] = layer.weights
            params[f"hidden{i}.biases"] = layer.biases
        params["dense.weights"] = self.dense.weights
        params["dense.biases"] = self.dense.biases
        return params

    def frozen_parameters(self) -> frozenset[str]:
        return frozenset() if self.embedding.trainable else frozenset({"embedding"})


Model = CnnModel | MlpModel


# ---------------------------------------------------------------------------
# batched forward / backward


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward pass."""

    ids: np.ndarray
    labels: np.ndarray | None
    X: np.ndarray
    windows: list[np.ndarray]  # CNN: per bank (B, P, width*k)
    preacts: list[np.ndarray]  # per bank / hidden layer (pre-activation)
    acts: list[np.ndarray]
    argmaxes: list[np.ndarray]  # CNN only, per bank (B, F)
    z: np.ndarray  # penultimate features before dropout (B, m)
    mask_scaled: np.ndarray | None  # dropout mask / keep_prob, or None
    z_dropped: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _check_ids(ids: np.ndarray, model: Model) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] != model.seq_len:
        raise ShapeMismatch(f"ids must be (B, {model.seq_len})")
    if ids.size and (ids.min() < 0 or ids.max() >= model.embedding.rows):
        raise IndexOutOfRange(f"ids must be in [0, {model.embedding.rows})")
    return ids


def forward(
    model: Model,
    ids: np.ndarray,
    *,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    labels: np.ndarray | None = None,
) -> ForwardCache:
    """Run the model over a batch of id vectors.

    In train mode dropout masks are drawn from ``rng``; in inference mode
    dropout is the identity.
    """
    ids = _check_ids(ids, model)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (ids.shape[0],):
            raise ShapeMismatch("labels must be one per example")
    B = ids.shape[0]
    X = model.embedding.weights[ids]  # (B, n, k)

    if isinstance(model, CnnModel):
        windows, preacts, acts, argmaxes, pooled = [], [], [], [], []
        for bank in model.banks:
            win = _window_stack(X, bank.width)
            P = win.shape[1]
            # one 2-D GEMM instead of B small batched ones
            pre = (win.reshape(B * P, -1) @ bank.filters.reshape(bank.num_filters, -1).T
                   ).reshape(B, P, bank.num_filters) + bank.biases
            act = _activate(pre, model.activation)
            am = act.argmax(axis=1)  # (B, F); ties -> lowest position
            windows.append(win)
            preacts.append(pre)
            acts.append(act)
            argmaxes.append(am)
            pooled.append(np.take_along_axis(act, am[:, None, :], axis=1)[:, 0, :])
        z = np.concatenate(pooled, axis=1)
    else:
        windows, argmaxes = [], []
        preacts, acts = [], []
        h = X.reshape(B, -1)
        for layer in model.hidden:
            pre = h @ layer.weights + layer.biases
            act = _activate(pre, model.activation)
            preacts.append(pre)
            acts.append(act)
            h = act
        z = h

    mask_scaled = None
    z_dropped = z
    if train_mode and model.keep_prob < 1.0:
        if rng is None:
            raise InvalidArgument("train-mode forward needs an rng for dropout")
        mask_scaled = (rng.random(z.shape) < model.keep_prob) / model.keep_prob
        z_dropped = z * mask_scaled

    logits = z_dropped @ model.dense.weights + model.dense.biases
    probs = softmax(logits)
    return ForwardCache(
        ids=ids,
        labels=labels,
        X=X,
        windows=windows,
        preacts=preacts,
        acts=acts,
        argmaxes=argmaxes,
        z=z,
        mask_scaled=mask_scaled,
        z_dropped=z_dropped,
        logits=logits,
        probs=probs,
    )


def batch_loss(cache: ForwardCache) -> float:
    """Mean cross-entropy over the batch, with the probability floor."""
    if cache.labels is None:
        raise StateMissing("forward pass was run without labels")
    picked = cache.probs[np.arange(cache.probs.shape[0]), cache.labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def batch_accuracy(cache: ForwardCache) -> float:
    if cache.labels is None:
        raise StateMissing("forward pass was run without labels")
    return float((cache.probs.argmax(axis=1) == cache.labels).mean())


def backward(model: Model, cache: ForwardCache | None) -> dict[str, np.ndarray]:
    """Exact gradients of the mean batch loss for every parameter tensor.

    Pooling routes gradient only to argmax positions; dropout routes only
    through surviving scaled coordinates; examples whose true-class
    probability sits at the floor contribute zero gradient (the clamped
    loss is locally constant there).
    """
    if cache is None:
        raise StateMissing("backward requires a cached forward pass")
    if cache.labels is None:
        raise StateMissing("backward requires labels in the forward cache")
    B = cache.probs.shape[0]
    dlogits = cache.probs.copy()
    dlogits[np.arange(B), cache.labels] -= 1.0
    dlogits /= B
    floored = cache.probs[np.arange(B), cache.labels] <= PROB_FLOOR
    if floored.any():
        dlogits[floored] = 0.0

    grads: dict[str, np.ndarray] = {}
    grads["dense.weights"] = cache.z_dropped.T @ dlogits
    grads["dense.biases"] = dlogits.sum(axis=0)
    dz = dlogits @ model.dense.weights.T
    if cache.mask_scaled is not None:
        dz = dz * cache.mask_scaled

    if isinstance(model, CnnModel):
        dX = np.zeros_like(cache.X)
        offset = 0
        for bank, win, act, am in zip(model.banks, cache.windows, cache.acts, cache.argmaxes):
            F = bank.num_filters
            P = act.shape[1]
            dpooled = dz[:, offset:offset + F]
            offset += F
            dact = np.zeros_like(act)
            np.put_along_axis(dact, am[:, None, :], dpooled[:, None, :], axis=1)
            dpre = dact * _activation_grad(act, model.activation)
            flat = dpre.reshape(-1, F)
            grads[f"conv{bank.width}.filters"] = (
                flat.T @ win.reshape(-1, bank.width * model.embedding.dim)
            ).reshape(bank.filters.shape)
            grads[f"conv{bank.width}.biases"] = flat.sum(axis=0)
            dwin = (flat @ bank.filters.reshape(F, -1)).reshape(
                B, P, bank.width, model.embedding.dim
            )
            for o in range(bank.width):
                dX[:, o:o + P, :] += dwin[:, :, o, :]
        dE = np.zeros_like(model.embedding.weights)
        np.add.at(dE, cache.ids.ravel(), dX.reshape(-1, model.embedding.dim))
        grads["embedding"] = dE
    else:
        dh = dz
        inputs = [cache.X.reshape(B, -1)] + cache.acts[:-1]
        for i in range(len(model.hidden) - 1, -1, -1):
            layer = model.hidden[i]
            dpre = dh * _activation_grad(cache.acts[i], model.activation)
            grads[f"hidden{i + 1}.weights"] = inputs[i].T @ dpre
            grads[f"hidden{i + 1}.biases"] = dpre.sum(axis=0)
            dh = dpre @ layer.weights.T
        dX = dh.reshape(cache.X.shape)
        dE = np.zeros_like(model.embedding.weights)
        np.add.at(dE, cache.ids.ravel(), dX.reshape(-1, model.embedding.dim))
        grads["embedding"] = dE

    # Insertion order mirrors model.parameters().
    return {name: grads[name] for name in model.parameters()}


# ---------------------------------------------------------------------------
# gradient checking


def _fragile_coordinates(model: Model, cache: ForwardCache, margin: float) -> dict[str, np.ndarray | None]:
    """Coordinates whose finite differences may cross a non-smooth point.

    A filter is fragile when a ReLU pre-activation of its own sits within
    ``margin`` of zero or when its top-two pooled features are within
    ``margin`` of a tie; fragile filters poison their own bank rows and,
    conservatively, the whole embedding. Dense/output coordinates only see
    smooth functions and are never skipped.
    """
    skip: dict[str, np.ndarray | None] = {name: None for name in model.parameters()}
    if isinstance(model, CnnModel):
        any_fragile = False
        for bank, pre, act in zip(model.banks, cache.preacts, cache.acts):
            fragile = np.zeros(bank.num_filters, dtype=bool)
            if model.activation == "relu":
                fragile |= (np.abs(pre) < margin).any(axis=(0, 1))
            if act.shape[1] > 1:
                top2 = np.sort(act, axis=1)[:, -2:, :]
                fragile |= ((top2[:, 1, :] - top2[:, 0, :]) < margin).any(axis=0)
            if fragile.any():
                any_fragile = True
                mask = np.zeros(bank.filters.shape, dtype=bool)
                mask[fragile] = True
                skip[f"conv{bank.width}.filters"] = mask
                skip[f"conv{bank.width}.biases"] = fragile.copy()
        if any_fragile:
            skip["embedding"] = np.ones(model.embedding.weights.shape, dtype=bool)
    elif model.activation == "relu":
        kinked = [bool((np.abs(pre) < margin).any()) for pre in cache.preacts]
        if any(kinked):
            deepest = max(i for i, k in enumerate(kinked) if k)
            skip["embedding"] = np.ones(model.embedding.weights.shape, dtype=bool)
            for i in range(deepest + 1):
                skip[f"hidden{i + 1}.weights"] = np.ones(model.hidden[i].weights.shape, dtype=bool)
                skip[f"hidden{i + 1}.biases"] = np.ones(model.hidden[i].biases.shape, dtype=bool)
    return skip


def grad_check(
    model: Model,
    ids: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-4,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Dropout is disabled for the check. When ``analytic`` is omitted the
    model's own backward pass supplies the gradients; passing a perturbed
    gradient dict lets callers verify that the check actually fails.
    Coordinates whose finite differences would cross a ReLU kink or a
    pooling tie (within 10 * epsilon) are skipped.
    """
    cache = forward(model, ids, train_mode=False, labels=labels)
    if analytic is None:
        analytic = backward(model, cache)
    skip = _fragile_coordinates(model, cache, 10.0 * epsilon)

    def loss_now() -> float:
        return batch_loss(forward(model, ids, train_mode=False, labels=labels))

    worst = 0.0
    for name, tensor in model.parameters().items():
        ga = np.asarray(analytic[name]).reshape(-1)
        flat = tensor.reshape(-1)
        skip_mask = skip.get(name)
        skip_flat = None if skip_mask is None else skip_mask.reshape(-1)
        for j in range(flat.size):
            if skip_flat is not None and skip_flat[j]:
                continue
            original = flat[j]
            flat[j] = original + epsilon
            loss_plus = loss_now()
            flat[j] = original - epsilon
            loss_minus = loss_now()
            flat[j] = original
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            err = abs(ga[j] - numeric) / max(abs(ga[j]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.algorithm not in ("adam", "sgd"):
            raise InvalidArgument(f"unknown optimizer {self.algorithm!r}")


@dataclass
class OptimizerState:
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    hp: OptimizerConfig,
    frozen: Iterable[str] = (),
) -> None:
    """Update parameters in place with one SGD or bias-corrected Adam step.

    Frozen tensors are untouched and accumulate no moment state; lr = 0 is
    an exact no-op on the parameters.
    """
    frozen = frozenset(frozen)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if hp.algorithm == "sgd":
            if hp.lr != 0.0:
                p -= hp.lr * g
            continue
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * g * g
        if hp.lr != 0.0:
            # update = lr * mhat / (sqrt(vhat) + eps) with mhat = m/(1-b1^t),
            # vhat = v/(1-b2^t); factoring the corrections into scalars does
            # the same arithmetic in fewer full-array passes
            bc2_root = np.sqrt(1.0 - hp.beta2 ** t)
            scale = hp.lr * bc2_root / (1.0 - hp.beta1 ** t)
            denom = np.sqrt(v)
            denom += hp.eps * bc2_root
            np.divide(m, denom, out=denom)
            denom *= scale
            p -= denom


# ---------------------------------------------------------------------------
# checkpoints


def _model_hyper(model: Model) -> dict:
    if isinstance(model, CnnModel):
        return {
            "kind": "cnn",
            "activation": model.activation,
            "keep_prob": model.keep_prob,
            "seq_len": model.seq_len,
            "embedding_trainable": model.embedding.trainable,
            "filter_widths": [bank.width for bank in model.banks],
        }
    return {
        "kind": "mlp",
        "activation": model.activation,
        "seq_len": model.seq_len,
        "embedding_trainable": model.embedding.trainable,
        "hidden_sizes": [layer.biases.shape[0] for layer in model.hidden],
    }


def save_model(model: Model, path: str | Path) -> None:
    """Write the checkpoint container.

    Layout: magic "QCAT", u32 LE format version, u32 LE header length, a
    UTF-8 JSON header (hyperparameters, tensor manifest, vocab hash, class
    ids), then each tensor as little-endian float32, row-major, in manifest
    order.
    """
    params = model.parameters()
    header = {
        "hyper": _model_hyper(model),
        "vocab_hash": model.vocab_hash,
        "class_ids": list(model.class_ids),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in params.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(header_bytes)), header_bytes]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.values())
    atomic_write_bytes(path, b"".join(parts))


def _take(data: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(data):
        raise FormatVersionMismatch(f"checkpoint truncated in {what}")
    return data[offset:offset + size], offset + size


def load_model(path: str | Path) -> Model:
    """Read a checkpoint container back into a model (float64 tensors)."""
    data = read_bytes(path)
    magic, offset = _take(data, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatVersionMismatch("not a QCAT checkpoint")
    raw, offset = _take(data, offset, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(f"unsupported checkpoint version {version}")
    raw, offset = _take(data, offset, 4, "header length")
    header_len = struct.unpack("<I", raw)[0]
    raw, offset = _take(data, offset, header_len, "header")
    try:
        header = json.loads(raw.decode("utf-8"))
        hyper = header["hyper"]
        kind = hyper["kind"]
        manifest = header["tensors"]
        class_ids = [int(c) for c in header["class_ids"]]
        vocab_hash = str(header["vocab_hash"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatVersionMismatch(f"bad checkpoint header: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest:
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatVersionMismatch("bad tensor manifest") from exc
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw, offset = _take(data, offset, 4 * count, f"tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if offset != len(data):
        raise FormatVersionMismatch("trailing bytes after tensor payload")

    def grab(name: str) -> np.ndarray:
        if name not in tensors:
            raise FormatVersionMismatch(f"checkpoint missing tensor {name}")
        return tensors[name]

    try:
        embedding = EmbeddingMatrix(weights=grab("embedding"), trainable=bool(hyper["embedding_trainable"]))
        if kind == "cnn":
            banks = []
            for width in hyper["filter_widths"]:
                filters = grab(f"conv{width}.filters")
                if filters.shape[1] != width:
                    raise FormatVersionMismatch("manifest width disagrees with tensor shape")
                banks.append(ConvFilterBank(filters=filters, biases=grab(f"conv{width}.biases")))
            return CnnModel(
                embedding=embedding,
                banks=banks,
                dense=DenseSoftmaxLayer(weights=grab("dense.weights"), biases=grab("dense.biases")),
                activation=str(hyper["activation"]),
                keep_prob=float(hyper["keep_prob"]),
                seq_len=int(hyper["seq_len"]),
                class_ids=class_ids,
                vocab_hash=vocab_hash,
            )
        if kind == "mlp":
            hidden = [
                AffineLayer(weights=grab(f"hidden{i + 1}.weights"), biases=grab(f"hidden{i + 1}.biases"))
                for i in range(len(hyper["hidden_sizes"]))
            ]
            return MlpModel(
                embedding=embedding,
                hidden=hidden,
                dense=DenseSoftmaxLayer(weights=grab("dense.weights"), biases=grab("dense.biases")),
                activation=str(hyper["activation"]),
                seq_len=int(hyper["seq_len"]),
                class_ids=class_ids,
                vocab_hash=vocab_hash,
            )
    except KeyError as exc:
        raise FormatVersionMismatch(f"bad checkpoint header: {exc}") from exc
    raise FormatVersionMismatch(f"unknown model kind {kind!r}")
