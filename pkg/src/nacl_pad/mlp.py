"""Fully connected ReLU network with a softmax head.

The network is stored as one flat float64 parameter vector so that the
compiled kernel, the numpy fallback, serialization and finite-difference
checks all share a single layout: per layer, a row-major ``(fan_in, fan_out)``
weight block followed by its bias. Hidden layers use ReLU; the last hidden
activation is the embedding space, the final affine map plus softmax is the
classifier head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nacl_pad._backend import kernels

_MAGIC = b"NACLMLP1"


class ArchitectureError(ValueError):
    """Raised on shape or arity mismatches."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    decay: float = 1e-4
    batch_size: int = 100
    num_batches: int = 10000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decay < 0:
            raise ValueError(f"decay must be non-negative, got {self.decay}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.num_batches < 0:
            raise ValueError(f"num_batches must be >= 0, got {self.num_batches}")


def _param_count(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass(eq=False)
class MlpModel:
    layer_sizes: tuple[int, ...]
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ArchitectureError(f"invalid layer sizes {self.layer_sizes}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        expected = _param_count(self.layer_sizes)
        if self.params.shape != (expected,):
            raise ArchitectureError(
                f"expected {expected} parameters for {self.layer_sizes}, got {self.params.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_arity(self) -> int:
        return self.layer_sizes[-1]

    @property
    def embedding_width(self) -> int:
        return self.layer_sizes[-2]

    def _offsets(self, layer):
        off = 0
        for n_in, n_out in zip(self.layer_sizes[:layer], self.layer_sizes[1:layer + 1]):
            off += n_in * n_out + n_out
        n_in, n_out = self.layer_sizes[layer], self.layer_sizes[layer + 1]
        return off, off + n_in * n_out, n_in, n_out

    def weight(self, layer: int) -> np.ndarray:
        """View of the ``(fan_in, fan_out)`` weight matrix of ``layer``."""
        w, b, n_in, n_out = self._offsets(layer)
        return self.params[w:b].reshape(n_in, n_out)

    def bias(self, layer: int) -> np.ndarray:
        _, b, _, n_out = self._offsets(layer)
        return self.params[b:b + n_out]

    def copy(self) -> MlpModel:
        return MlpModel(self.layer_sizes, self.params.copy())

    def head(self) -> MlpModel:
        """The classifier head alone, as a single-layer model on embeddings."""
        last = self.n_layers - 1
        return MlpModel(self.layer_sizes[-2:],
                        np.concatenate([self.weight(last).ravel(), self.bias(last)]))

    def with_head(self, head: MlpModel) -> MlpModel:
        if head.n_layers != 1 or head.input_dim != self.embedding_width:
            raise ArchitectureError(
                f"head {head.layer_sizes} does not fit embedding width {self.embedding_width}")
        w, _, _, _ = self._offsets(self.n_layers - 1)
        sizes = self.layer_sizes[:-1] + (head.output_arity,)
        return MlpModel(sizes, np.concatenate([self.params[:w], head.params]))


def init_model(layer_sizes, seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    model = MlpModel(sizes, np.zeros(_param_count(sizes)))
    return reinitialize(model, seed)


def default_sizes(input_dim: int, outputs: int = 2) -> tuple[int, ...]:
    return (input_dim, 64, 32, outputs)


def reinitialize(model: MlpModel, seed: int) -> MlpModel:
    rng = np.random.default_rng(seed)
    fresh = MlpModel(model.layer_sizes, np.zeros_like(model.params))
    for layer in range(fresh.n_layers):
        w = fresh.weight(layer)
        bound = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[:] = rng.uniform(-bound, bound, size=w.shape)
    return fresh


def _as_batch(model, x, width=None):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    width = model.input_dim if width is None else width
    if arr.shape[1] != width:
        raise ArchitectureError(f"expected input dimension {width}, got {arr.shape[1]}")
    return arr, single


def _activations(model, arr):
    acts = [arr]
    for layer in range(model.n_layers):
        out = acts[-1] @ model.weight(layer) + model.bias(layer)
        if layer < model.n_layers - 1:
            out = np.maximum(out, 0.0)
        acts.append(out)
    return acts


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: MlpModel, x) -> np.ndarray:
    arr, single = _as_batch(model, x)
    out = _activations(model, arr)[-1]
    return out[0] if single else out


def forward(model: MlpModel, x) -> np.ndarray:
    """Class probabilities for one vector or a batch of row vectors."""
    arr, single = _as_batch(model, x)
    probs = _softmax(_activations(model, arr)[-1])
    return probs[0] if single else probs


def embed(model: MlpModel, x) -> np.ndarray:
    """Post-ReLU activation of the last hidden layer."""
    if model.n_layers < 2:
        raise ArchitectureError("model has no hidden layer to embed into")
    arr, single = _as_batch(model, x)
    out = _activations(model, arr)[-2]
    return out[0] if single else out


def head_forward(model: MlpModel, z) -> np.ndarray:
    """Apply only the classifier head to embeddings ``z``."""
    return forward(model.head(), z)


def predict(model: MlpModel, x) -> np.ndarray:
    return np.argmax(logits(model, np.atleast_2d(x)), axis=1)


def _prep(model, X, y, anchors, anchored):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ArchitectureError(
            f"expected inputs of dimension {model.input_dim}, got shape {X.shape}")
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ValueError(f"{y.shape[0]} labels for {X.shape[0]} inputs")
    if y.size and (y.min() < 0 or y.max() >= model.output_arity):
        bad = int(y[(y < 0) | (y >= model.output_arity)][0])
        raise ValueError(f"class id {bad} out of range for {model.output_arity} outputs")
    if anchors is None:
        width = model.embedding_width if model.n_layers > 1 else 1
        anchors = np.zeros((X.shape[0], width))
        anchored = np.zeros(X.shape[0], dtype=np.uint8)
    else:
        if model.n_layers < 2:
            raise ArchitectureError("drift anchors need a hidden embedding layer")
        anchors = np.ascontiguousarray(anchors, dtype=np.float64)
        if anchors.shape != (X.shape[0], model.embedding_width):
            raise ArchitectureError(f"anchors have shape {anchors.shape}")
        if anchored is None:
            anchored = np.ones(X.shape[0], dtype=np.uint8)
        anchored = np.ascontiguousarray(anchored, dtype=np.uint8)
    return X, y, anchors, anchored


def loss_and_grad(model: MlpModel, X, y, anchors=None, anchored=None, lam: float = 0.0):
    """Mean cross-entropy plus ``lam`` times the mean squared embedding drift.

    The drift term averages over rows flagged in ``anchored`` and measures
    the distance between this model's embedding and the row of ``anchors``.
    """
    X, y, anchors, anchored = _prep(model, X, y, anchors, anchored)
    sizes = np.asarray(model.layer_sizes, dtype=np.int64)
    grad = np.zeros_like(model.params)
    loss = kernels.loss_and_grad(model.params, sizes, X, y, anchors, anchored,
                                 float(lam), grad)
    return float(loss), grad


def loss(model: MlpModel, X, y, anchors=None, anchored=None, lam: float = 0.0) -> float:
    return loss_and_grad(model, X, y, anchors, anchored, lam)[0]


def balanced_batches(y, n_classes: int, batch_size: int, num_batches: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Row indices of ``num_batches`` class-balanced batches.

    Each class is drawn uniformly with replacement; the ``batch_size % n_classes``
    leftover slots go to the lowest class ids.
    """
    y = np.asarray(y)
    pools = []
    for c in range(n_classes):
        members = np.flatnonzero(y == c)
        if members.size == 0:
            raise ValueError(f"class {c} has no samples to balance the batches")
        pools.append(members)
    base, extra = divmod(batch_size, n_classes)
    cols = []
    for c, members in enumerate(pools):
        width = base + (1 if c < extra else 0)
        if width:
            cols.append(members[rng.integers(0, members.size, size=(num_batches, width))])
    return np.ascontiguousarray(np.concatenate(cols, axis=1), dtype=np.int64)


def fit(model: MlpModel, X, y, config: TrainConfig, anchors=None, anchored=None,
        lam: float = 0.0, return_losses: bool = False):
    """Adam on balanced mini-batches; returns a new model (and batch losses)."""
    X, y, anchors, anchored = _prep(model, X, y, anchors, anchored)
    out = model.copy()
    losses = np.zeros(config.num_batches)
    if config.num_batches > 0:
        rng = np.random.default_rng(config.seed)
        batches = balanced_batches(y, model.output_arity, config.batch_size,
                                   config.num_batches, rng)
        m = np.zeros_like(out.params)
        v = np.zeros_like(out.params)
        kernels.train_steps(out.params, np.asarray(model.layer_sizes, dtype=np.int64),
                            X, y, anchors, anchored, batches, float(lam),
                            config.learning_rate, config.decay, config.adam_beta1,
                            config.adam_beta2, config.adam_epsilon, m, v, 0, losses)
    return (out, losses) if return_losses else out


def train(model: MlpModel, X, y, config: TrainConfig, space: str = "feature") -> MlpModel:
    """Supervised cross-entropy training.

    ``space="embedding"`` takes embedding vectors and updates only the
    classifier head; the encoder weights are returned untouched.
    """
    if space == "feature":
        return fit(model, X, y, config)
    if space == "embedding":
        return model.with_head(fit(model.head(), X, y, config))
    raise ValueError(f"unknown space {space!r}; expected 'feature' or 'embedding'")


def expand_to_ternary(model: MlpModel, seed: int, scale: float = 0.01) -> MlpModel:
    """Append a third output unit; existing weights are preserved."""
    if model.output_arity != 2:
        raise ArchitectureError(f"expected a binary model, got {model.output_arity} outputs")
    rng = np.random.default_rng(seed)
    head = model.head()
    w = head.weight(0)
    new_w = np.column_stack([w, rng.normal(0.0, scale, size=w.shape[0])])
    new_b = np.append(head.bias(0), rng.normal(0.0, scale))
    return model.with_head(MlpModel((w.shape[0], 3), np.concatenate([new_w.ravel(), new_b])))


def collapse_to_binary(model: MlpModel) -> MlpModel:
    """Drop the third output unit."""
    if model.output_arity != 3:
        raise ArchitectureError(f"expected a ternary model, got {model.output_arity} outputs")
    head = model.head()
    w = head.weight(0)[:, :2]
    b = head.bias(0)[:2]
    return model.with_head(MlpModel((w.shape[0], 2), np.concatenate([w.ravel(), b])))


def to_bytes(model: MlpModel) -> bytes:
    """Versioned little-endian dump: magic, layer count, sizes, float64 params."""
    sizes = model.layer_sizes
    header = _MAGIC + struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    return header + model.params.astype("<f8").tobytes()


def from_bytes(blob: bytes) -> MlpModel:
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ValueError("not a serialized model (bad magic)")
    pos = len(_MAGIC)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    sizes = struct.unpack_from(f"<{count}I", blob, pos)
    pos += 4 * count
    params = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    return MlpModel(sizes, params)


def save(model: MlpModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> MlpModel:
    return from_bytes(Path(path).read_bytes())
