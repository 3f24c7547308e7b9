"""Small differentiable models with hand-written layer-wise gradients.

Three kinds are provided:

* ``quadratic``: 0.5 (w - target)' A (w - target) with a fixed SPD matrix,
  independent of the batch. Its largest eigenvalue is the exact smoothness
  constant, which the bound calculators use as ground truth.
* ``logistic-regression``: softmax regression with a bias row.
* ``mlp``: fully connected net with tanh hidden layers and a softmax head.

Layer granularity of the stacked parameter vector is a model choice: one
piece per learnable layer by default for the MLP, with a ``split_bias``
switch that instead mirrors frameworks keeping weights and biases as
separate tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, StructureError
from .layered import LayeredVector, LayerShape, validate_shape

Batch = tuple[np.ndarray, np.ndarray]

DATASET_KINDS = ("synthetic-gaussian-classification", "synthetic-linear-regression")
MODEL_KINDS = ("quadratic", "logistic-regression", "mlp")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    samples: int
    feature_dim: int
    classes: int
    seed: int

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.samples < 1 or self.feature_dim < 1 or self.classes < 2:
            raise ValueError("dataset needs samples >= 1, feature_dim >= 1, classes >= 2")


class SyntheticDataset:
    """Deterministically generated features and integer class labels.

    ``synthetic-gaussian-classification`` draws class means of scale
    1/sqrt(feature_dim) and unit-variance noise around them with balanced
    labels. ``synthetic-linear-regression`` scores standard-normal features
    through a random linear map plus noise and buckets the scores into
    balanced classes, so both kinds feed the same classification losses.
    """

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        n, f, k = spec.samples, spec.feature_dim, spec.classes
        if spec.kind == "synthetic-gaussian-classification":
            means = rng.normal(0.0, 1.0, size=(k, f)) / np.sqrt(f)
            labels = np.arange(n) % k
            labels = labels[rng.permutation(n)]
            features = means[labels] + rng.standard_normal((n, f))
        else:
            features = rng.standard_normal((n, f))
            direction = rng.standard_normal(f) / np.sqrt(f)
            score = features @ direction + 0.1 * rng.standard_normal(n)
            labels = np.empty(n, dtype=np.int64)
            labels[np.argsort(score, kind="stable")] = (np.arange(n) * k) // n
        self.features = features
        self.labels = labels.astype(np.int64)

    @property
    def samples(self) -> int:
        return self.spec.samples

    def shard_indices(self, worker_id: int, workers: int) -> np.ndarray:
        """Indices owned by worker ``worker_id`` (1-based): i with i mod P == p - 1."""
        if not 1 <= worker_id <= workers:
            raise ValueError(f"worker_id {worker_id} outside 1..{workers}")
        return np.arange(worker_id - 1, self.samples, workers)

    def batch(self, indices: np.ndarray) -> Batch:
        return self.features[indices], self.labels[indices]

    def full_batch(self) -> Batch:
        return self.features, self.labels


# A 1-sample placeholder so data-independent models can use the same
# training plumbing without a dataset.
PLACEHOLDER_BATCH: Batch = (np.zeros((1, 1)), np.zeros(1, dtype=np.int64))


def _check_batch(batch: Batch) -> Batch:
    x, y = batch
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] == 0 or y.shape[0] != x.shape[0]:
        raise StructureError("batch must be (features[n, f], labels[n]) with n >= 1")
    return x, y


def _softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and the probabilities, computed stably."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    probs = expz / denom
    n = logits.shape[0]
    logp = shifted[np.arange(n), labels] - np.log(denom[:, 0])
    return float(-logp.mean()), probs


class Model:
    """Interface shared by all model kinds."""

    kind: str
    shape: tuple[LayerShape, ...]

    @property
    def dim(self) -> int:
        return sum(ls.dim for ls in self.shape)

    def init_params(self, rng: np.random.Generator) -> LayeredVector:
        """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
        parts = []
        for ls, fan_in in zip(self.shape, self._fan_ins()):
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=ls.dim))
        return LayeredVector(self.shape, np.concatenate(parts))

    def _fan_ins(self) -> list[int]:
        raise NotImplementedError

    def loss(self, params: LayeredVector, batch: Batch) -> float:
        raise NotImplementedError

    def gradient(self, params: LayeredVector, batch: Batch) -> LayeredVector:
        return self.loss_and_gradient(params, batch)[1]

    def loss_and_gradient(self, params: LayeredVector, batch: Batch) -> tuple[float, LayeredVector]:
        raise NotImplementedError

    def _check_params(self, params: LayeredVector):
        if params.shape != self.shape:
            raise StructureError(f"params layout {params.shape} does not match model {self.shape}")
        if not np.all(np.isfinite(params.data)):
            raise DivergenceError("non-finite parameters")


class QuadraticModel(Model):
    """0.5 (w - target)' A (w - target) with A = Q diag(lambda) Q'.

    Eigenvalues are log-uniform in ``eig_range`` and the orthogonal basis
    comes from the seed, so the condition number and the exact smoothness
    constant (largest eigenvalue) are known. The loss ignores batch values
    but still requires a non-empty batch.
    """

    kind = "quadratic"

    def __init__(self, dim: int, layer_dims: tuple[int, ...] | None = None, seed: int = 0,
                 eig_range: tuple[float, float] = (0.1, 10.0)):
        if layer_dims is None:
            layer_dims = (dim,)
        if sum(layer_dims) != dim:
            raise StructureError(f"layer_dims {layer_dims} must sum to dim {dim}")
        self.shape = validate_shape([LayerShape(i, d) for i, d in enumerate(layer_dims, start=1)])
        rng = np.random.default_rng([seed, 0x51AD])
        lo, hi = eig_range
        eigs = np.exp(rng.uniform(np.log(lo), np.log(hi), size=dim))
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        a = (q * eigs) @ q.T
        self.matrix = (a + a.T) / 2.0
        self.target = rng.normal(0.0, 0.5, size=dim)
        self._eigs = np.linalg.eigvalsh(self.matrix)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, target: np.ndarray,
                    layer_dims: tuple[int, ...] | None = None) -> "QuadraticModel":
        matrix = np.asarray(matrix, dtype=np.float64)
        obj = cls.__new__(cls)
        dim = matrix.shape[0]
        if matrix.shape != (dim, dim) or not np.allclose(matrix, matrix.T):
            raise StructureError("matrix must be square symmetric")
        if layer_dims is None:
            layer_dims = (dim,)
        obj.shape = validate_shape([LayerShape(i, d) for i, d in enumerate(layer_dims, start=1)])
        obj.matrix = (matrix + matrix.T) / 2.0
        obj.target = np.asarray(target, dtype=np.float64)
        obj._eigs = np.linalg.eigvalsh(obj.matrix)
        return obj

    @property
    def smoothness(self) -> float:
        return float(self._eigs[-1])

    @property
    def optimum_value(self) -> float:
        return 0.0

    def _fan_ins(self):
        return [self.dim for _ in self.shape]

    def loss(self, params: LayeredVector, batch: Batch) -> float:
        self._check_params(params)
        _check_batch(batch)
        err = params.data - self.target
        return float(0.5 * err @ (self.matrix @ err))

    def loss_and_gradient(self, params: LayeredVector, batch: Batch) -> tuple[float, LayeredVector]:
        self._check_params(params)
        _check_batch(batch)
        err = params.data - self.target
        grad = self.matrix @ err
        return float(0.5 * err @ grad), LayeredVector(self.shape, grad)


class LogisticModel(Model):
    """Softmax regression.

    By default the weight matrix and the bias are separate pieces of the
    stacked vector (the framework-style tensor split), so layer-wise
    algorithms have structure to work with even on this single-layer
    model; ``split_bias=False`` packs everything into one piece.
    """

    kind = "logistic-regression"

    def __init__(self, feature_dim: int, classes: int, split_bias: bool = True):
        if classes < 2:
            raise ValueError("classes must be >= 2")
        self.feature_dim = feature_dim
        self.classes = classes
        self.split_bias = split_bias
        if split_bias:
            shape = [LayerShape(1, feature_dim * classes), LayerShape(2, classes)]
        else:
            shape = [LayerShape(1, feature_dim * classes + classes)]
        self.shape = validate_shape(shape)

    def _fan_ins(self):
        return [self.feature_dim] * len(self.shape)

    def _unpack(self, params: LayeredVector):
        if self.split_bias:
            w = params.layer_slice(1).reshape(self.feature_dim, self.classes)
            b = params.layer_slice(2)
        else:
            seg = params.layer_slice(1)
            w = seg[: self.feature_dim * self.classes].reshape(self.feature_dim, self.classes)
            b = seg[self.feature_dim * self.classes :]
        return w, b

    def loss(self, params: LayeredVector, batch: Batch) -> float:
        self._check_params(params)
        x, y = _check_batch(batch)
        w, b = self._unpack(params)
        value, _ = _softmax_cross_entropy(x @ w + b, y)
        return value

    def loss_and_gradient(self, params: LayeredVector, batch: Batch) -> tuple[float, LayeredVector]:
        self._check_params(params)
        x, y = _check_batch(batch)
        w, b = self._unpack(params)
        value, probs = _softmax_cross_entropy(x @ w + b, y)
        n = x.shape[0]
        dz = probs
        dz[np.arange(n), y] -= 1.0
        dz /= n
        grad = np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0)])
        return value, LayeredVector(self.shape, grad)


def _interleave(weight_parts, bias_parts, split_bias):
    """Flatten per-layer weight and bias blocks in parameter order."""
    flat = []
    for w, b in zip(weight_parts, bias_parts):
        if split_bias:
            flat.append(np.ravel(w))
            flat.append(np.asarray(b))
        else:
            flat.append(np.concatenate([np.ravel(w), np.asarray(b)]))
    return np.concatenate(flat)


class MlpModel(Model):
    """Fully connected net: tanh hidden layers, softmax cross-entropy output.

    ``widths`` lists (input, hidden..., output). By default each learnable
    layer is one piece of the stacked vector, holding its weight matrix and
    bias together in backpropagation order; ``split_bias=True`` mirrors
    frameworks that keep weights and biases as separate tensors, doubling
    the layer count.
    """

    kind = "mlp"

    def __init__(self, widths: tuple[int, ...], split_bias: bool = False):
        if len(widths) < 2:
            raise ValueError("widths needs at least (input, output)")
        if widths[-1] < 2:
            raise ValueError("output width must be >= 2 classes")
        self.widths = tuple(int(w) for w in widths)
        self.split_bias = split_bias
        shape = []
        layer_id = 1
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            if split_bias:
                shape.append(LayerShape(layer_id, fan_in * fan_out))
                shape.append(LayerShape(layer_id + 1, fan_out))
                layer_id += 2
            else:
                shape.append(LayerShape(layer_id, fan_in * fan_out + fan_out))
                layer_id += 1
        self.shape = validate_shape(shape)

    def _fan_ins(self):
        fans = []
        for fan_in in self.widths[:-1]:
            fans.extend([fan_in, fan_in] if self.split_bias else [fan_in])
        return fans

    def _unpack(self, params: LayeredVector):
        mats, biases = [], []
        layer_id = 1
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            if self.split_bias:
                mats.append(params.layer_slice(layer_id).reshape(fan_in, fan_out))
                biases.append(params.layer_slice(layer_id + 1))
                layer_id += 2
            else:
                seg = params.layer_slice(layer_id)
                mats.append(seg[: fan_in * fan_out].reshape(fan_in, fan_out))
                biases.append(seg[fan_in * fan_out :])
                layer_id += 1
        return mats, biases

    def _forward(self, params: LayeredVector, x: np.ndarray):
        mats, biases = self._unpack(params)
        activations = [x]
        for w, b in zip(mats[:-1], biases[:-1]):
            activations.append(np.tanh(activations[-1] @ w + b))
        logits = activations[-1] @ mats[-1] + biases[-1]
        return mats, activations, logits

    def loss(self, params: LayeredVector, batch: Batch) -> float:
        self._check_params(params)
        x, y = _check_batch(batch)
        _, _, logits = self._forward(params, x)
        value, _ = _softmax_cross_entropy(logits, y)
        return value

    def loss_and_gradient(self, params: LayeredVector, batch: Batch) -> tuple[float, LayeredVector]:
        self._check_params(params)
        x, y = _check_batch(batch)
        mats, activations, logits = self._forward(params, x)
        value, probs = _softmax_cross_entropy(logits, y)
        n = x.shape[0]
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = [None] * len(mats)
        bias_grads = [None] * len(mats)
        for i in range(len(mats) - 1, -1, -1):
            grads[i] = activations[i].T @ delta
            bias_grads[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ mats[i].T) * (1.0 - activations[i] ** 2)
        return value, LayeredVector(self.shape, _interleave(grads, bias_grads, self.split_bias))


def make_model(kind: str, **kwargs) -> Model:
    if kind == "quadratic":
        return QuadraticModel(**kwargs)
    if kind == "logistic-regression":
        return LogisticModel(**kwargs)
    if kind == "mlp":
        return MlpModel(**kwargs)
    raise ValueError(f"unknown model kind {kind!r}")


def second_moment_estimate(
    model: Model,
    params_trace: list[LayeredVector],
    dataset: SyntheticDataset | None,
    workers: int,
    batch_size: int = 32,
    draws: int = 100,
    seed: int = 0,
) -> float:
    """Empirical bound on the squared norm of the worker-averaged gradient.

    For each trace point, draws ``draws`` batch tuples (one batch per worker
    shard), averages || mean_p G^p ||^2 over the draws, and returns the max
    over trace points. With a data-independent model or full batches this
    reduces to the max squared full-gradient norm along the trace.
    """
    if not params_trace:
        raise ValueError("params_trace must be non-empty")
    rng = np.random.default_rng([seed, 0x2E57])
    shards = None
    if dataset is not None:
        shards = [dataset.shard_indices(p, workers) for p in range(1, workers + 1)]
    worst = 0.0
    for params in params_trace:
        acc = 0.0
        for _ in range(draws):
            total = np.zeros(model.dim)
            for p in range(workers):
                if shards is None:
                    batch = PLACEHOLDER_BATCH
                else:
                    shard = shards[p]
                    take = min(batch_size, shard.size)
                    batch = dataset.batch(rng.choice(shard, size=take, replace=False))
                total += model.gradient(params, batch).data
            mean = total / workers
            acc += float(mean @ mean)
        worst = max(worst, acc / draws)
    return worst
