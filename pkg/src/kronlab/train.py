"""Toy-scale training and gradient verification.

Randomness everywhere in the package comes from :func:`make_rng`, a NumPy
``Generator`` over the PCG64 bit generator seeded with a single integer, so a
seed reproduces a run exactly on one platform.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ExtentMismatch, LabelOutOfRange, NonFinite
from .layers import LayerGrads
from .tensor import as_tensor

__all__ = [
    "make_rng",
    "softmax_xent",
    "sgd_step",
    "grad_check",
    "toy_data",
    "ToyNet",
    "TrainResult",
    "train_toy",
]


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy over the columns of ``logits`` (classes x batch).

    Returns ``(loss, d_logits)`` with ``d_logits = (softmax - onehot) / k``.
    """
    logits = as_tensor(logits, 2)
    labels = np.asarray(labels, dtype=np.int64)
    m, k = logits.shape
    if labels.shape != (k,):
        raise ExtentMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {k}")
    if k and (labels.min() < 0 or labels.max() >= m):
        raise LabelOutOfRange(f"labels must lie in [0, {m})")
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=0))
    cols = np.arange(k)
    log_p = shifted[labels, cols] - log_norm
    loss = float(-np.mean(log_p)) if k else 0.0
    probs = np.exp(shifted - log_norm)
    probs[labels, cols] -= 1.0
    return loss, probs / max(k, 1)


def sgd_step(params, grads, lr):
    """Plain gradient descent ``p - lr * g`` on dicts of arrays; returns a new dict."""
    if set(params) != set(grads):
        raise ExtentMismatch(f"parameter and gradient keys differ: {sorted(set(params) ^ set(grads))}")
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k])
        if g.shape != np.shape(p):
            raise ExtentMismatch(f"gradient for {k!r} has shape {g.shape}, parameter {np.shape(p)}")
        out[k] = p - lr * g
    return out


def _relu_pattern(model, x):
    _, cache = model.forward(x)
    return [z > 0.0 for z in model.preactivations(cache)]


def grad_check(model, x, seed=0, step=1e-5, max_probes=10_000, tiny=1e-8):
    """Largest relative gap between backprop and central differences.

    The scalar probed is ``sum(R * model(x))`` for a fixed random ``R``.  Every
    parameter entry and input entry is probed, or a seeded random subset of
    ``max_probes`` of them.  Probes whose perturbation flips the sign of any
    relu pre-activation are skipped, since finite differences are meaningless
    across a kink.  Entries where both values are below ``tiny`` in magnitude
    are skipped too.
    """
    rng = make_rng(seed)
    x = as_tensor(x)
    y, cache = model.forward(x)
    proj = rng.standard_normal(y.shape)
    grads = model.backward(cache, proj)

    tensors = [(name, p, grads.d_params[name]) for name, p in model.params.items()]
    tensors.append((None, x, grads.d_input))
    probes = [(ti, idx) for ti, (_, t, _) in enumerate(tensors) for idx in np.ndindex(t.shape)]
    if len(probes) > max_probes:
        pick = rng.choice(len(probes), size=max_probes, replace=False)
        probes = [probes[i] for i in np.sort(pick)]

    def evaluate(ti, idx, delta):
        name, t, _ = tensors[ti]
        moved = t.copy()
        moved[idx] += delta
        if name is None:
            return model, moved, moved[idx]
        return model.with_params({name: moved}), x, moved[idx]

    base_pattern = _relu_pattern(model, x)
    worst = 0.0
    for ti, idx in probes:
        values, where = [], []
        for delta in (step, -step):
            m, inp, at = evaluate(ti, idx, delta)
            where.append(at)
            out, c = m.forward(inp)
            if base_pattern:
                pattern = [z > 0.0 for z in m.preactivations(c)]
                if any(np.any(a != b) for a, b in zip(pattern, base_pattern)):
                    break
            values.append(out)
        else:
            if not (np.all(np.isfinite(values[0])) and np.all(np.isfinite(values[1]))):
                raise NonFinite("non-finite output while probing gradients")
            # differencing outputs before projecting keeps round-off at the scale of the change
            # divide by the step actually taken, which differs from 2*step by rounding
            numeric = float(np.sum(proj * (values[0] - values[1]))) / float(where[0] - where[1])
            analytic = float(tensors[ti][2][idx])
            scale = max(abs(numeric), abs(analytic))
            if scale > tiny:
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def toy_data(n_samples, n_features, n_classes, seed=0):
    """Gaussian class clusters: unit within-class variance, class means 4 apart.

    Class means are ``4/sqrt(2)`` times orthonormal random directions, so
    every pair of means is exactly 4 apart.  Returns ``(X, labels)`` with one
    sample per column of ``X``.
    """
    if n_classes > n_features and n_classes > 1:
        raise ValueError("need at least as many features as classes")
    rng = make_rng(seed)
    if n_classes > 1:
        q, _ = np.linalg.qr(rng.standard_normal((n_features, n_classes)))
        means = (4.0 / np.sqrt(2.0)) * q
    else:
        means = np.zeros((n_features, 1))
    labels = rng.permutation(np.arange(n_samples) % max(n_classes, 1))
    X = means[:, labels] + rng.standard_normal((n_features, n_samples))
    return X, labels


@dataclass(frozen=True)
class ToyNet:
    """A chain of layers ending in a softmax cross-entropy loss.

    ``input_shape`` is the shape of one sample; the constructor pushes a
    dummy batch through the chain to check that extents line up.
    """

    layers: tuple
    input_shape: tuple
    loss: str = "softmax_xent"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.loss != "softmax_xent":
            raise ValueError(f"unsupported loss {self.loss!r}")
        self.forward(self.dummy_batch(1))

    def dummy_batch(self, k):
        if len(self.input_shape) == 1:
            return np.zeros((self.input_shape[0], k))
        return np.zeros((k,) + self.input_shape)

    @property
    def params(self):
        return {f"{i}.{name}": p for i, layer in enumerate(self.layers) for name, p in layer.params.items()}

    def with_params(self, params):
        per_layer = [dict() for _ in self.layers]
        for key, value in params.items():
            i, name = key.split(".", 1)
            per_layer[int(i)][name] = value
        layers = tuple(layer.with_params(p) if p else layer for layer, p in zip(self.layers, per_layer))
        return ToyNet(layers, self.input_shape, self.loss)

    @property
    def n_params(self):
        return sum(layer.n_params for layer in self.layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dy):
        d_params = {}
        for i in reversed(range(len(self.layers))):
            g = self.layers[i].backward(caches[i], dy)
            for name, v in g.d_params.items():
                d_params[f"{i}.{name}"] = v
            dy = g.d_input
        return LayerGrads(d_params, dy)

    def preactivations(self, caches):
        return [z for layer, c in zip(self.layers, caches) for z in layer.preactivations(c)]

    def _batch(self, x, idx):
        return x[:, idx] if len(self.input_shape) == 1 else x[idx]

    def loss_and_grads(self, x, labels):
        logits, caches = self.forward(x)
        loss, d_logits = softmax_xent(logits, labels)
        return loss, self.backward(caches, d_logits).d_params

    def accuracy(self, x, labels):
        logits, _ = self.forward(x)
        return float(np.mean(np.argmax(logits, axis=0) == np.asarray(labels)))


@dataclass
class TrainResult:
    net: ToyNet
    accuracy: list = field(default_factory=list)  # entry 0 is before training
    loss: list = field(default_factory=list)


def train_toy(net, data, epochs, lr, seed=0, batch_size=32):
    """Mini-batch SGD on ``data = (X, labels)``; deterministic for a given seed.

    ``batch_size=None`` trains full-batch.  The returned accuracy curve has
    ``epochs + 1`` entries, the first measured before any update.
    """
    x, labels = data
    labels = np.asarray(labels)
    n = labels.size
    rng = make_rng(seed)
    bs = n if batch_size is None else batch_size
    result = TrainResult(net)
    loss, _ = net.loss_and_grads(x, labels)
    result.accuracy.append(net.accuracy(x, labels))
    result.loss.append(loss)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = net.loss_and_grads(net._batch(x, idx), labels[idx])
            if not np.isfinite(loss):
                raise NonFinite("training loss diverged; lower the learning rate")
            net = net.with_params(sgd_step(net.params, grads, lr))
        loss, _ = net.loss_and_grads(x, labels)
        result.accuracy.append(net.accuracy(x, labels))
        result.loss.append(loss)
    result.net = net
    return result
