"""Differentiable layers with explicit forward and backward passes.

Fully-connected style layers take a batch as an ``n x k`` matrix (one sample
per column).  Convolutional layers take ``k x c x X x Y`` arrays and compute a
valid (unpadded, stride-1) cross-correlation.

Every layer exposes the same small protocol, used by the trainer and the
gradient checker::

    y, cache = layer.forward(x)
    grads = layer.backward(cache, dy)      # LayerGrads
    layer.params                           # dict name -> ndarray
    layer.with_params(new_params)          # new layer, self untouched
    layer.preactivations(cache)            # arrays fed through a relu
"""

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConstraintViolation, ExtentMismatch, StaleCache
from .kron import KronShape, KronSum, KronTerm, kpsvd_multi, kron_tensor_explicit, svd
from .tensor import as_tensor, mode_product

__all__ = [
    "Activation",
    "LayerGrads",
    "FcLayer",
    "SvdFcLayer",
    "KfcConfig",
    "KfcLayer",
    "ConvLayer",
    "KConvConfig",
    "KConvLayer",
    "Flatten",
    "Formulation",
    "fc_forward",
    "svd_fc_forward",
    "kfc_forward",
    "kfc_backward",
    "kfc_from_pretrained",
    "kfc_random_init",
    "formulation_shapes",
    "permute_features",
    "conv2d_forward",
    "conv2d_backward",
    "kconv_forward",
    "kconv_backward",
]


class Activation(enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"

    def __call__(self, z):
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        return z

    def backprop(self, z, dy):
        if self is Activation.RELU:
            return dy * (z > 0.0)
        return dy

    @classmethod
    def coerce(cls, value):
        return value if isinstance(value, cls) else cls(str(value).lower())


@dataclass
class LayerGrads:
    d_params: dict
    d_input: np.ndarray


def _check_batch(x, n, what="input"):
    x = as_tensor(x, 2)
    if x.shape[0] != n:
        raise ExtentMismatch(f"{what} has {x.shape[0]} rows, expected {n}")
    return x


def _cached_input(cache, n):
    x = cache.get("x")
    if x is None or x.ndim != 2 or x.shape[0] != n:
        raise StaleCache("cache does not come from this layer's forward pass")
    return x


def _check_dy(dy, shape):
    dy = as_tensor(dy)
    if dy.shape != shape:
        raise StaleCache(f"upstream gradient has shape {dy.shape}, expected {shape}")
    return dy


class _Layer:
    def with_params(self, params):
        unknown = set(params) - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        merged = {**self.params, **params}
        for k, v in merged.items():
            if np.shape(v) != self.params[k].shape:
                raise ExtentMismatch(f"parameter {k!r} must keep shape {self.params[k].shape}")
        return self._rebuild({k: as_tensor(v) for k, v in merged.items()})

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def preactivations(self, cache):
        if self.activation is Activation.RELU:
            return [cache["z"]]
        return []


# -- dense layers -------------------------------------------------------------

def fc_forward(W, b, x, act=Activation.IDENTITY):
    """``act(W x + b)`` for an ``n x k`` batch ``x``."""
    W = as_tensor(W, 2)
    b = as_tensor(b, 1)
    if b.size != W.shape[0]:
        raise ExtentMismatch(f"bias of length {b.size} for {W.shape[0]} outputs")
    x = _check_batch(x, W.shape[1])
    return Activation.coerce(act)(W @ x + b[:, None])


@dataclass(frozen=True)
class FcLayer(_Layer):
    w: np.ndarray
    b: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "w", as_tensor(self.w, 2))
        object.__setattr__(self, "b", as_tensor(self.b, 1))
        object.__setattr__(self, "activation", Activation.coerce(self.activation))
        if self.b.size != self.w.shape[0]:
            raise ExtentMismatch("bias length must equal the number of outputs")

    @classmethod
    def random(cls, m, n, seed=0, activation=Activation.IDENTITY):
        rng = np.random.default_rng(seed)
        s = np.sqrt(6.0 / (m + n))
        return cls(rng.uniform(-s, s, (m, n)), np.zeros(m), activation)

    @property
    def m(self):
        return self.w.shape[0]

    @property
    def n(self):
        return self.w.shape[1]

    @property
    def params(self):
        return {"w": self.w, "bias": self.b}

    def _rebuild(self, p):
        return replace(self, w=p["w"], b=p["bias"])

    def forward(self, x):
        x = _check_batch(x, self.n)
        z = self.w @ x + self.b[:, None]
        return self.activation(z), {"x": x, "z": z}

    def backward(self, cache, dy):
        x = _cached_input(cache, self.n)
        dz = self.activation.backprop(cache["z"], _check_dy(dy, (self.m, x.shape[1])))
        return LayerGrads(
            {"w": dz @ x.T, "bias": dz.sum(axis=1)},
            self.w.T @ dz,
        )


def svd_fc_forward(U, V, b, x, act=Activation.IDENTITY):
    """``act(U (V x) + b)``: the rank-``r`` factored dense layer."""
    U = as_tensor(U, 2)
    V = as_tensor(V, 2)
    if U.shape[1] != V.shape[0]:
        raise ExtentMismatch(f"factor ranks disagree: {U.shape} and {V.shape}")
    b = as_tensor(b, 1)
    if b.size != U.shape[0]:
        raise ExtentMismatch(f"bias of length {b.size} for {U.shape[0]} outputs")
    x = _check_batch(x, V.shape[1])
    return Activation.coerce(act)(U @ (V @ x) + b[:, None])


@dataclass(frozen=True)
class SvdFcLayer(_Layer):
    u: np.ndarray
    v: np.ndarray
    b: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "u", as_tensor(self.u, 2))
        object.__setattr__(self, "v", as_tensor(self.v, 2))
        object.__setattr__(self, "b", as_tensor(self.b, 1))
        object.__setattr__(self, "activation", Activation.coerce(self.activation))
        if self.u.shape[1] != self.v.shape[0] or self.b.size != self.u.shape[0]:
            raise ExtentMismatch("inconsistent SVD factor extents")

    @classmethod
    def from_dense(cls, W, b, rank, activation=Activation.IDENTITY):
        """Truncated SVD of a trained weight matrix, singular values split evenly."""
        u, s, v = svd(W)
        root = np.sqrt(s[:rank])
        return cls(u[:, :rank] * root, (v[:, :rank] * root).T, b, activation)

    @classmethod
    def random(cls, m, n, rank, seed=0, activation=Activation.IDENTITY):
        rng = np.random.default_rng(seed)
        su = np.sqrt(6.0 / (m + rank))
        sv = np.sqrt(6.0 / (rank + n))
        return cls(rng.uniform(-su, su, (m, rank)), rng.uniform(-sv, sv, (rank, n)), np.zeros(m), activation)

    @property
    def m(self):
        return self.u.shape[0]

    @property
    def n(self):
        return self.v.shape[1]

    @property
    def rank(self):
        return self.u.shape[1]

    @property
    def params(self):
        return {"u": self.u, "v": self.v, "bias": self.b}

    def _rebuild(self, p):
        return replace(self, u=p["u"], v=p["v"], b=p["bias"])

    def forward(self, x):
        x = _check_batch(x, self.n)
        h = self.v @ x
        z = self.u @ h + self.b[:, None]
        return self.activation(z), {"x": x, "h": h, "z": z}

    def backward(self, cache, dy):
        x = _cached_input(cache, self.n)
        dz = self.activation.backprop(cache["z"], _check_dy(dy, (self.m, x.shape[1])))
        dh = self.u.T @ dz
        return LayerGrads(
            {"u": dz @ cache["h"].T, "v": dh @ x.T, "bias": dz.sum(axis=1)},
            self.v.T @ dh,
        )


# -- KFC ----------------------------------------------------------------------

@dataclass(frozen=True)
class KfcConfig:
    """Hyper-parameters of a Kronecker fully-connected layer.

    ``shapes[i]`` is used for ``ranks[i]`` consecutive terms.  With
    ``outside_sum`` the activation is applied to every term separately and the
    results are summed; each term then gets its own bias unless
    ``share_bias`` is set.
    """

    shapes: tuple
    ranks: tuple
    outside_sum: bool = False
    share_bias: bool = False
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        shapes = tuple(s if isinstance(s, KronShape) else KronShape(*s) for s in self.shapes)
        ranks = tuple(int(r) for r in self.ranks)
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "ranks", ranks)
        object.__setattr__(self, "activation", Activation.coerce(self.activation))
        if not shapes or len(shapes) != len(ranks):
            raise ConstraintViolation("need one rank per shape and at least one shape")
        if any(r < 1 for r in ranks):
            raise ConstraintViolation("ranks must be positive")
        m, n = shapes[0].m, shapes[0].n
        for s in shapes:
            if (s.m, s.n) != (m, n):
                raise ConstraintViolation(
                    f"shape {s.as_tuple()} gives a {s.m}x{s.n} matrix, others give {m}x{n}"
                )

    @classmethod
    def from_tuple(cls, m1, m2, n1, n2, r, **kwargs):
        """The ``(m1, m2, n1, n2, r)`` notation: one shape repeated ``r`` times."""
        return cls((KronShape(m1, m2, n1, n2),), (r,), **kwargs)

    @property
    def m(self):
        return self.shapes[0].m

    @property
    def n(self):
        return self.shapes[0].n

    @property
    def rank(self):
        return sum(self.ranks)

    @property
    def term_shapes(self):
        return [s for s, r in zip(self.shapes, self.ranks) for _ in range(r)]

    @property
    def n_bias_vectors(self):
        return self.rank if self.outside_sum and not self.share_bias else 1

    @property
    def plan(self):
        return list(zip(self.shapes, self.ranks))


def _term_forward(term, x):
    s = term.shape
    k = x.shape[1]
    t = mode_product(x.reshape(s.n1, s.n2, k), term.a, 0)
    return mode_product(t, term.b, 1).reshape(s.m, k)


def _term_backward(term, x, dz):
    """Gradients of ``z = (A ⊗ B) x`` given ``dz``: returns ``(dA, dB, dx)``."""
    s = term.shape
    k = x.shape[1]
    xt = x.reshape(s.n1, s.n2, k)
    t1 = mode_product(xt, term.a, 0)                # m1 x n2 x k
    dzt = dz.reshape(s.m1, s.m2, k)
    db = np.tensordot(dzt, t1, axes=([0, 2], [0, 2]))
    dt1 = mode_product(dzt, term.b.T, 1)            # m1 x n2 x k
    da = np.tensordot(dt1, xt, axes=([1, 2], [1, 2]))
    dx = mode_product(dt1, term.a.T, 0).reshape(s.n, k)
    return da, db, dx


@dataclass(frozen=True)
class KfcLayer(_Layer):
    ksum: KronSum
    biases: np.ndarray
    config: KfcConfig

    def __post_init__(self):
        biases = as_tensor(self.biases)
        if biases.ndim == 1:
            biases = biases[None, :]
        object.__setattr__(self, "biases", biases)
        cfg = self.config
        if [t.shape for t in self.ksum.terms] != cfg.term_shapes:
            raise ConstraintViolation("layer terms do not follow the configuration's shapes")
        if biases.shape != (cfg.n_bias_vectors, cfg.m):
            raise ExtentMismatch(f"biases must have shape {(cfg.n_bias_vectors, cfg.m)}, got {biases.shape}")

    @property
    def m(self):
        return self.config.m

    @property
    def n(self):
        return self.config.n

    @property
    def activation(self):
        return self.config.activation

    @property
    def params(self):
        p = {}
        for i, t in enumerate(self.ksum.terms):
            p[f"A{i}"] = t.a
            p[f"B{i}"] = t.b
        p["bias"] = self.biases
        return p

    def _rebuild(self, p):
        terms = [KronTerm(p[f"A{i}"], p[f"B{i}"]) for i in range(self.ksum.rank)]
        return replace(self, ksum=KronSum(terms, self.m, self.n), biases=p["bias"])

    def forward(self, x):
        return kfc_forward(self, x)

    def backward(self, cache, dy):
        return kfc_backward(self, cache, dy)

    def preactivations(self, cache):
        if self.activation is Activation.RELU:
            return list(cache["z"])
        return []


def kfc_forward(layer, x):
    """Forward pass of a KFC layer; returns ``(y, cache)``.

    Inside-sum mode computes ``f(sum_i (A_i ⊗ B_i) x + b)``; outside-sum mode
    computes ``sum_i f((A_i ⊗ B_i) x + b_i)``.  Kronecker products are never
    formed.
    """
    x = _check_batch(x, layer.n)
    cfg = layer.config
    f = cfg.activation
    per_term = [_term_forward(t, x) for t in layer.ksum.terms]
    if not cfg.outside_sum:
        z = sum(per_term, np.zeros((layer.m, x.shape[1]))) + layer.biases[0][:, None]
        return f(z), {"x": x, "z": [z]}
    zs = [zt + layer.biases[i if not cfg.share_bias else 0][:, None] for i, zt in enumerate(per_term)]
    y = sum((f(z) for z in zs), np.zeros((layer.m, x.shape[1])))
    return y, {"x": x, "z": zs}


def kfc_backward(layer, cache, dy):
    x = _cached_input(cache, layer.n)
    cfg = layer.config
    k = x.shape[1]
    expected = 1 if not cfg.outside_sum else layer.ksum.rank
    if len(cache["z"]) != expected or any(z.shape != (layer.m, k) for z in cache["z"]):
        raise StaleCache("cached pre-activations do not match the layer")
    dy = _check_dy(dy, (layer.m, k))
    grads = {}
    dx = np.zeros_like(x)
    dbias = np.zeros_like(layer.biases)
    if not cfg.outside_sum:
        dz = cfg.activation.backprop(cache["z"][0], dy)
        dz_all = [dz] * layer.ksum.rank
        dbias[0] = dz.sum(axis=1)
    else:
        dz_all = [cfg.activation.backprop(z, dy) for z in cache["z"]]
        for i, dz in enumerate(dz_all):
            dbias[0 if cfg.share_bias else i] += dz.sum(axis=1)
    for i, (term, dz) in enumerate(zip(layer.ksum.terms, dz_all)):
        da, db, dxi = _term_backward(term, x, dz)
        grads[f"A{i}"] = da
        grads[f"B{i}"] = db
        dx += dxi
    grads["bias"] = dbias
    return LayerGrads(grads, dx)


def kfc_from_pretrained(W, b, cfg):
    """Initialise a KFC layer by greedy KPSVD of a trained weight matrix.

    Only inside-sum layers can be initialised this way; the per-term
    nonlinearity of the outside-sum form has no matching decomposition.
    """
    W = as_tensor(W, 2)
    b = as_tensor(b, 1)
    if cfg.outside_sum:
        raise ConstraintViolation("pretrained initialisation needs the nonlinearity outside the sum to be off")
    if W.shape != (cfg.m, cfg.n) or b.size != cfg.m:
        raise ExtentMismatch(f"weights {W.shape} / bias {b.shape} do not fit a {cfg.m}x{cfg.n} layer")
    ksum, _ = kpsvd_multi(W, cfg.plan)
    return KfcLayer(ksum, b[None, :], cfg)


def kfc_random_init(cfg, seed=0):
    """Random KFC layer whose Kronecker sum has Glorot-uniform entry variance.

    Each product ``A_i ⊗ B_i`` should behave like a matrix with entries in
    ``[-s, s]``, ``s = sqrt(6 / (m + n)) / sqrt(r)``.  A product of two
    independent ``U[-u, u]`` draws has variance ``u**4 / 9``; matching ``s**2 / 3``
    gives ``u = (3 s**2) ** 0.25`` for both factors.
    """
    rng = np.random.default_rng(seed)
    s = np.sqrt(6.0 / (cfg.m + cfg.n)) / np.sqrt(cfg.rank)
    u = (3.0 * s * s) ** 0.25
    terms = [
        KronTerm(rng.uniform(-u, u, shape.a_dims), rng.uniform(-u, u, shape.b_dims))
        for shape in cfg.term_shapes
    ]
    return KfcLayer(KronSum(terms, cfg.m, cfg.n), np.zeros((cfg.n_bias_vectors, cfg.m)), cfg)


class Formulation(NamedTuple):
    name: str
    shape: KronShape
    permutation: tuple  # applied to the (c, h, w) axes of each sample before flattening


def formulation_shapes(c, h, w, m, m1):
    """Kronecker shapes tied to the structure of a ``c x h x w`` feature volume.

    ``m1`` is a single output split or one per formulation.  Formulation I
    separates channels from pixels (``n1 = c``), II separates columns
    (``n1 = c*h``) and III separates rows (``n1 = c*w``) after swapping the
    two spatial axes.
    """
    m1s = (m1, m1, m1) if np.isscalar(m1) else tuple(m1)
    if len(m1s) != 3:
        raise ConstraintViolation("give one m1 or three (one per formulation)")
    for v in m1s:
        if m % v:
            raise ConstraintViolation(f"m1 = {v} does not divide m = {m}")
    return [
        Formulation("I", KronShape(m1s[0], m // m1s[0], c, h * w), (0, 1, 2)),
        Formulation("II", KronShape(m1s[1], m // m1s[1], c * h, w), (0, 1, 2)),
        Formulation("III", KronShape(m1s[2], m // m1s[2], c * w, h), (0, 2, 1)),
    ]


def permute_features(x, chw, permutation):
    """Reorder the flattened ``c x h x w`` rows of an ``n x k`` batch."""
    x = as_tensor(x, 2)
    c, h, w = chw
    k = x.shape[1]
    vol = x.reshape(c, h, w, k).transpose(*permutation, 3)
    return np.ascontiguousarray(vol).reshape(c * h * w, k)


# -- convolution --------------------------------------------------------------

def _check_conv(kernel, x):
    kernel = as_tensor(kernel, 4)
    x = as_tensor(x, 4)
    o, c, h, w = kernel.shape
    if x.shape[1] != c:
        raise ExtentMismatch(f"input has {x.shape[1]} channels, kernel expects {c}")
    if x.shape[2] < h or x.shape[3] < w:
        raise ExtentMismatch(f"input {x.shape[2:]} smaller than kernel {(h, w)}")
    return kernel, x


def _correlate(kernel, x):
    o, c, h, w = kernel.shape
    k, _, X, Y = x.shape
    Xo, Yo = X - h + 1, Y - w + 1
    out = np.zeros((o, k, Xo, Yo))
    for p in range(h):
        for q in range(w):
            out += np.tensordot(kernel[:, :, p, q], x[:, :, p:p + Xo, q:q + Yo], axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def conv2d_forward(kernel, bias, x):
    """Valid, stride-1 cross-correlation of ``k x c x X x Y`` input with an ``o x c x h x w`` kernel, plus bias."""
    kernel, x = _check_conv(kernel, x)
    bias = as_tensor(bias, 1)
    if bias.size != kernel.shape[0]:
        raise ExtentMismatch(f"bias of length {bias.size} for {kernel.shape[0]} output channels")
    return np.ascontiguousarray(_correlate(kernel, x) + bias[None, :, None, None])


def conv2d_backward(kernel, x, dy):
    """Gradients of the bias-free correlation w.r.t. kernel and input."""
    kernel, x = _check_conv(kernel, x)
    o, c, h, w = kernel.shape
    k, _, X, Y = x.shape
    Xo, Yo = X - h + 1, Y - w + 1
    dy = _check_dy(dy, (k, o, Xo, Yo))
    dk = np.empty_like(kernel)
    dx = np.zeros((c, k, X, Y))
    for p in range(h):
        for q in range(w):
            slab = x[:, :, p:p + Xo, q:q + Yo]
            dk[:, :, p, q] = np.tensordot(dy, slab, axes=([0, 2, 3], [0, 2, 3]))
            dx[:, :, p:p + Xo, q:q + Yo] += np.tensordot(kernel[:, :, p, q], dy, axes=([0], [1]))
    return dk, np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


@dataclass(frozen=True)
class ConvLayer(_Layer):
    kernel: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "kernel", as_tensor(self.kernel, 4))
        object.__setattr__(self, "bias", as_tensor(self.bias, 1))
        object.__setattr__(self, "activation", Activation.coerce(self.activation))

    @classmethod
    def random(cls, o, c, h, w, seed=0, activation=Activation.IDENTITY):
        rng = np.random.default_rng(seed)
        s = np.sqrt(6.0 / ((c + o) * h * w))
        return cls(rng.uniform(-s, s, (o, c, h, w)), np.zeros(o), activation)

    @property
    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def _rebuild(self, p):
        return replace(self, kernel=p["kernel"], bias=p["bias"])

    def forward(self, x):
        z = conv2d_forward(self.kernel, self.bias, x)
        return self.activation(z), {"x": as_tensor(x, 4), "z": z}

    def backward(self, cache, dy):
        if "x" not in cache or cache["x"].shape[1] != self.kernel.shape[1]:
            raise StaleCache("cache does not come from this layer's forward pass")
        dz = self.activation.backprop(cache["z"], _check_dy(dy, cache["z"].shape))
        dk, dx = conv2d_backward(self.kernel, cache["x"], dz)
        return LayerGrads({"kernel": dk, "bias": dz.sum(axis=(0, 2, 3))}, dx)


# -- KConv --------------------------------------------------------------------

def _spatial_ok(full, first):
    return full % first == 0 and first + full // first - 1 == full


@dataclass(frozen=True)
class KConvConfig:
    """Terms ``(o1, c1, h1, w1)`` of a Kronecker convolution approximating an ``(o, c, h, w)`` kernel.

    The second factor of each term has extents ``(o/o1, c/c1, h/h1, w/w1)``.
    Running the two factors as consecutive convolutions only reproduces the
    Kronecker kernel when ``h1*h2 == h`` and ``h1 + h2 - 1 == h`` (likewise
    for the width), which leaves ``h1`` in ``{1, h}``.
    """

    terms: tuple
    kernel: tuple

    def __post_init__(self):
        terms = tuple(tuple(int(v) for v in t) for t in self.terms)
        kernel = tuple(int(v) for v in self.kernel)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "kernel", kernel)
        if len(kernel) != 4 or min(kernel) < 1:
            raise ConstraintViolation(f"kernel extents must be four positive integers, got {kernel}")
        if not terms:
            raise ConstraintViolation("a KConv layer needs at least one term")
        o, c, h, w = kernel
        for t in terms:
            if len(t) != 4 or min(t) < 1:
                raise ConstraintViolation(f"term {t} must be four positive integers")
            o1, c1, h1, w1 = t
            if o % o1 or c % c1:
                raise ConstraintViolation(f"term {t}: o1 must divide {o} and c1 must divide {c}")
            if not _spatial_ok(h, h1) or not _spatial_ok(w, w1):
                raise ConstraintViolation(
                    f"term {t}: spatial split of a {h}x{w} kernel needs h1 in {{1, {h}}} and w1 in {{1, {w}}}"
                )

    @classmethod
    def from_tuple(cls, r, o1, c1, h1, w1, kernel):
        """The ``(r, o1, c1, h1, w1)`` notation: one term shape repeated ``r`` times."""
        return cls(((o1, c1, h1, w1),) * int(r), kernel)

    @property
    def rank(self):
        return len(self.terms)

    def factor_dims(self, i):
        o, c, h, w = self.kernel
        o1, c1, h1, w1 = self.terms[i]
        return (o1, c1, h1, w1), (o // o1, c // c1, h // h1, w // w1)


@dataclass(frozen=True)
class KConvLayer(_Layer):
    factors: tuple
    bias: np.ndarray
    config: KConvConfig
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        factors = tuple((as_tensor(a, 4), as_tensor(b, 4)) for a, b in self.factors)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "bias", as_tensor(self.bias, 1))
        object.__setattr__(self, "activation", Activation.coerce(self.activation))
        if len(factors) != self.config.rank:
            raise ConstraintViolation("one factor pair per configured term")
        for i, (a, b) in enumerate(factors):
            da, db = self.config.factor_dims(i)
            if a.shape != da or b.shape != db:
                raise ExtentMismatch(f"term {i} factors {a.shape}, {b.shape} should be {da}, {db}")
        if self.bias.size != self.config.kernel[0]:
            raise ExtentMismatch("bias needs one entry per output channel")

    @classmethod
    def random(cls, config, seed=0, activation=Activation.IDENTITY):
        rng = np.random.default_rng(seed)
        o, c, h, w = config.kernel
        s = np.sqrt(6.0 / ((c + o) * h * w)) / np.sqrt(config.rank)
        u = (3.0 * s * s) ** 0.25
        factors = []
        for i in range(config.rank):
            da, db = config.factor_dims(i)
            factors.append((rng.uniform(-u, u, da), rng.uniform(-u, u, db)))
        return cls(tuple(factors), np.zeros(o), config, activation)

    @property
    def params(self):
        p = {}
        for i, (a, b) in enumerate(self.factors):
            p[f"A{i}"] = a
            p[f"B{i}"] = b
        p["bias"] = self.bias
        return p

    def _rebuild(self, p):
        factors = tuple((p[f"A{i}"], p[f"B{i}"]) for i in range(self.config.rank))
        return replace(self, factors=factors, bias=p["bias"])

    def explicit_kernel(self):
        """The dense ``o x c x h x w`` kernel ``sum_i A_i ⊗ B_i``."""
        return sum(kron_tensor_explicit(a, b) for a, b in self.factors)

    def forward(self, x):
        return kconv_forward(self, x)

    def backward(self, cache, dy):
        return kconv_backward(self, cache, dy)


def kconv_forward(layer, x):
    """Two-stage evaluation of a KConv layer; returns ``(y, cache)``.

    Per term: fold the minor ``c2`` digit of the input channel into the batch,
    correlate with ``A``, move the ``o1`` output digit into the batch and
    ``c2`` back into the channels, correlate with ``B``, and unfold the output
    channel as ``a_o * o2 + b_o``.  Terms are accumulated and the bias is added
    once at the end.
    """
    o, c, h, w = layer.config.kernel
    x = as_tensor(x, 4)
    k, cx, X, Y = x.shape
    if cx != c:
        raise ExtentMismatch(f"input has {cx} channels, layer expects {c}")
    if X < h or Y < w:
        raise ExtentMismatch(f"input {(X, Y)} smaller than kernel {(h, w)}")
    z = np.zeros((k, o, X - h + 1, Y - w + 1))
    stages = []
    for a, b in layer.factors:
        o1, c1, h1, w1 = a.shape
        o2, c2 = b.shape[:2]
        x1 = x.reshape(k, c1, c2, X, Y).transpose(0, 2, 1, 3, 4).reshape(k * c2, c1, X, Y)
        mid = _correlate(a, x1)                                   # (k c2) x o1 x X1 x Y1
        X1, Y1 = mid.shape[2:]
        mid = mid.reshape(k, c2, o1, X1, Y1).transpose(0, 2, 1, 3, 4).reshape(k * o1, c2, X1, Y1)
        out = _correlate(b, mid)                                  # (k o1) x o2 x Xo x Yo
        z += out.reshape(k, o1 * o2, *out.shape[2:])
        stages.append(mid)
    z += layer.bias[None, :, None, None]
    return layer.activation(z), {"x": x, "mid": stages, "z": z}


def kconv_backward(layer, cache, dy):
    x = cache.get("x")
    o, c, h, w = layer.config.kernel
    if x is None or x.ndim != 4 or x.shape[1] != c or len(cache.get("mid", ())) != layer.config.rank:
        raise StaleCache("cache does not come from this layer's forward pass")
    k, _, X, Y = x.shape
    dz = layer.activation.backprop(cache["z"], _check_dy(dy, cache["z"].shape))
    grads = {}
    dx = np.zeros_like(x)
    for i, ((a, b), mid) in enumerate(zip(layer.factors, cache["mid"])):
        o1, c1, h1, w1 = a.shape
        o2, c2 = b.shape[:2]
        X1, Y1 = mid.shape[2:]
        dout = dz.reshape(k * o1, o2, *dz.shape[2:])
        db, dmid = conv2d_backward(b, mid, dout)
        dmid = dmid.reshape(k, o1, c2, X1, Y1).transpose(0, 2, 1, 3, 4).reshape(k * c2, o1, X1, Y1)
        x1 = x.reshape(k, c1, c2, X, Y).transpose(0, 2, 1, 3, 4).reshape(k * c2, c1, X, Y)
        da, dx1 = conv2d_backward(a, x1, dmid)
        dx += dx1.reshape(k, c2, c1, X, Y).transpose(0, 2, 1, 3, 4).reshape(k, c, X, Y)
        grads[f"A{i}"] = da
        grads[f"B{i}"] = db
    grads["bias"] = dz.sum(axis=(0, 2, 3))
    return LayerGrads(grads, dx)


@dataclass(frozen=True)
class Flatten(_Layer):
    """Turns ``k x c x X x Y`` activations into a ``(c X Y) x k`` batch."""

    activation: Activation = field(default=Activation.IDENTITY, init=False)

    @property
    def params(self):
        return {}

    def _rebuild(self, p):
        return self

    def forward(self, x):
        x = as_tensor(x, 4)
        return np.ascontiguousarray(x.reshape(x.shape[0], -1).T), {"shape": x.shape}

    def backward(self, cache, dy):
        shape = cache["shape"]
        dy = _check_dy(dy, (int(np.prod(shape[1:])), shape[0]))
        return LayerGrads({}, np.ascontiguousarray(dy.T).reshape(shape))
