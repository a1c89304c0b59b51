"""File formats: KTEN tensors, grayscale PGM images and the layer config text.

KTEN layout (all integers little-endian)::

    b"KTEN" | u16 version (=1) | u16 ndim | ndim x u64 dims | f64 LE payload, row-major

The config format has one layer per line; ``#`` starts a comment::

    input (3,32,32)
    kconv (1,128,24,9,1) kernel=(128,48,9,9) act=relu
    flatten
    kfc (64,4,256,25,5) act=relu
    kfc {(26,15,719,122)x10; (13,30,61,1438)x10} outside=true share_bias=true
    svd (10,256,12)
    fc (10,256)
    conv (64,3,5,5) act=relu

Tuples for ``kfc`` are ``(m1,m2,n1,n2,r)``; for ``kconv`` they are
``(r,o1,c1,h1,w1)``.  A braced group lists 4-tuples with repeat counts.
"""

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    ConfigSyntaxError,
    ConstraintViolation,
    MalformedHeader,
    TruncatedFile,
    UnsupportedFormat,
    VersionUnsupported,
)
from .kron import KronShape
from .layers import Activation, KConvConfig, KfcConfig
from .tensor import as_tensor

__all__ = [
    "write_kten",
    "read_kten",
    "read_pgm",
    "write_pgm",
    "InputSpec",
    "FcSpec",
    "SvdSpec",
    "ConvSpec",
    "KConvSpec",
    "FlattenSpec",
    "ModelConfig",
    "parse_config",
    "render_layer",
    "render_config",
]

KTEN_MAGIC = b"KTEN"
KTEN_VERSION = 1
_KTEN_HEAD = struct.Struct("<4sHH")


# -- KTEN ---------------------------------------------------------------------

def write_kten(path, t):
    t = as_tensor(t)
    head = _KTEN_HEAD.pack(KTEN_MAGIC, KTEN_VERSION, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    with open(path, "wb") as f:
        f.write(head + dims + t.astype("<f8").tobytes())


def read_kten(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _KTEN_HEAD.size:
        if not KTEN_MAGIC.startswith(raw[:4]):
            raise BadMagic(f"{path}: not a KTEN file")
        raise TruncatedFile(f"{path}: header cut short")
    magic, version, ndim = _KTEN_HEAD.unpack_from(raw)
    if magic != KTEN_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}, expected {KTEN_MAGIC!r}")
    if version != KTEN_VERSION:
        raise VersionUnsupported(f"{path}: version {version}, only {KTEN_VERSION} is supported")
    off = _KTEN_HEAD.size
    if len(raw) < off + 8 * ndim:
        raise TruncatedFile(f"{path}: dimension list cut short")
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    count = int(np.prod(dims, dtype=object)) if ndim else 1
    if len(raw) - off < 8 * count:
        raise TruncatedFile(f"{path}: payload holds {(len(raw) - off) // 8} of {count} values")
    if len(raw) - off > 8 * count:
        raise MalformedHeader(f"{path}: {len(raw) - off - 8 * count} trailing bytes")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    return data.astype(np.float64).reshape(dims)


# -- PGM ----------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pgm_header(raw, path):
    fields, pos = [], 0
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise MalformedHeader(f"{path}: incomplete header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P2"):
        raise UnsupportedFormat(f"{path}: {magic!r} is not a grayscale PGM")
    try:
        width, height, maxval = (int(v) for v in fields[1:])
    except ValueError:
        raise MalformedHeader(f"{path}: non-numeric header field") from None
    if width < 1 or height < 1:
        raise MalformedHeader(f"{path}: image is {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: maxval {maxval}, only 8-bit (255) images are supported")
    return magic, width, height, pos


def read_pgm(path):
    """Grayscale image with pixel ``p`` mapped to ``p / 255``."""
    with open(path, "rb") as f:
        raw = f.read()
    magic, width, height, pos = _pgm_header(raw, path)
    n = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the raster
        body = raw[pos + 1:pos + 1 + n]
        if len(body) < n:
            raise TruncatedFile(f"{path}: raster holds {len(body)} of {n} pixels")
        pix = np.frombuffer(body, dtype=np.uint8)
    else:
        try:
            pix = np.array(raw[pos:].split(), dtype=np.int64)
        except ValueError:
            raise MalformedHeader(f"{path}: non-numeric pixel value") from None
        if pix.size < n:
            raise TruncatedFile(f"{path}: raster holds {pix.size} of {n} pixels")
        pix = pix[:n]
        if pix.min() < 0 or pix.max() > 255:
            raise MalformedHeader(f"{path}: pixel value outside 0..255")
    return pix.reshape(height, width) / 255.0


def to_bytes(img):
    """Round-half-up to the 1/255 grid, clamped to ``[0, 255]``."""
    img = as_tensor(img, 2)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, img, ascii=False):
    pix = to_bytes(img)
    h, w = pix.shape
    with open(path, "wb") as f:
        if ascii:
            f.write(f"P2\n{w} {h}\n255\n".encode())
            f.write("\n".join(" ".join(str(v) for v in row) for row in pix).encode() + b"\n")
        else:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(pix.tobytes())


# -- config -------------------------------------------------------------------

@dataclass(frozen=True)
class InputSpec:
    dims: tuple


@dataclass(frozen=True)
class FcSpec:
    m: int
    n: int
    activation: Activation = Activation.IDENTITY


@dataclass(frozen=True)
class SvdSpec:
    m: int
    n: int
    rank: int
    activation: Activation = Activation.IDENTITY


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple
    activation: Activation = Activation.IDENTITY


@dataclass(frozen=True)
class KConvSpec:
    config: KConvConfig
    activation: Activation = Activation.IDENTITY


@dataclass(frozen=True)
class FlattenSpec:
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Ordered layer descriptors; ``kfc`` lines become :class:`KfcConfig` directly."""

    layers: tuple = field(default_factory=tuple)

    @property
    def input_dims(self):
        for d in self.layers:
            if isinstance(d, InputSpec):
                return d.dims
        return None

    @property
    def body(self):
        return tuple(d for d in self.layers if not isinstance(d, InputSpec))


_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z_0-9]*)|(\S))")

_KEYS = {
    "input": set(),
    "flatten": set(),
    "fc": {"act"},
    "svd": {"act"},
    "conv": {"act"},
    "kfc": {"act", "outside", "share_bias"},
    "kconv": {"act", "kernel"},
}


class _Line:
    """Token cursor over one config line."""

    def __init__(self, text, lineno):
        self.lineno = lineno
        self.toks = []
        for m in _TOKEN.finditer(text):
            num, word, punct = m.groups()
            if num is not None:
                self.toks.append(("int", int(num)))
            elif word is not None:
                # "x10" after a tuple is a repeat marker, not a word
                rep = re.fullmatch(r"x(\d+)", word)
                self.toks.append(("rep", int(rep.group(1))) if rep else ("word", word))
            else:
                self.toks.append(("punct", punct))
        self.pos = 0

    def error(self, msg):
        return ConfigSyntaxError(msg, self.lineno)

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            got = "end of line" if tok[0] is None else repr(tok[1])
            raise self.error(f"expected {want}, found {got}")
        self.pos += 1
        return tok[1]

    def at(self, kind, value=None):
        k, v = self.peek()
        return k == kind and (value is None or v == value)

    def tuple(self):
        self.take("punct", "(")
        vals = [self.take("int")]
        while self.at("punct", ","):
            self.take()
            vals.append(self.take("int"))
        self.take("punct", ")")
        return tuple(vals)

    def group(self):
        self.take("punct", "{")
        items = []
        while True:
            t = self.tuple()
            count = 1
            if self.at("rep"):
                count = self.take()
            elif self.at("word", "x"):
                self.take()
                count = self.take("int")
            items.append((t, count))
            if self.at("punct", ";"):
                self.take()
                continue
            self.take("punct", "}")
            return items

    def value(self):
        if self.at("punct", "("):
            return self.tuple()
        return self.take("word")

    def done(self):
        return self.pos >= len(self.toks)


def _flag(line, key, v):
    if v not in ("true", "false"):
        raise line.error(f"{key} must be true or false, got {v!r}")
    return v == "true"


def _act(line, v):
    if not isinstance(v, str):
        raise line.error("act must be a name")
    try:
        return Activation.coerce(v)
    except ValueError:
        raise line.error(f"unknown activation {v!r}") from None


def _arity(line, t, n, what):
    if len(t) != n:
        raise line.error(f"{what} takes a {n}-tuple, got {len(t)} values")
    if min(t) < 1:
        raise line.error(f"{what} values must be positive")
    return t


def _parse_line(line):
    kind = line.take("word")
    if kind not in _KEYS:
        raise line.error(f"unknown layer kind {kind!r}")
    positional = None
    if line.at("punct", "("):
        positional = line.tuple()
    elif line.at("punct", "{"):
        if kind not in ("kfc", "kconv"):
            raise line.error(f"{kind} does not take a braced group")
        positional = line.group()
    keys = {}
    while not line.done():
        key = line.take("word")
        if key not in _KEYS[kind]:
            raise line.error(f"unknown key {key!r} for {kind}")
        if key in keys:
            raise line.error(f"key {key!r} given twice")
        line.take("punct", "=")
        keys[key] = line.value()
    act = _act(line, keys["act"]) if "act" in keys else Activation.IDENTITY

    if kind == "flatten":
        if positional is not None:
            raise line.error("flatten takes no arguments")
        return FlattenSpec()
    if positional is None:
        raise line.error(f"{kind} needs a tuple")
    if kind == "input":
        if len(positional) not in (1, 3) or min(positional) < 1:
            raise line.error("input takes (n) or (c,h,w)")
        return InputSpec(positional)
    if kind == "fc":
        return FcSpec(*_arity(line, positional, 2, "fc"), act)
    if kind == "svd":
        return SvdSpec(*_arity(line, positional, 3, "svd"), act)
    if kind == "conv":
        return ConvSpec(_arity(line, positional, 4, "conv"), act)
    if kind == "kfc":
        if isinstance(positional, list):
            for t, c in positional:
                _arity(line, t, 4, "a kfc group entry")
            shapes = tuple(KronShape(*t) for t, _ in positional)
            ranks = tuple(c for _, c in positional)
        else:
            m1, m2, n1, n2, r = _arity(line, positional, 5, "kfc")
            shapes, ranks = (KronShape(m1, m2, n1, n2),), (r,)
        if any(r < 1 for r in ranks):
            raise line.error("repeat counts must be positive")
        return KfcConfig(
            shapes, ranks,
            outside_sum=_flag(line, "outside", keys.get("outside", "false")),
            share_bias=_flag(line, "share_bias", keys.get("share_bias", "false")),
            activation=act,
        )
    # kconv
    if "kernel" not in keys:
        raise line.error("kconv needs kernel=(o,c,h,w)")
    kernel = keys["kernel"]
    if not isinstance(kernel, tuple):
        raise line.error("kernel must be a tuple")
    _arity(line, kernel, 4, "kernel")
    if isinstance(positional, list):
        terms = []
        for t, c in positional:
            _arity(line, t, 4, "a kconv group entry")
            if c < 1:
                raise line.error("repeat counts must be positive")
            terms += [t] * c
        return KConvSpec(KConvConfig(tuple(terms), kernel), act)
    r, o1, c1, h1, w1 = _arity(line, positional, 5, "kconv")
    return KConvSpec(KConvConfig.from_tuple(r, o1, c1, h1, w1, kernel), act)


class _Chain:
    """Tracks the running activation shape to catch extent mismatches early."""

    def __init__(self):
        self.shape = None  # None, (n,) or (c, X, Y)

    def dense(self, n, m, lineno, what):
        if self.shape is None:
            return
        have = self.shape[0] if len(self.shape) == 1 else None
        if have is None:
            raise ConstraintViolation(f"line {lineno}: {what} needs a flatten after spatial layers")
        if have != n:
            raise ConstraintViolation(f"line {lineno}: {what} expects {n} inputs but receives {have}")
        self.shape = (m,)

    def conv(self, kernel, lineno, what):
        o, c, h, w = kernel
        if self.shape is not None:
            if len(self.shape) != 3:
                raise ConstraintViolation(f"line {lineno}: {what} needs a (c,h,w) input")
            cin, X, Y = self.shape
            if cin != c:
                raise ConstraintViolation(f"line {lineno}: {what} expects {c} channels but receives {cin}")
            if X < h or Y < w:
                raise ConstraintViolation(f"line {lineno}: {h}x{w} kernel exceeds a {X}x{Y} input")
            self.shape = (o, X - h + 1, Y - w + 1)

    def flatten(self):
        if self.shape is not None:
            self.shape = (int(np.prod(self.shape)),)


def parse_config(text, input_dims=None, check_extents=True):
    """Parse config text into a :class:`ModelConfig`.

    Extents are checked along the chain when the input shape is known, from
    an ``input`` line or from ``input_dims``; without one the lines are
    independent layers (handy for listing alternatives to compare costs).  Syntax problems raise
    :class:`ConfigSyntaxError`; impossible shapes raise
    :class:`ConstraintViolation`.  Both messages start with the line number.
    ``check_extents=False`` skips the chain check but keeps per-layer checks.
    """
    layers = []
    chain = _Chain()
    if input_dims is not None and check_extents:
        chain.shape = tuple(int(d) for d in input_dims)
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        line = _Line(body, lineno)
        try:
            desc = _parse_line(line)
        except ConstraintViolation as exc:
            raise ConstraintViolation(f"line {lineno}: {exc}") from None
        if isinstance(desc, InputSpec):
            if layers:
                raise ConfigSyntaxError("input must be the first layer line", lineno)
            if check_extents and input_dims is not None and tuple(input_dims) != desc.dims:
                raise ConstraintViolation(f"line {lineno}: input {desc.dims} disagrees with {tuple(input_dims)}")
            chain.shape = desc.dims
        elif isinstance(desc, FlattenSpec):
            chain.flatten()
        elif isinstance(desc, FcSpec):
            chain.dense(desc.n, desc.m, lineno, "fc")
        elif isinstance(desc, SvdSpec):
            if desc.rank > min(desc.m, desc.n):
                raise ConstraintViolation(f"line {lineno}: rank {desc.rank} exceeds min({desc.m}, {desc.n})")
            chain.dense(desc.n, desc.m, lineno, "svd")
        elif isinstance(desc, KfcConfig):
            chain.dense(desc.n, desc.m, lineno, "kfc")
        elif isinstance(desc, ConvSpec):
            chain.conv(desc.kernel, lineno, "conv")
        elif isinstance(desc, KConvSpec):
            chain.conv(desc.config.kernel, lineno, "kconv")
        layers.append(desc)
        if not check_extents:
            chain.shape = None
    return ModelConfig(tuple(layers))


def _tup(t):
    return "(" + ",".join(str(v) for v in t) + ")"


def _runs(items):
    out = []
    for it in items:
        if out and out[-1][0] == it:
            out[-1][1] += 1
        else:
            out.append([it, 1])
    return out


def _act_suffix(act):
    return "" if act is Activation.IDENTITY else f" act={act.value}"


def render_layer(d):
    if isinstance(d, InputSpec):
        return f"input {_tup(d.dims)}"
    if isinstance(d, FlattenSpec):
        return "flatten"
    if isinstance(d, FcSpec):
        return f"fc {_tup((d.m, d.n))}" + _act_suffix(d.activation)
    if isinstance(d, SvdSpec):
        return f"svd {_tup((d.m, d.n, d.rank))}" + _act_suffix(d.activation)
    if isinstance(d, ConvSpec):
        return f"conv {_tup(d.kernel)}" + _act_suffix(d.activation)
    if isinstance(d, KfcConfig):
        if len(d.shapes) == 1:
            s = f"kfc {_tup(d.shapes[0].as_tuple() + (d.ranks[0],))}"
        else:
            s = "kfc {" + "; ".join(f"{_tup(sh.as_tuple())}x{r}" for sh, r in d.plan) + "}"
        s += _act_suffix(d.activation)
        if d.outside_sum:
            s += " outside=true"
        if d.share_bias:
            s += " share_bias=true"
        return s
    if isinstance(d, KConvSpec):
        runs = _runs(d.config.terms)
        if len(runs) == 1:
            s = f"kconv {_tup((runs[0][1],) + runs[0][0])}"
        else:
            s = "kconv {" + "; ".join(f"{_tup(t)}x{c}" for t, c in runs) + "}"
        return s + f" kernel={_tup(d.config.kernel)}" + _act_suffix(d.activation)
    raise TypeError(f"cannot render {type(d).__name__}")


def render_config(cfg):
    return "".join(render_layer(d) + "\n" for d in cfg.layers)
