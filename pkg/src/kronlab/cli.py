"""Command-line front end, ``kronlab <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, unparsable config),
2 data error (unreadable file, shape mismatch), 3 numerical failure
(SVD non-convergence, non-finite values, failed gradient check).

The default seed is 0; the ``KRONLAB_SEED`` environment variable replaces it.
Every report is printed as an aligned table and can also be written as CSV
with a fixed header row.
"""

import argparse
import csv
import math
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .cost import conv_cost, fc_cost, format_ratio, kconv_cost, kfc_cost, output_positions, svd_cost
from .errors import ConfigSyntaxError, ConvergenceFailure, KronlabError, NonFinite
from .io import (
    ConvSpec,
    FcSpec,
    FlattenSpec,
    KConvSpec,
    SvdSpec,
    parse_config,
    read_kten,
    read_pgm,
    render_config,
    render_layer,
    write_kten,
    write_pgm,
)
from .kron import KronShape, kpsvd, reconstruct, svd
from .layers import (
    ConvLayer,
    FcLayer,
    Flatten,
    KConvLayer,
    KfcConfig,
    LayerGrads,
    SvdFcLayer,
    conv2d_forward,
    kfc_from_pretrained,
    kfc_random_init,
)
from .train import ToyNet, grad_check, make_rng, toy_data, train_toy

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- small parsers and writers -----------------------------------------------

def default_seed():
    raw = os.environ.get("KRONLAB_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"KRONLAB_SEED must be an integer, got {raw!r}") from None


def _pair(text, what):
    try:
        a, b = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"{what} must look like 20x16, got {text!r}") from None
    if a < 1 or b < 1:
        raise UsageError(f"{what} extents must be positive")
    return a, b


def parse_shape(text):
    """``m1xn1:m2xn2``, the extents of ``A`` then ``B``."""
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"--shape must look like m1xn1:m2xn2, got {text!r}")
    (m1, n1), (m2, n2) = _pair(parts[0], "--shape"), _pair(parts[1], "--shape")
    return KronShape(m1, m2, n1, n2)


def parse_int_list(text, what):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"{what} needs positive integers")
    return vals


def config_text(arg):
    """A ``--config`` value is a file path when such a file exists, otherwise the config itself."""
    p = Path(arg)
    try:
        if p.is_file():
            return p.read_text()
    except OSError:
        pass
    return arg


def load_config(arg, input_dims=None):
    return parse_config(config_text(arg), input_dims=input_dims)


def write_csv(path, header, rows):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def print_table(header, rows, out=None):
    out = out or sys.stdout
    cells = [list(header)] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip(), file=out)


def _g(x):
    return f"{x:.6g}"


# -- building layers from config descriptors ----------------------------------

def build_layer(spec, seed):
    if isinstance(spec, FcSpec):
        return FcLayer.random(spec.m, spec.n, seed, spec.activation)
    if isinstance(spec, SvdSpec):
        return SvdFcLayer.random(spec.m, spec.n, spec.rank, seed, spec.activation)
    if isinstance(spec, KfcConfig):
        return kfc_random_init(spec, seed)
    if isinstance(spec, ConvSpec):
        return ConvLayer.random(*spec.kernel, seed, spec.activation)
    if isinstance(spec, KConvSpec):
        return KConvLayer.random(spec.config, seed, spec.activation)
    if isinstance(spec, FlattenSpec):
        return Flatten()
    raise TypeError(f"no layer for {type(spec).__name__}")


def build_layers(specs, seed):
    seeds = np.random.SeedSequence(seed).generate_state(max(len(specs), 1))
    return [build_layer(s, int(v)) for s, v in zip(specs, seeds)]


def _is_prime(v):
    return v > 1 and all(v % d for d in range(2, math.isqrt(v) + 1))


def _next_composite(v):
    v += 1
    while _is_prime(v):
        v += 1
    return v


# -- approx -------------------------------------------------------------------

def cmd_approx(args):
    w = read_kten(args.input)
    if w.ndim != 2:
        raise DataError(f"{args.input}: expected a matrix, got a rank-{w.ndim} tensor")
    shape = parse_shape(args.shape)
    if not shape.divides(*w.shape):
        raise DataError(
            f"shape {args.shape} tiles a {shape.m}x{shape.n} matrix, input is {w.shape[0]}x{w.shape[1]}"
        )
    ksum, report = kpsvd(w, shape, args.rank)
    sigma = report.singular_values
    tails = report.tail_residuals()
    partial = np.zeros_like(w)
    rows = []
    for k, term in enumerate(ksum.terms, 1):
        partial += np.kron(term.a, term.b)
        resid = float(np.linalg.norm(w - partial))
        rows.append([k, sigma[k - 1], resid, tails[k], k * shape.params])
    print(f"KPSVD of a {w.shape[0]}x{w.shape[1]} matrix, A {shape.m1}x{shape.n1}, B {shape.m2}x{shape.n2}")
    print(f"singular values of R(W): {len(sigma)}, input norm {_g(report.input_fro)}")
    print_table(
        ["rank", "sigma", "residual", "sigma_tail", "params"],
        [[k, _g(s), _g(r), _g(t), f"{p:,}"] for k, s, r, t, p in rows],
    )
    print(f"dense parameters {w.size:,}, Kronecker parameters {report.params_used:,}")
    if args.report:
        write_csv(args.report, ["rank", "sigma", "residual", "sigma_tail", "params"],
                  [[k, repr(float(s)), repr(r), repr(float(t)), p] for k, s, r, t, p in rows])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, term in enumerate(ksum.terms):
            write_kten(out / f"A{i}.kten", term.a)
            write_kten(out / f"B{i}.kten", term.b)
    return EXIT_OK


# -- image --------------------------------------------------------------------

def _psnr(err_fro, size):
    mse = err_fro**2 / size
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def image_rows(img, block, ranks, methods):
    """Rows ``(method, rank, params, frobenius_error, psnr, approximation)`` for each method and rank."""
    M, N = img.shape
    H, W = block
    out = []
    for method in methods:
        if method == "kpsvd":
            if M % H or N % W:
                raise DataError(f"a {M}x{N} image cannot be tiled by {H}x{W} blocks")
            shape = KronShape(M // H, H, N // W, W)
            if max(ranks) > shape.max_rank:
                raise DataError(f"rank {max(ranks)} exceeds the maximum {shape.max_rank} for this block size")
            ksum, _ = kpsvd(img, shape, max(ranks))
            per_rank = shape.params
            approx = np.zeros_like(img)
            done = 0
            for r in sorted(ranks):
                for term in ksum.terms[done:r]:
                    approx = approx + np.kron(term.a, term.b)
                done = r
                err = float(np.linalg.norm(img - approx))
                out.append((method, r, r * per_rank, err, _psnr(err, img.size), approx))
        else:
            if max(ranks) > min(M, N):
                raise DataError(f"rank {max(ranks)} exceeds min({M}, {N})")
            u, s, v = svd(img)
            for r in sorted(ranks):
                approx = (u[:, :r] * s[:r]) @ v[:, :r].T
                err = float(np.linalg.norm(img - approx))
                out.append((method, r, r * (M + N), err, _psnr(err, img.size), approx))
    return out


def cmd_image(args):
    img = read_pgm(args.input)
    block = _pair(args.block, "--block")
    ranks = parse_int_list(args.ranks, "--ranks")
    methods = ["kpsvd", "svd"] if args.method == "both" else [args.method]
    rows = image_rows(img, block, ranks, methods)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for method, r, _, _, _, approx in rows:
        write_pgm(out / f"{method}_rank{r}.pgm", approx)
    table = [[m, r, p, e, q] for m, r, p, e, q, _ in rows]
    print(f"{img.shape[0]}x{img.shape[1]} image, block {block[0]}x{block[1]}")
    print_table(["method", "rank", "params", "frobenius_error", "psnr"],
                [[m, r, f"{p:,}", _g(e), f"{q:.2f}"] for m, r, p, e, q in table])
    write_csv(out / "report.csv", ["method", "rank", "params", "frobenius_error", "psnr"],
              [[m, r, p, repr(e), repr(q)] for m, r, p, e, q in table])
    return EXIT_OK


# -- compress -----------------------------------------------------------------

def _single_kfc(cfg):
    kfcs = [d for d in cfg.body if isinstance(d, KfcConfig)]
    if len(kfcs) != 1 or len(cfg.body) != 1:
        raise UsageError("--config must describe exactly one kfc layer")
    return kfcs[0]


def cmd_compress(args):
    w = read_kten(args.weights)
    b = read_kten(args.bias)
    cfg = _single_kfc(load_config(args.config))
    if w.ndim != 2:
        raise DataError(f"{args.weights}: expected a matrix, got a rank-{w.ndim} tensor")
    m, n = w.shape
    if b.shape != (m,):
        raise DataError(f"bias has shape {b.shape}, weights need ({m},)")
    if (cfg.m, cfg.n) != (m, n):
        msg = f"config describes a {cfg.m}x{cfg.n} layer but the weights are {m}x{n}"
        hints = []
        if _is_prime(n):
            hints.append(
                f"{n} input features is prime, so only trivial Kronecker shapes exist; "
                f"pad the input with dummy features (zero columns), e.g. to {_next_composite(n)}"
            )
        if _is_prime(m):
            hints.append(
                f"{m} outputs is prime; pad with dummy output units (zero rows), e.g. to {_next_composite(m)}"
            )
        raise DataError("; ".join([msg] + hints))
    layer = kfc_from_pretrained(w, b, cfg)
    resid = float(np.linalg.norm(w - reconstruct(layer.ksum)))
    rel = resid / max(float(np.linalg.norm(w)), 1e-300)
    cost = kfc_cost(cfg)
    print(f"layer {render_layer(cfg)}")
    print(f"layer params {cost.params:,} vs dense {cost.baseline_params:,}: "
          f"{format_ratio(cost.reduction_vs_baseline)} reduction")
    print(f"residual {_g(resid)} (relative {_g(rel)})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, term in enumerate(layer.ksum.terms):
        write_kten(out / f"A{i}.kten", term.a)
        write_kten(out / f"B{i}.kten", term.b)
    write_kten(out / "bias.kten", layer.biases[0])
    (out / "config.txt").write_text(render_config(load_config(args.config)))
    write_csv(out / "report.csv",
              ["params", "baseline_params", "reduction", "residual_fro", "relative_residual"],
              [[cost.params, cost.baseline_params, repr(float(cost.reduction_vs_baseline)), repr(resid), repr(rel)]])
    return EXIT_OK


# -- count --------------------------------------------------------------------

COUNT_HEADER = [
    "layer", "config", "params", "baseline_params", "param_reduction",
    "madds", "madds_alt", "baseline_madds", "madd_reduction", "per",
]


def count_rows(cfg, input_dims=None, batch=None):
    """Cost rows for every parameterised layer of ``cfg``.

    Convolution madds are per output position unless the spatial input size
    is known, in which case every count is per sample; ``batch`` scales the
    per-sample counts to a whole batch.
    """
    shape = tuple(input_dims) if input_dims else cfg.input_dims
    rows = []
    for i, spec in enumerate(cfg.body):
        positions = None
        if isinstance(spec, (ConvSpec, KConvSpec)):
            kernel = spec.kernel if isinstance(spec, ConvSpec) else spec.config.kernel
            cost = conv_cost(kernel) if isinstance(spec, ConvSpec) else kconv_cost(spec.config)
            if shape is not None and len(shape) == 3:
                positions = output_positions(kernel, shape[1], shape[2])
                shape = (kernel[0], shape[1] - kernel[2] + 1, shape[2] - kernel[3] + 1)
            else:
                shape = None
        elif isinstance(spec, FlattenSpec):
            if shape is not None:
                shape = (int(np.prod(shape)),)
            continue
        else:
            if isinstance(spec, FcSpec):
                cost = fc_cost(spec.m, spec.n)
            elif isinstance(spec, SvdSpec):
                cost = svd_cost(spec.m, spec.n, spec.rank)
            else:
                cost = kfc_cost(spec)
            shape = (spec.m,)
            positions = 1
        scale, per = 1, "position"
        if positions is not None:
            scale, per = positions, "sample"
            if batch:
                scale, per = positions * batch, f"batch of {batch}"
        rows.append([
            i, render_layer(spec), cost.params, cost.baseline_params, cost.reduction_vs_baseline,
            cost.madds * scale, cost.madds_alt * scale, cost.baseline_madds * scale,
            cost.madd_reduction, per,
        ])
    return rows


def cmd_count(args):
    dims = parse_int_list(args.input_dims, "--input-dims") if args.input_dims else None
    if dims is not None and len(dims) not in (1, 3):
        raise UsageError("--input-dims takes n or c,h,w")
    cfg = load_config(args.config, input_dims=dims)
    rows = count_rows(cfg, dims, args.batch)
    print_table(
        COUNT_HEADER,
        [[i, c, f"{p:,}", f"{bp:,}", format_ratio(pr), f"{m:,}", f"{ma:,}", f"{bm:,}", format_ratio(mr), per]
         for i, c, p, bp, pr, m, ma, bm, mr, per in rows],
    )
    if args.csv:
        write_csv(args.csv, COUNT_HEADER,
                  [[i, c, p, bp, repr(float(pr)), m, ma, bm, repr(float(mr)), per]
                   for i, c, p, bp, pr, m, ma, bm, mr, per in rows])
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------

GRADCHECK_DEFAULTS = {
    "fc": "fc (6,8) act=relu",
    "svd": "svd (6,8,3) act=relu",
    "kfc": "kfc {(4,2,3,4)x2; (2,4,6,2)x2} act=relu",
    "conv": "conv (4,3,3,3) act=relu",
    "kconv": "kconv (2,2,3,3,1) kernel=(4,6,3,3) act=relu",
}


class _CorruptedBackward:
    """Test hook: wraps a layer and scales every parameter gradient by 1.01."""

    def __init__(self, inner):
        self.inner = inner

    @property
    def params(self):
        return self.inner.params

    def with_params(self, params):
        return _CorruptedBackward(self.inner.with_params(params))

    def forward(self, x):
        return self.inner.forward(x)

    def preactivations(self, cache):
        return self.inner.preactivations(cache)

    def backward(self, cache, dy):
        g = self.inner.backward(cache, dy)
        return LayerGrads({k: 1.01 * v for k, v in g.d_params.items()}, g.d_input)


def gradcheck_input(spec, rng, batch=3):
    if isinstance(spec, (ConvSpec, KConvSpec)):
        o, c, h, w = spec.kernel if isinstance(spec, ConvSpec) else spec.config.kernel
        return rng.standard_normal((batch, c, h + 2, w + 2))
    return rng.standard_normal((spec.n, batch))


def cmd_gradcheck(args):
    cfg = load_config(args.config or GRADCHECK_DEFAULTS[args.layer])
    body = [d for d in cfg.body if not isinstance(d, FlattenSpec)]
    if len(body) != 1:
        raise UsageError("--config must describe exactly one layer")
    spec = body[0]
    rng = make_rng(args.seed)
    layer = build_layer(spec, args.seed)
    # nonzero biases so relu units sit on both sides of zero
    layer = layer.with_params({"bias": rng.standard_normal(layer.params["bias"].shape)})
    x = gradcheck_input(spec, rng)
    if args.corrupt_backward:
        layer = _CorruptedBackward(layer)
    err = grad_check(layer, x, seed=args.seed)
    ok = err <= GRADCHECK_TOL
    print(f"layer {render_layer(spec)}")
    print(f"max relative error {err:.3e} (tolerance {GRADCHECK_TOL:.0e}): {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- bench --------------------------------------------------------------------

BENCH_DEFAULTS = {
    "kfc": ("kfc (64,4,256,25,5)", 64),
    "kconv": ("kconv (1,128,24,9,1) kernel=(128,48,9,9)", 16),
}


def time_median(fn, repeats):
    """Median wall-clock seconds over ``repeats`` calls after one untimed warm-up call."""
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), times


def bench_setup(mode, spec, batch, size, seed):
    """``(implicit_fn, explicit_fn, cost_lines)`` for one benchmark."""
    rng = make_rng(seed)
    if mode == "kfc":
        if not isinstance(spec, KfcConfig):
            raise UsageError("--mode kfc needs a kfc config")
        layer = kfc_random_init(spec, seed)
        W = reconstruct(layer.ksum)
        b = layer.biases[0][:, None]
        x = rng.standard_normal((spec.n, batch))
        cost = kfc_cost(spec)
        return (lambda: layer.forward(x)), (lambda: W @ x + b), cost, 1
    if not isinstance(spec, KConvSpec):
        raise UsageError("--mode kconv needs a kconv config")
    layer = KConvLayer.random(spec.config, seed, spec.activation)
    K = layer.explicit_kernel()
    o, c, h, w = spec.config.kernel
    if size < max(h, w):
        raise DataError(f"input size {size} is smaller than the {h}x{w} kernel")
    x = rng.standard_normal((batch, c, size, size))
    cost = kconv_cost(spec.config)
    positions = output_positions(spec.config.kernel, size, size)
    return (lambda: layer.forward(x)), (lambda: conv2d_forward(K, layer.bias, x)), cost, positions


def cmd_bench(args):
    text, default_batch = BENCH_DEFAULTS[args.mode]
    cfg = load_config(args.config or text)
    if len(cfg.body) != 1:
        raise UsageError("--config must describe exactly one layer")
    batch = args.batch or default_batch
    implicit, explicit, cost, positions = bench_setup(args.mode, cfg.body[0], batch, args.size, args.seed)
    t_imp, all_imp = time_median(implicit, args.repeats)
    t_exp, all_exp = time_median(explicit, args.repeats)
    names = ("kronecker", "dense") if args.mode == "kfc" else ("two-stage", "direct")
    madds = cost.madds * positions
    alt = cost.madds_alt * positions
    dense = cost.baseline_madds * positions
    print(f"layer {render_layer(cfg.body[0])}, batch {batch}, {args.repeats} timed run(s) after one warm-up")
    rows = [[names[0], f"{t_imp * 1e3:.3f}", f"{madds:,}"], [names[1], f"{t_exp * 1e3:.3f}", f"{dense:,}"]]
    print_table(["path", "median_ms", "madds_per_sample"], rows)
    if args.repeats > 1:
        print(f"spread: {names[0]} {min(all_imp) * 1e3:.3f}..{max(all_imp) * 1e3:.3f} ms, "
              f"{names[1]} {min(all_exp) * 1e3:.3f}..{max(all_exp) * 1e3:.3f} ms")
    if args.mode == "kfc":
        print(f"madds per sample: A-first {madds:,}, B-first {alt:,}, dense {dense:,}")
    model = names[1] if dense < madds else names[0]
    print(f"cost model: {model} path is cheaper in madds "
          f"(predicted {names[0]} speedup {format_ratio(cost.madd_reduction)})")
    faster = names[0] if t_imp < t_exp else names[1]
    print(f"measured: {faster} path is faster (measured {names[0]} speedup {t_exp / t_imp:.2f}×)")
    if args.csv:
        write_csv(args.csv, ["path", "median_s", "min_s", "max_s", "madds_per_sample"], [
            [names[0], repr(t_imp), repr(min(all_imp)), repr(max(all_imp)), madds],
            [names[1], repr(t_exp), repr(min(all_exp)), repr(max(all_exp)), dense],
        ])
    return EXIT_OK


# -- train-toy ----------------------------------------------------------------

TOY_DEFAULTS = {
    "fc": "fc (32,{n}) act=relu\nfc ({c},32)",
    "svd": "svd (32,{n},8) act=relu\nfc ({c},32)",
    "kfc": "kfc (4,8,8,8,8) act=relu\nfc ({c},32)",
}


def toy_net(text, n_features, n_classes, seed):
    cfg = parse_config(text, input_dims=(n_features,))
    body = cfg.body
    if not body:
        raise DataError("the network config is empty")
    last = body[-1]
    out = getattr(last, "m", None)
    if out != n_classes:
        raise DataError(f"the last layer must produce {n_classes} class scores, got {out}")
    return ToyNet(build_layers(body, seed), (n_features,))


def cmd_train_toy(args):
    n = args.features
    text = config_text(args.config) if args.config else TOY_DEFAULTS[args.net].format(n=n, c=args.classes)
    if not args.config and args.net == "kfc" and n != 64:
        raise UsageError("the default kfc net expects 64 features; pass --config for other sizes")
    net = toy_net(text, n, args.classes, args.seed)
    data = toy_data(args.samples, n, args.classes, seed=args.seed)
    res = train_toy(net, data, args.epochs, args.lr, seed=args.seed, batch_size=args.batch_size)
    for e, (a, l) in enumerate(zip(res.accuracy, res.loss)):
        print(f"epoch {e:3d}  loss {l:.6f}  accuracy {a:.4f}")
    print(f"parameters {net.n_params:,}")
    if args.out:
        write_csv(args.out, ["epoch", "loss", "accuracy"],
                  [[e, repr(l), repr(a)] for e, (a, l) in enumerate(zip(res.accuracy, res.loss))])
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser():
    seed = default_seed()
    p = _Parser(prog="kronlab", description="Kronecker-factored approximation of network layers.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("approx", help="nearest Kronecker sum of a matrix stored as KTEN")
    s.add_argument("input")
    s.add_argument("--shape", required=True, help="factor extents m1xn1:m2xn2")
    s.add_argument("--rank", type=int, default=1)
    s.add_argument("--out", help="directory for the A{i}.kten / B{i}.kten factors")
    s.add_argument("--report", help="CSV report path")
    s.set_defaults(func=cmd_approx)

    s = sub.add_parser("image", help="rank-r KPSVD and SVD reconstructions of a PGM image")
    s.add_argument("input")
    s.add_argument("--block", default="20x16", help="B block extents HxW")
    s.add_argument("--ranks", default="1,2,5,10")
    s.add_argument("--method", choices=["kpsvd", "svd", "both"], default="both")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_image)

    s = sub.add_parser("compress", help="initialise a KFC layer from dense weights")
    s.add_argument("weights")
    s.add_argument("bias")
    s.add_argument("--config", required=True, help="config text or file with one kfc line")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("count", help="parameter and multiply-add counts for a config")
    s.add_argument("--config", required=True)
    s.add_argument("--input-dims", help="n or c,h,w")
    s.add_argument("--batch", type=int)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("gradcheck", help="finite-difference check of one layer's backward pass")
    s.add_argument("--layer", choices=sorted(GRADCHECK_DEFAULTS), default="kfc")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time implicit against explicit evaluation")
    s.add_argument("--mode", choices=["kfc", "kconv"], required=True)
    s.add_argument("--config")
    s.add_argument("--batch", type=int)
    s.add_argument("--size", type=int, default=24, help="spatial input size for kconv")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("train-toy", help="SGD on synthetic Gaussian clusters")
    s.add_argument("--net", choices=sorted(TOY_DEFAULTS), default="fc")
    s.add_argument("--config")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--samples", type=int, default=512)
    s.add_argument("--features", type=int, default=64)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_toy)
    return p


def _check_counts(args):
    for name in ("rank", "repeats", "batch", "epochs", "samples", "features", "classes", "batch_size", "size"):
        v = getattr(args, name, None)
        if v is not None and v < (0 if name == "epochs" else 1):
            raise UsageError(f"--{name.replace('_', '-')} must be positive")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _check_counts(args)
        return args.func(args)
    except (UsageError, ConfigSyntaxError) as exc:
        print(f"kronlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceFailure, NonFinite) as exc:
        print(f"kronlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, KronlabError, OSError) as exc:
        print(f"kronlab: {exc}", file=sys.stderr)
        return EXIT_DATA
