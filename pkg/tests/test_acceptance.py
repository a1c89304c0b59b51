"""Acceptance gate: ten criteria, each checked against an independent oracle and a time limit.

Run under pytest (a summary line per criterion is printed at the end of the
session) or directly with ``python3 tests/test_acceptance.py``.
"""

import csv
import io as _stdio
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kronlab.cli import bench_setup, main, time_median
from kronlab.cost import format_ratio, kconv_cost, kfc_cost, svd_cost
from kronlab.io import (
    ConvSpec,
    FcSpec,
    FlattenSpec,
    KConvSpec,
    ModelConfig,
    SvdSpec,
    parse_config,
    read_kten,
    read_pgm,
    render_config,
    write_kten,
    write_pgm,
)
from kronlab.kron import KronShape, KronTerm, apply_kron, kpsvd
from kronlab.layers import (
    Activation,
    FcLayer,
    KConvConfig,
    KConvLayer,
    KfcConfig,
    kfc_random_init,
)
from kronlab.train import ToyNet, grad_check, toy_data, train_toy

# criterion number -> (passed, seconds, detail); filled as the tests run
RESULTS = {}

TITLES = {
    1: "vec-trick identity",
    2: "KPSVD optimality",
    3: "degenerate equivalences",
    4: "KConv two-stage oracle",
    5: "finite-difference gradients",
    6: "counting reproduction",
    7: "image approximation reproduction",
    8: "benchmark sanity",
    9: "toy training",
    10: "IO round trips",
}


def _run(n, fn, limit):
    t0 = time.perf_counter()
    try:
        detail = fn()
        elapsed = time.perf_counter() - t0
        ok = elapsed < limit
        if not ok:
            detail = f"took {elapsed:.1f} s, limit {limit} s"
    except AssertionError as exc:
        elapsed = time.perf_counter() - t0
        ok, detail = False, str(exc) or "assertion failed"
    RESULTS[n] = (ok, elapsed, detail)
    assert ok, f"criterion {n} ({TITLES[n]}): {detail}"


def report_line(n):
    ok, secs, detail = RESULTS[n]
    return f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {TITLES[n]} ({secs:.2f} s): {detail}"


def report_lines():
    return [report_line(n) for n in sorted(RESULTS)]


# -- independent oracles ------------------------------------------------------

def block_rearrangement(w, m1, m2, n1, n2):
    """Rows are the column-major vecs of the m2 x n2 blocks, blocks taken column-major."""
    rows = []
    for j1 in range(n1):
        for i1 in range(m1):
            blk = w[i1 * m2:(i1 + 1) * m2, j1 * n2:(j1 + 1) * n2]
            rows.append(blk.flatten(order="F"))
    return np.array(rows)


def direct_conv(kernel, bias, x):
    h, w = kernel.shape[2:]
    win = sliding_window_view(x, (h, w), axis=(2, 3))  # k c X' Y' h w
    return np.einsum("kcxyhw,ochw->koxy", win, kernel) + bias[None, :, None, None]


# -- 1 ------------------------------------------------------------------------

def criterion_1():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        m1, n1, m2, n2 = rng.integers(1, 17, 4)
        a = rng.standard_normal((m1, n1))
        b = rng.standard_normal((m2, n2))
        x = rng.standard_normal(n1 * n2)
        want = np.kron(a, b) @ x
        got = apply_kron(KronTerm(a, b), x)
        worst = max(worst, np.linalg.norm(got - want) / np.linalg.norm(want))
    assert worst <= 1e-12, f"max relative gap {worst:.2e}"
    return f"100 cases, max relative gap {worst:.1e} <= 1e-12"


# -- 2 ------------------------------------------------------------------------

def _random_shape(rng, cap=36):
    while True:
        m1, m2, n1, n2 = rng.integers(1, 7, 4)
        s = KronShape(int(m1), int(m2), int(n1), int(n2))
        if s.m <= cap and s.n <= cap and s.max_rank >= 2:
            return s


def _best_random_residual(w, s, r, rng, trials=1000):
    """Smallest residual over random r-term Kronecker sums with least-squares coefficients."""
    A = rng.standard_normal((trials, r, s.m1, s.n1))
    B = rng.standard_normal((trials, r, s.m2, s.n2))
    K = np.einsum("tiac,tibd->tiabcd", A, B).reshape(trials, r, s.m * s.n)
    target = w.reshape(-1)
    gram = np.einsum("tip,tjp->tij", K, K)
    rhs = np.einsum("tip,p->ti", K, target)
    coef = np.linalg.solve(gram + 1e-12 * np.eye(r), rhs[..., None])[..., 0]
    fit = np.einsum("ti,tip->tp", coef, K)
    return float(np.min(np.linalg.norm(target - fit, axis=1)))


def criterion_2():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        s = _random_shape(rng)
        r = int(rng.integers(1, s.max_rank))
        w = rng.standard_normal((s.m, s.n))
        _, rep = kpsvd(w, s, r)
        sig = np.linalg.svd(block_rearrangement(w, s.m1, s.m2, s.n1, s.n2), compute_uv=False)
        tail2 = float(np.sum(sig[r:] ** 2))
        gap = abs(rep.residual_fro**2 - tail2) / tail2
        worst = max(worst, gap)
        assert gap <= 1e-8, f"shape {s.as_tuple()} rank {r}: residual^2 off the sigma tail by {gap:.1e}"
        rival = _best_random_residual(w, s, r, rng)
        assert rep.residual_fro < rival, f"shape {s.as_tuple()}: a random pair did better"
    return f"50 matrices, max relative residual^2 gap {worst:.1e}; beat 1000 random fits each"


# -- 3 ------------------------------------------------------------------------

def criterion_3():
    rng = np.random.default_rng(303)
    worst = 0.0
    for m, n in [(7, 5), (12, 12), (20, 9)]:
        w = rng.standard_normal((m, n))
        sig = np.linalg.svd(w, compute_uv=False)
        norm = np.linalg.norm(w)
        outer = KronShape(m, 1, 1, n)  # A is a column, B a row
        for r in range(1, min(m, n) + 1):
            _, rep = kpsvd(w, outer, r)
            want = np.sqrt(np.sum(sig[r:] ** 2))
            gap = abs(rep.residual_fro - want) / norm
            worst = max(worst, gap)
            assert gap <= 1e-8, f"{m}x{n} rank {r}: outer-product shape off the SVD residual by {gap:.1e}"
        _, rep = kpsvd(w, KronShape(m, 1, n, 1), 1)
        assert rep.residual_fro <= 1e-12 * norm, f"{m}x{n}: shape (m,1,n,1) residual {rep.residual_fro:.1e}"
    return f"outer-product shape matches truncated SVD for every rank (max gap {worst:.1e}); (m,1,n,1) exact"


# -- 4 ------------------------------------------------------------------------

def criterion_4():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(100):
        o, c = (int(v) for v in rng.integers(1, 9, 2))
        h, w = (int(v) for v in rng.integers(1, 4, 2))
        divs_o = [d for d in range(1, o + 1) if o % d == 0]
        divs_c = [d for d in range(1, c + 1) if c % d == 0]
        terms = tuple(
            (int(rng.choice(divs_o)), int(rng.choice(divs_c)), int(rng.choice([1, h])), int(rng.choice([1, w])))
            for _ in range(int(rng.integers(1, 4)))
        )
        cfg = KConvConfig(terms, (o, c, h, w))
        factors = []
        for i in range(cfg.rank):
            da, db = cfg.factor_dims(i)
            factors.append((rng.standard_normal(da), rng.standard_normal(db)))
        bias = rng.standard_normal(o)
        layer = KConvLayer(tuple(factors), bias, cfg)
        x = rng.standard_normal((int(rng.integers(1, 4)), c, h + int(rng.integers(0, 5)), w + int(rng.integers(0, 5))))
        kernel = sum(np.kron(a, b) for a, b in factors)
        want = direct_conv(kernel, bias, x)
        got, _ = layer.forward(x)
        gap = np.linalg.norm(got - want) / np.linalg.norm(want)
        worst = max(worst, gap)
        assert gap <= 1e-10, f"config {terms} kernel {(o, c, h, w)}: gap {gap:.1e}"
    return f"100 configs, max relative gap {worst:.1e} <= 1e-10"


# -- 5 ------------------------------------------------------------------------

def criterion_5():
    rng = np.random.default_rng(505)
    worst = {}
    shapes = (KronShape(4, 2, 3, 4), KronShape(2, 4, 6, 2))
    for outside in (False, True):
        name = "outside-sum" if outside else "inside-sum"
        for seed in range(3):
            cfg = KfcConfig(shapes, (2, 1), outside_sum=outside, activation=Activation.RELU)
            layer = kfc_random_init(cfg, seed)
            layer = layer.with_params({"bias": rng.standard_normal(layer.params["bias"].shape)})
            err = grad_check(layer, rng.standard_normal((12, 4)), seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    for seed in range(3):
        cfg = KConvConfig(((2, 3, 3, 1), (1, 2, 1, 3)), (4, 6, 3, 3))
        layer = KConvLayer.random(cfg, seed, Activation.RELU)
        layer = layer.with_params({"bias": rng.standard_normal(4)})
        err = grad_check(layer, rng.standard_normal((2, 6, 5, 6)), seed=seed)
        worst["kconv"] = max(worst.get("kconv", 0.0), err)
    for k, v in worst.items():
        assert v <= 1e-6, f"{k}: max relative error {v:.1e}"
    return ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (all <= 1e-6)"


# -- 6 ------------------------------------------------------------------------

def criterion_6():
    kfc = kfc_cost(KfcConfig.from_tuple(64, 4, 256, 25, 5))
    assert kfc.baseline_params == 1_638_400, kfc.baseline_params
    assert kfc.params == 82_420, kfc.params
    assert round(kfc.reduction_vs_baseline) == 20
    assert format_ratio(kfc.reduction_vs_baseline) == "19.9×"
    svd = svd_cost(256, 6400, 12)
    assert svd.params == 79_872, svd.params
    kc = kconv_cost(KConvConfig.from_tuple(1, 128, 24, 9, 1, (128, 48, 9, 9)))
    assert kc.params == 27_666, kc.params
    assert (kc.madds, kc.baseline_madds) == (57_600, 497_664), (kc.madds, kc.baseline_madds)
    return (
        f"baseline {kfc.baseline_params:,}, KFC {kfc.params:,} ({format_ratio(kfc.reduction_vs_baseline)}, "
        f"rounds to 20), SVD-12 {svd.params:,}, KConv term {kc.params:,} params, "
        f"{kc.madds:,} vs {kc.baseline_madds:,} madds"
    )


# -- 7 ------------------------------------------------------------------------

def synthetic_image(rng, rows=480, cols=320):
    """Smooth shading, a few hard-edged shapes and light noise, quantised to the 1/255 grid."""
    y, x = np.mgrid[0:rows, 0:cols] / np.array([rows, cols])[:, None, None]
    img = 0.35 + 0.25 * np.sin(3 * x + 2 * y) * np.cos(5 * y)
    img += 0.3 * ((x - 0.3) ** 2 + (y - 0.35) ** 2 < 0.03)
    img -= 0.25 * ((np.abs(x - 0.7) < 0.12) & (np.abs(y - 0.7) < 0.08))
    img += 0.04 * rng.standard_normal((rows, cols))
    return np.round(np.clip(img, 0, 1) * 255) / 255


def criterion_7(tmp):
    rng = np.random.default_rng(707)
    path = Path(tmp) / "figure.pgm"
    write_pgm(path, synthetic_image(rng))
    out = Path(tmp) / "figure"
    with redirect_stdout(_stdio.StringIO()):
        code = main(["image", str(path), "--block", "20x16", "--ranks", "1,2,5,10", "--out-dir", str(out)])
    assert code == 0, f"image subcommand exited {code}"
    with open(out / "report.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    by = {(r["method"], int(r["rank"])): r for r in rows}
    ranks = [1, 2, 5, 10]
    for r in ranks:
        assert int(by["kpsvd", r]["params"]) == int(by["svd", r]["params"]) == 800 * r, f"rank {r} parity"
        assert (out / f"kpsvd_rank{r}.pgm").exists() and (out / f"svd_rank{r}.pgm").exists()
    img = read_pgm(path)
    sig = np.linalg.svd(block_rearrangement(img, 24, 20, 20, 16), compute_uv=False)
    errs = [float(by["kpsvd", r]["frobenius_error"]) for r in ranks]
    assert all(b <= a for a, b in zip(errs, errs[1:])), f"errors not monotone: {errs}"
    worst = 0.0
    for r, e in zip(ranks, errs):
        tail = np.sqrt(np.sum(sig[r:] ** 2))
        worst = max(worst, abs(e - tail) / tail)
    assert worst <= 1e-8, f"kpsvd error off the sigma tail by {worst:.1e}"
    svd_errs = [float(by["svd", r]["frobenius_error"]) for r in ranks]
    cmp = ", ".join(f"r{r}: {a:.3g} vs {b:.3g}" for r, a, b in zip(ranks, errs, svd_errs))
    return f"parity 800r holds; kpsvd errors monotone, sigma-tail gap {worst:.1e}; kpsvd vs svd {cmp}"


# -- 8 ------------------------------------------------------------------------

def criterion_8():
    spec = parse_config("kconv (1,128,24,9,1) kernel=(128,48,9,9)").layers[0]
    two_stage, direct, cost, _ = bench_setup("kconv", spec, 16, 24, 0)
    t_two, _ = time_median(two_stage, 5)
    t_dir, _ = time_median(direct, 5)
    assert t_two < t_dir, f"two-stage {t_two * 1e3:.1f} ms is not faster than direct {t_dir * 1e3:.1f} ms"
    buf = _stdio.StringIO()
    with redirect_stdout(buf):
        code = main(["bench", "--mode", "kfc", "--batch", "64", "--repeats", "3"])
    text = buf.getvalue()
    assert code == 0
    assert "dense path is cheaper in madds" in text, text
    assert "A-first 2,080,000" in text and "dense 1,638,400" in text, text
    return (
        f"KConv two-stage {t_two * 1e3:.1f} ms < direct {t_dir * 1e3:.1f} ms "
        f"(model {format_ratio(cost.madd_reduction)}); KFC reported dense cheaper, 2,080,000 vs 1,638,400"
    )


# -- 9 ------------------------------------------------------------------------

def criterion_9():
    data = toy_data(512, 64, 4, seed=0)
    fc = ToyNet([FcLayer.random(32, 64, 1, Activation.RELU), FcLayer.random(4, 32, 2)], (64,))
    cfg = KfcConfig.from_tuple(4, 8, 8, 8, 8, activation=Activation.RELU)
    assert cfg.rank * 4 >= cfg.shapes[0].max_rank, "rank below 25% of full"
    kfc = ToyNet([kfc_random_init(cfg, 1), FcLayer.random(4, 32, 2)], (64,))
    a = train_toy(fc, data, epochs=50, lr=0.05, seed=0).accuracy
    b = train_toy(kfc, data, epochs=50, lr=0.05, seed=0).accuracy
    assert max(a) >= 0.95, f"fc baseline peaked at {max(a):.3f}"
    assert b[-1] >= a[-1] - 0.02, f"kfc {b[-1]:.3f} vs fc {a[-1]:.3f}"
    return f"fc {a[-1]:.3f}, kfc rank 8/32 {b[-1]:.3f} after 50 epochs"


# -- 10 -----------------------------------------------------------------------

def _random_config(rng):
    layers = []
    acts = [Activation.IDENTITY, Activation.RELU]

    def split(v):
        ds = [d for d in range(1, v + 1) if v % d == 0]
        d = int(rng.choice(ds))
        return d, v // d

    for _ in range(int(rng.integers(0, 6))):
        kind = int(rng.integers(0, 6))
        act = acts[int(rng.integers(0, 2))]
        if kind == 0:
            m, n = (int(v) for v in rng.integers(1, 49, 2))
            shapes, ranks = [], []
            for _ in range(int(rng.integers(1, 4))):
                m1, m2 = split(m)
                n1, n2 = split(n)
                shapes.append(KronShape(m1, m2, n1, n2))
                ranks.append(int(rng.integers(1, 13)))
            layers.append(KfcConfig(tuple(shapes), tuple(ranks), outside_sum=bool(rng.integers(0, 2)),
                                    share_bias=bool(rng.integers(0, 2)), activation=act))
        elif kind == 1:
            o, c = (int(v) for v in rng.integers(1, 17, 2))
            h, w = (int(v) for v in rng.integers(1, 6, 2))
            terms = tuple((split(o)[0], split(c)[0], int(rng.choice([1, h])), int(rng.choice([1, w])))
                          for _ in range(int(rng.integers(1, 5))))
            layers.append(KConvSpec(KConvConfig(terms, (o, c, h, w)), act))
        elif kind == 2:
            layers.append(FcSpec(*(int(v) for v in rng.integers(1, 5000, 2)), act))
        elif kind == 3:
            m, n = (int(v) for v in rng.integers(1, 100, 2))
            layers.append(SvdSpec(m, n, int(rng.integers(1, min(m, n) + 1)), act))
        elif kind == 4:
            layers.append(ConvSpec(tuple(int(v) for v in rng.integers(1, 65, 4)), act))
        else:
            layers.append(FlattenSpec())
    return ModelConfig(tuple(layers))


def criterion_10(tmp):
    rng = np.random.default_rng(1010)
    tmp = Path(tmp)
    tiny = np.nextafter(0.0, 1.0)
    special = np.array([0.0, -0.0, tiny, -tiny, 1e-310, -1e-310, np.finfo(float).max, np.pi])
    for t in (special, rng.standard_normal((3, 4, 5)), rng.standard_normal((1,))):
        write_kten(tmp / "t.kten", t)
        back = read_kten(tmp / "t.kten")
        assert back.shape == t.shape and back.tobytes() == t.tobytes(), "KTEN round trip not bit-exact"
    img = rng.integers(0, 256, (33, 17)) / 255.0
    for ascii in (False, True):
        write_pgm(tmp / "g.pgm", img, ascii=ascii)
        assert np.array_equal(read_pgm(tmp / "g.pgm"), img), "PGM round trip not exact"
    for i in range(1000):
        cfg = _random_config(rng)
        text = render_config(cfg)
        assert parse_config(text, check_extents=False) == cfg, f"config {i} did not survive:\n{text}"
    return "KTEN bit-exact incl. subnormals and signed zero; PGM exact on the 1/255 grid; 1000 configs round-trip"


# -- pytest entry points -------------------------------------------------------

def test_criterion_1():
    _run(1, criterion_1, 1.0)


def test_criterion_2():
    _run(2, criterion_2, 10.0)


def test_criterion_3():
    _run(3, criterion_3, 5.0)


def test_criterion_4():
    _run(4, criterion_4, 30.0)


def test_criterion_5():
    _run(5, criterion_5, 60.0)


def test_criterion_6():
    _run(6, criterion_6, 1.0)


def test_criterion_7(tmp_path):
    _run(7, lambda: criterion_7(tmp_path), 30.0)


def test_criterion_8():
    _run(8, criterion_8, 60.0)


def test_criterion_9():
    _run(9, criterion_9, 120.0)


def test_criterion_10(tmp_path):
    _run(10, lambda: criterion_10(tmp_path), 5.0)


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        for n, fn, limit in [
            (1, criterion_1, 1.0), (2, criterion_2, 10.0), (3, criterion_3, 5.0),
            (4, criterion_4, 30.0), (5, criterion_5, 60.0), (6, criterion_6, 1.0),
            (7, lambda: criterion_7(d), 30.0), (8, criterion_8, 60.0),
            (9, criterion_9, 120.0), (10, lambda: criterion_10(d), 5.0),
        ]:
            try:
                _run(n, fn, limit)
            except AssertionError:
                pass
            print(report_line(n), flush=True)
    raise SystemExit(0 if all(ok for ok, _, _ in RESULTS.values()) else 1)
