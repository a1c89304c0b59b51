from decimal import Decimal, getcontext
from fractions import Fraction

from hypothesis import given, settings
from hypothesis import strategies as st

from kronlab.cost import (
    conv_cost,
    fc_cost,
    format_ratio,
    kconv_cost,
    kfc_cost,
    output_positions,
    sqrt_heuristic_shapes,
    svd_cost,
)
from kronlab.kron import KronShape
from kronlab.layers import KConvConfig, KConvLayer, KfcConfig, kfc_random_init, SvdFcLayer


def test_svhn_head_counts():
    base = fc_cost(256, 6400)
    assert base.params == 1_638_400
    kfc = kfc_cost(KfcConfig.from_tuple(64, 4, 256, 25, 5))
    assert kfc.params == 82_420
    assert kfc.reduction_vs_baseline == Fraction(1_638_400, 82_420)
    assert format_ratio(kfc.reduction_vs_baseline) == "19.9×"
    assert round(kfc.reduction_vs_baseline) == 20
    assert svd_cost(256, 6400, 12).params == 79_872


def test_kfc_degenerate_shapes():
    m, n, k = 6, 10, 3
    fc_like = kfc_cost(KfcConfig.from_tuple(m, 1, n, 1, 1))
    assert fc_like.params == m * n + 1
    assert fc_like.madds_per_batch(k) == m * n * k + m * k
    # the order that applies B first is exactly dense
    assert fc_like.madds_alt == m * n + n
    for r in range(1, 5):
        svd_like = kfc_cost(KfcConfig.from_tuple(1, m, n, 1, r))
        assert svd_like.params == r * (m + n) == svd_cost(m, n, r).params


def test_kfc_madds_both_orders():
    cost = kfc_cost(KfcConfig.from_tuple(64, 4, 256, 25, 5))
    assert cost.madds == 2_080_000
    assert cost.baseline_madds == 1_638_400
    assert cost.dense_is_cheaper
    assert cost.madds_alt == 5 * (4 * 6400 + 256 * 256)
    assert cost.best_madds == cost.madds_alt
    assert cost.madds_per_batch(64) == 64 * 2_080_000


def test_kconv_table4_layer2():
    cfg = KConvConfig.from_tuple(1, 128, 24, 9, 1, (128, 48, 9, 9))
    cost = kconv_cost(cfg)
    assert cost.params == 27_648 + 18 == 27_666
    assert cost.baseline_params == 497_664
    assert format_ratio(cost.reduction_vs_baseline) == "18.0×"
    assert cost.madds == 6144 * 9 + 256 * 9 == 57_600
    assert cost.baseline_madds == 497_664
    assert format_ratio(cost.madd_reduction) == "8.64×"
    assert cost.madd_reduction == Fraction(497_664, 57_600)
    pos = output_positions(cfg.kernel, 24, 24, 16)
    assert pos == 16 * 16 * 16
    assert cost.madds_per_batch(pos) == 57_600 * pos


def test_kconv_scalar_second_factor_is_dense():
    cfg = KConvConfig.from_tuple(1, 8, 6, 3, 3, (8, 6, 3, 3))
    cost = kconv_cost(cfg)
    assert cost.params == 8 * 6 * 9 + 1
    # one extra multiply per output channel for the scalar factor
    assert cost.madds == 8 * 6 * 9 + 8
    assert conv_cost((8, 6, 3, 3)).madds == 8 * 6 * 9


def test_counts_match_constructed_layers():
    cfg = KfcConfig((KronShape(4, 4, 8, 4), KronShape(8, 2, 2, 16)), (2, 3), outside_sum=True)
    layer = kfc_random_init(cfg)
    assert kfc_cost(cfg, include_bias=True).params == layer.n_params
    assert kfc_cost(cfg).params == layer.n_params - layer.biases.size
    kc = KConvConfig(((2, 3, 3, 1), (4, 1, 1, 3)), (4, 6, 3, 3))
    assert kconv_cost(kc, include_bias=True).params == KConvLayer.random(kc).n_params
    assert svd_cost(7, 9, 3, include_bias=True).params == SvdFcLayer.random(7, 9, 3).n_params
    assert isinstance(kfc_cost(cfg).params, int)


def brute_rank(m, n):
    getcontext().prec = 50
    root = Decimal(m * n).sqrt()
    shapes = [
        KronShape(m1, m // m1, n1, n // n1)
        for m1 in range(1, m + 1) if m % m1 == 0
        for n1 in range(1, n + 1) if n % n1 == 0
    ]
    return sorted(shapes, key=lambda s: (abs(Decimal(s.m1 * s.n1) - root), -(s.m1 * s.n1), -s.m1))


def test_sqrt_heuristic_examples():
    assert sqrt_heuristic_shapes(4, 4)[0].m1 * sqrt_heuristic_shapes(4, 4)[0].n1 == 4
    ranked = sqrt_heuristic_shapes(6, 1)
    assert [s.as_tuple() for s in ranked] == [(2, 3, 1, 1), (3, 2, 1, 1), (1, 6, 1, 1), (6, 1, 1, 1)]
    assert {s.m1 for s in sqrt_heuristic_shapes(7, 1)} == {1, 7}


@settings(max_examples=200, deadline=None)
@given(m=st.integers(1, 60), n=st.integers(1, 60))
def test_sqrt_heuristic_matches_brute_force(m, n):
    assert sqrt_heuristic_shapes(m, n) == brute_rank(m, n)
