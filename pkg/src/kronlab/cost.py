"""Closed-form parameter and multiply-add counts.

All counts are exact Python integers; ratios are :class:`fractions.Fraction`.
Bias terms are left out unless ``include_bias=True``.
"""

import functools
import math
from dataclasses import dataclass
from fractions import Fraction

from .kron import KronShape

__all__ = [
    "CostReport",
    "fc_cost",
    "svd_cost",
    "kfc_cost",
    "conv_cost",
    "kconv_cost",
    "sqrt_heuristic_shapes",
    "format_ratio",
    "output_positions",
]


def format_ratio(r):
    """Reduction ratio for display: ``19.9×`` for one decimal, ``8.64×`` when two decimals are exact."""
    r = Fraction(r)
    if (r * 100).denominator == 1 and (r * 10).denominator != 1:
        return f"{float(r):.2f}×"
    return f"{float(r):.1f}×"


@dataclass(frozen=True)
class CostReport:
    """Counts for one layer and its dense baseline.

    ``madds`` is the per-sample multiply-add count of the evaluation order
    the layer uses; ``madds_alt`` is the other legitimate order where one
    exists (for KFC: applying ``B`` before ``A``), otherwise equal to
    ``madds``.  For convolutions "per sample" means per output position.
    """

    params: int
    madds: int
    baseline_params: int
    baseline_madds: int
    madds_alt: int = None

    def __post_init__(self):
        if self.madds_alt is None:
            object.__setattr__(self, "madds_alt", self.madds)

    def madds_per_batch(self, k):
        return self.madds * k

    @property
    def reduction_vs_baseline(self):
        return Fraction(self.baseline_params, self.params) if self.params else Fraction(0)

    @property
    def madd_reduction(self):
        return Fraction(self.baseline_madds, self.madds) if self.madds else Fraction(0)

    @property
    def best_madds(self):
        return min(self.madds, self.madds_alt)

    @property
    def dense_is_cheaper(self):
        """True when the dense baseline needs fewer multiply-adds than the layer's own order."""
        return self.baseline_madds < self.madds


def fc_cost(m, n, include_bias=False):
    return CostReport(m * n + (m if include_bias else 0), m * n, m * n + (m if include_bias else 0), m * n)


def svd_cost(m, n, rank, include_bias=False):
    bias = m if include_bias else 0
    return CostReport(rank * (m + n) + bias, rank * (m + n), m * n + bias, m * n)


def kfc_cost(cfg, include_bias=False):
    """Counts for a :class:`~kronlab.layers.KfcConfig`.

    Per term, applying ``A`` first costs ``m1*n + n2*m`` multiply-adds per
    sample; applying ``B`` first costs ``m2*n + n1*m``.
    """
    m, n = cfg.m, cfg.n
    params = madds = alt = 0
    for s in cfg.term_shapes:
        params += s.m1 * s.n1 + s.m2 * s.n2
        madds += s.m1 * n + s.n2 * m
        alt += s.m2 * n + s.n1 * m
    bias = cfg.n_bias_vectors * m if include_bias else 0
    return CostReport(params + bias, madds, m * n + (m if include_bias else 0), m * n, alt)


def conv_cost(kernel, include_bias=False):
    o, c, h, w = kernel
    p = o * c * h * w
    bias = o if include_bias else 0
    return CostReport(p + bias, p, p + bias, p)


def kconv_cost(cfg, include_bias=False):
    """Counts for a :class:`~kronlab.layers.KConvConfig`, madds per output position.

    Each term stores ``o1 c1 h1 w1 + o c h w / (o1 c1 h1 w1)`` scalars and
    costs ``(o c / o2) h1 w1 + (o c / c1) h2 w2`` multiply-adds per output
    position.  Use :meth:`CostReport.madds_per_batch` with
    ``k * (X - h + 1) * (Y - w + 1)`` for a whole batch.
    """
    o, c, h, w = cfg.kernel
    params = madds = 0
    for o1, c1, h1, w1 in cfg.terms:
        o2, c2, h2, w2 = o // o1, c // c1, h // h1, w // w1
        params += o1 * c1 * h1 * w1 + o2 * c2 * h2 * w2
        madds += (o * c // o2) * h1 * w1 + (o * c // c1) * h2 * w2
    bias = o if include_bias else 0
    full = o * c * h * w
    return CostReport(params + bias, madds, full + bias, full)


def output_positions(kernel, X, Y, k=1):
    _, _, h, w = kernel
    return k * (X - h + 1) * (Y - w + 1)


def _divisors(v):
    small = [d for d in range(1, math.isqrt(v) + 1) if v % d == 0]
    return sorted(set(small + [v // d for d in small]))


def _closer(p, q, target_sq):
    """Compare ``|p - sqrt(N)|`` and ``|q - sqrt(N)|`` exactly; negative when ``p`` is closer."""
    p_above = p * p >= target_sq
    q_above = q * q >= target_sq
    if p_above and q_above:
        return (p > q) - (p < q)
    if not p_above and not q_above:
        return (q > p) - (q < p)
    # opposite sides of the root: compare p + q with 2 sqrt(N)
    lhs, rhs = (p + q) ** 2, 4 * target_sq
    if lhs == rhs:
        return 0
    # the one above the root is closer when p + q < 2 sqrt(N)
    above_closer = lhs < rhs
    return -1 if above_closer == p_above else 1


def sqrt_heuristic_shapes(m, n):
    """Every ``KronShape`` tiling an ``m x n`` matrix, best compression first.

    Shapes are ranked by ``|m1*n1 - sqrt(m*n)|``; ties prefer larger
    ``m1*n1``, then larger ``m1``.  A prime extent only admits the trivial
    splits; padding it with a few dummy features (or output classes) to a
    composite size opens up more shapes.
    """
    if m < 1 or n < 1:
        raise ValueError("extents must be positive")
    target = m * n
    shapes = [KronShape(m1, m // m1, n1, n // n1) for m1 in _divisors(m) for n1 in _divisors(n)]

    def cmp(a, b):
        pa, pb = a.m1 * a.n1, b.m1 * b.n1
        c = _closer(pa, pb, target)
        if c:
            return c
        if pa != pb:
            return -1 if pa > pb else 1
        return (b.m1 > a.m1) - (b.m1 < a.m1)

    return sorted(shapes, key=functools.cmp_to_key(cmp))
