"""Kronecker-product algebra and nearest-Kronecker-product approximation.

Index conventions
-----------------
``A (m1 x n1) ⊗ B (m2 x n2)`` has entry ``A[i1, j1] * B[i2, j2]`` at row
``i1*m2 + i2`` and column ``j1*n2 + j2``; the same "outer factor owns the
high-order digit" rule is used for tensors of any rank.

The rearrangement ``R`` maps an ``(m1*m2) x (n1*n2)`` matrix to an
``(m1*n1) x (m2*n2)`` one.  Row ``j1*m1 + i1`` of ``R(W)`` is the column-major
vectorisation of the ``(i1, j1)`` block of ``W``, so that
``R(A ⊗ B) == vec(A) vec(B)^T`` with the column-stacking ``vec``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConvergenceFailure, ExtentMismatch, RankError
from .tensor import as_tensor, mode_product, unvec, vec

__all__ = [
    "KronShape",
    "KronTerm",
    "KronSum",
    "ApproxReport",
    "kron_explicit",
    "kron_tensor_explicit",
    "apply_kron",
    "apply_kron_batch",
    "rearrange",
    "rearrange_inv",
    "svd",
    "kpsvd",
    "kpsvd_multi",
    "reconstruct",
]


@dataclass(frozen=True)
class KronShape:
    """Factor extents: ``A`` is ``m1 x n1`` and ``B`` is ``m2 x n2``."""

    m1: int
    m2: int
    n1: int
    n2: int

    def __post_init__(self):
        for name in ("m1", "m2", "n1", "n2"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ExtentMismatch(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def m(self):
        return self.m1 * self.m2

    @property
    def n(self):
        return self.n1 * self.n2

    @property
    def a_dims(self):
        return (self.m1, self.n1)

    @property
    def b_dims(self):
        return (self.m2, self.n2)

    @property
    def params(self):
        """Scalars stored by one ``(A, B)`` pair."""
        return self.m1 * self.n1 + self.m2 * self.n2

    @property
    def max_rank(self):
        return min(self.m1 * self.n1, self.m2 * self.n2)

    def divides(self, m, n):
        return self.m == m and self.n == n

    def as_tuple(self):
        return (self.m1, self.m2, self.n1, self.n2)


@dataclass(frozen=True)
class KronTerm:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", as_tensor(self.a, 2))
        object.__setattr__(self, "b", as_tensor(self.b, 2))

    @property
    def shape(self):
        return KronShape(self.a.shape[0], self.b.shape[0], self.a.shape[1], self.b.shape[1])


@dataclass(frozen=True)
class KronSum:
    """An ordered sum of Kronecker terms approximating an ``m x n`` matrix."""

    terms: tuple
    m: int
    n: int

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if not t.shape.divides(self.m, self.n):
                raise ExtentMismatch(
                    f"term of shape {t.shape.as_tuple()} does not tile a {self.m}x{self.n} matrix"
                )

    @property
    def rank(self):
        return len(self.terms)

    @property
    def params(self):
        return sum(t.shape.params for t in self.terms)

    def __add__(self, other):
        if (self.m, self.n) != (other.m, other.n):
            raise ExtentMismatch("cannot concatenate sums of different target extents")
        return KronSum(self.terms + other.terms, self.m, self.n)


@dataclass
class ApproxReport:
    """Outcome of fitting one shape with :func:`kpsvd`.

    ``singular_values`` holds the full descending spectrum of ``R(W)``;
    ``residual_fro`` is the Frobenius norm of ``W`` minus the truncated sum,
    measured directly rather than inferred from the spectrum.
    """

    shape: KronShape
    rank: int
    singular_values: np.ndarray
    residual_fro: float
    params_used: int
    input_fro: float = field(default=0.0)

    def tail_residuals(self):
        """Optimal residual norm for every rank ``0..len(singular_values)``."""
        s2 = np.square(self.singular_values)
        tails = np.concatenate([np.cumsum(s2[::-1])[::-1], [0.0]])
        return np.sqrt(np.maximum(tails, 0.0))


def kron_explicit(a, b):
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    m1, n1 = a.shape
    m2, n2 = b.shape
    out = a[:, None, :, None] * b[None, :, None, :]
    return out.reshape(m1 * m2, n1 * n2)


def kron_tensor_explicit(a, b):
    """Tensor Kronecker product: mode ``t`` has extent ``p_t * q_t`` and index ``i = j*q_t + l``."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != b.ndim:
        raise RankError(f"Kronecker factors need equal ranks, got {a.ndim} and {b.ndim}")
    r = a.ndim
    a_idx = [slice(None), None] * r
    b_idx = [None, slice(None)] * r
    out = a[tuple(a_idx)] * b[tuple(b_idx)]
    return out.reshape([p * q for p, q in zip(a.shape, b.shape)])


def apply_kron(term, x):
    """``(A ⊗ B) x`` evaluated as ``vec(B X A^T)`` without forming ``A ⊗ B``."""
    x = as_tensor(x, 1)
    s = term.shape
    if x.size != s.n:
        raise ExtentMismatch(f"input of length {x.size} does not match n = {s.n}")
    X = unvec(x, s.n2, s.n1)
    return vec(term.b @ X @ term.a.T)


def apply_kron_batch(ksum, xbatch):
    """Apply a sum of Kronecker terms to the columns of an ``n x k`` batch.

    Each term reshapes the batch to an ``n1 x n2 x k`` tensor (the column
    layout of ``X^T`` per sample), multiplies mode 0 by ``A`` and mode 1 by
    ``B``, and reshapes the ``m1 x m2 x k`` result back to ``m x k``.
    """
    xbatch = as_tensor(xbatch, 2)
    if xbatch.shape[0] != ksum.n:
        raise ExtentMismatch(f"batch has {xbatch.shape[0]} rows, layer expects {ksum.n}")
    k = xbatch.shape[1]
    out = np.zeros((ksum.m, k))
    for term in ksum.terms:
        s = term.shape
        t = xbatch.reshape(s.n1, s.n2, k)
        t = mode_product(t, term.a, 0)
        t = mode_product(t, term.b, 1)
        out += t.reshape(ksum.m, k)
    return out


def _check_tiles(w, shape):
    if w.shape != (shape.m, shape.n):
        raise ExtentMismatch(
            f"shape {shape.as_tuple()} does not tile a {w.shape[0]}x{w.shape[1]} matrix"
        )


def rearrange(w, shape):
    w = as_tensor(w, 2)
    _check_tiles(w, shape)
    s = shape
    w4 = w.reshape(s.m1, s.m2, s.n1, s.n2)  # [i1, i2, j1, j2]
    return np.ascontiguousarray(w4.transpose(2, 0, 3, 1)).reshape(s.n1 * s.m1, s.n2 * s.m2)


def rearrange_inv(rw, shape):
    rw = as_tensor(rw, 2)
    s = shape
    if rw.shape != (s.m1 * s.n1, s.m2 * s.n2):
        raise ExtentMismatch(f"{rw.shape} is not a rearranged matrix for shape {s.as_tuple()}")
    r4 = rw.reshape(s.n1, s.m1, s.n2, s.m2)  # [j1, i1, j2, i2]
    return np.ascontiguousarray(r4.transpose(1, 3, 0, 2)).reshape(s.m, s.n)


# -- SVD ---------------------------------------------------------------------

MAX_SWEEPS = 100


def _round_robin_layouts(n):
    """Row layouts for one cyclic sweep of ``n - 1`` rounds (``n`` even).

    In each layout the first half is paired element-wise with the second half,
    so a round touches contiguous slices only.
    """
    players = list(range(n))
    half = n // 2
    layouts = []
    for _ in range(n - 1):
        layouts.append(players[:half] + players[half:][::-1])
        players = [players[0], players[-1]] + players[1:-1]
    return layouts


def _jacobi_tall(a, max_sweeps):
    """One-sided Jacobi on a matrix with at least as many rows as columns."""
    m, n = a.shape
    npad = n + (n % 2)
    half = npad // 2
    # rows hold [working column of A | matching column of V]
    work = np.zeros((npad, m + npad))
    work[:n, :m] = a.T
    work[:, m:] = np.eye(npad)
    tol = np.finfo(np.float64).eps * max(m, 1)
    layouts = _round_robin_layouts(npad) if npad > 1 else []
    # permutations taking the rows from one layout to the next, wrapping around
    steps = []
    for i, lay in enumerate(layouts):
        nxt = layouts[(i + 1) % len(layouts)]
        where = {player: row for row, player in enumerate(lay)}
        steps.append(np.array([where[player] for player in nxt]))
    if layouts:
        work = work[np.array(layouts[0])]
    for sweep in range(max_sweeps):
        off = 0.0
        for step in steps:
            gp, gq = work[:half, :m], work[half:, :m]
            alpha = np.einsum("ij,ij->i", gp, gp)
            beta = np.einsum("ij,ij->i", gq, gq)
            gamma = np.einsum("ij,ij->i", gp, gq)
            scale = np.sqrt(alpha * beta)
            ratio = np.divide(np.abs(gamma), scale, out=np.zeros_like(gamma), where=scale > 0.0)
            off = max(off, float(ratio.max(initial=0.0)))
            rot = ratio > tol
            if rot.any():
                c = np.ones(half)
                s = np.zeros(half)
                zeta = (beta[rot] - alpha[rot]) / (2.0 * gamma[rot])
                t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c[rot] = 1.0 / np.sqrt(1.0 + t * t)
                s[rot] = c[rot] * t
                xp = work[:half].copy()
                xq = work[half:]
                work[:half] = c[:, None] * xp - s[:, None] * xq
                work[half:] = s[:, None] * xp + c[:, None] * xq
            work = work[step]
        if off <= tol:
            break
    else:
        raise ConvergenceFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    if layouts:
        # undo the layout so row i is working column i again
        work = work[np.argsort(np.array(layouts[0]))]
    g = work[:n, :m]
    v = work[:n, m:m + n]
    sigma = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = np.zeros((m, n))
    floor = sigma[0] * np.finfo(np.float64).eps * max(m, n) if n else 0.0
    good = sigma > floor if floor > 0 else np.zeros(n, dtype=bool)
    u[:, good] = (g[order[good]] / sigma[good, None]).T
    if not good.all():
        u[:, ~good] = _complete_basis(u[:, good], int((~good).sum()))
    vmat = np.ascontiguousarray(v[order].T)
    return u, sigma, vmat


def _complete_basis(q, count):
    """``count`` orthonormal columns orthogonal to the orthonormal columns of ``q``."""
    m, g = q.shape
    full, _ = np.linalg.qr(np.hstack([q, np.eye(m)]), mode="reduced")
    return full[:, g:g + count]


def svd(m, max_sweeps=MAX_SWEEPS):
    """Thin SVD by one-sided Jacobi rotations.

    The matrix (transposed first if it is wide) is reduced with a
    column-pivoted QR and the rotations run on ``R^T``, which needs far fewer
    sweeps than working on the raw columns.

    Returns ``(U, S, V)`` with ``m == U @ diag(S) @ V.T``; ``S`` is descending
    and ``U``, ``V`` have ``min(rows, cols)`` orthonormal columns.  Raises
    :class:`ConvergenceFailure` after ``max_sweeps`` sweeps.
    """
    m = as_tensor(m, 2)
    if not np.all(np.isfinite(m)):
        raise ConvergenceFailure("SVD input contains non-finite entries")
    wide = m.shape[0] < m.shape[1]
    tall = np.ascontiguousarray(m.T) if wide else m
    q, r, perm = scipy.linalg.qr(tall, mode="economic", pivoting=True)
    # R^T = W S Z^T  =>  tall[:, perm] = (Q Z) S W^T
    w, s, z = _jacobi_tall(np.ascontiguousarray(r.T), max_sweeps)
    u = q @ z
    v = np.empty_like(w)
    v[perm] = w
    return (v, s, u) if wide else (u, s, v)


# -- nearest Kronecker product ------------------------------------------------

def kpsvd(w, shape, r):
    """Best Frobenius-norm approximation of ``w`` by ``r`` Kronecker terms of one shape.

    Parameters
    ----------
    w : ndarray, shape (m, n)
    shape : KronShape
        Must satisfy ``shape.m == m`` and ``shape.n == n``.
    r : int
        Number of terms, ``1 <= r <= shape.max_rank``.

    Returns
    -------
    KronSum, ApproxReport
    """
    w = as_tensor(w, 2)
    _check_tiles(w, shape)
    if not 1 <= r <= shape.max_rank:
        raise ExtentMismatch(f"rank {r} outside 1..{shape.max_rank} for shape {shape.as_tuple()}")
    u, s, v = svd(rearrange(w, shape))
    terms = []
    for i in range(r):
        root = np.sqrt(s[i])
        a = unvec(root * u[:, i], shape.m1, shape.n1)
        b = unvec(root * v[:, i], shape.m2, shape.n2)
        terms.append(KronTerm(a, b))
    ksum = KronSum(terms, shape.m, shape.n)
    resid = float(np.linalg.norm(w - reconstruct(ksum)))
    report = ApproxReport(
        shape=shape,
        rank=r,
        singular_values=s,
        residual_fro=resid,
        params_used=r * shape.params,
        input_fro=float(np.linalg.norm(w)),
    )
    return ksum, report


def kpsvd_multi(w, plan):
    """Greedy multi-shape fit: each ``(shape, rank)`` stage fits the residual left by the previous ones."""
    w = as_tensor(w, 2)
    m, n = w.shape
    total = KronSum((), m, n)
    reports = []
    residual = w
    for shape, r in plan:
        ksum, report = kpsvd(residual, shape, r)
        residual = residual - reconstruct(ksum)
        report.residual_fro = float(np.linalg.norm(residual))
        report.input_fro = float(np.linalg.norm(w))
        total = total + ksum
        reports.append(report)
    return total, reports


def reconstruct(ksum):
    out = np.zeros((ksum.m, ksum.n))
    for t in ksum.terms:
        out += kron_explicit(t.a, t.b)
    return out
