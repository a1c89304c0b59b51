"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 stored in
row-major (C) order, so the last index varies fastest.  The helpers here add
the checks and index conventions the rest of the package relies on:

* :func:`vec` stacks columns (column-major), i.e. ``vec(M)[j*rows + i] == M[i, j]``.
* :func:`unfold` puts the chosen mode on the rows and the remaining modes, in
  ascending order with the last one fastest, on the columns.
"""

import numpy as np

from .errors import ExtentMismatch, InvalidPermutation, RankError

__all__ = [
    "as_tensor",
    "reshape",
    "permute",
    "inverse_permutation",
    "vec",
    "unvec",
    "unfold",
    "fold",
    "mode_product",
    "matmul",
    "frobenius",
]


def as_tensor(x, ndim=None):
    """Return ``x`` as a C-ordered float64 array, optionally checking its rank."""
    t = np.ascontiguousarray(x, dtype=np.float64)
    if t.ndim == 0:
        raise RankError("tensors need at least one dimension")
    if ndim is not None and t.ndim != ndim:
        raise RankError(f"expected a rank-{ndim} tensor, got rank {t.ndim}")
    return t


def reshape(t, new_dims):
    t = as_tensor(t)
    new_dims = tuple(int(d) for d in new_dims)
    if int(np.prod(new_dims, dtype=np.int64)) != t.size or any(d < 1 for d in new_dims):
        raise ExtentMismatch(f"cannot reshape {t.shape} to {new_dims}")
    return t.reshape(new_dims)


def _check_perm(perm, rank):
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(rank)):
        raise InvalidPermutation(f"{perm} is not a permutation of 0..{rank - 1}")
    return perm


def permute(t, perm):
    """Axis permutation: ``out[i_0, ..., i_{r-1}] == t[...]`` with ``out.shape[k] == t.shape[perm[k]]``."""
    t = as_tensor(t)
    perm = _check_perm(perm, t.ndim)
    return np.ascontiguousarray(np.transpose(t, perm))


def inverse_permutation(perm):
    perm = _check_perm(perm, len(perm))
    inv = [0] * len(perm)
    for k, p in enumerate(perm):
        inv[p] = k
    return tuple(inv)


def vec(m):
    """Column-stacking vectorisation of a matrix."""
    m = as_tensor(m, 2)
    return permute(m, (1, 0)).reshape(-1)


def unvec(v, rows, cols):
    """Inverse of :func:`vec`: rebuild a ``rows x cols`` matrix from its columns."""
    v = as_tensor(v, 1)
    if v.size != rows * cols:
        raise ExtentMismatch(f"vector of length {v.size} cannot hold a {rows}x{cols} matrix")
    return np.ascontiguousarray(v.reshape(cols, rows).T)


def unfold(t, mode):
    """Mode-``mode`` matricization of ``t``."""
    t = as_tensor(t)
    if not 0 <= mode < t.ndim:
        raise RankError(f"mode {mode} out of range for a rank-{t.ndim} tensor")
    rest = [k for k in range(t.ndim) if k != mode]
    return permute(t, [mode] + rest).reshape(t.shape[mode], -1)


def fold(m, mode, dims):
    """Inverse of :func:`unfold` for a tensor of extents ``dims``."""
    m = as_tensor(m, 2)
    dims = tuple(dims)
    rest = [k for k in range(len(dims)) if k != mode]
    if m.shape != (dims[mode], int(np.prod([dims[k] for k in rest], dtype=np.int64))):
        raise ExtentMismatch(f"{m.shape} is not a mode-{mode} unfolding of {dims}")
    t = m.reshape([dims[mode]] + [dims[k] for k in rest])
    return permute(t, inverse_permutation([mode] + rest))


def mode_product(t, m, mode):
    """Tensor-matrix product along ``mode``: ``fold(m @ unfold(t, mode))``."""
    t = as_tensor(t)
    m = as_tensor(m, 2)
    if not 0 <= mode < t.ndim:
        raise RankError(f"mode {mode} out of range for a rank-{t.ndim} tensor")
    if m.shape[1] != t.shape[mode]:
        raise ExtentMismatch(
            f"matrix with {m.shape[1]} columns cannot act on mode {mode} of extent {t.shape[mode]}"
        )
    out = np.tensordot(m, t, axes=([1], [mode]))
    # tensordot puts the new axis first; move it back into place
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def matmul(a, b):
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    if a.shape[1] != b.shape[0]:
        raise ExtentMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius(t):
    return float(np.sqrt(np.sum(np.square(as_tensor(t)))))
