# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Kronecker products and the nearest Kronecker sum
#
# A Kronecker product `A ⊗ B` of an `m1 x n1` and an `m2 x n2` matrix is an
# `m1*m2 x n1*n2` matrix built from `m1*n1 + m2*n2` numbers.  This notebook
# walks through the three facts the rest of the package is built on:
#
# 1. `(A ⊗ B) x` can be computed without ever forming `A ⊗ B`.
# 2. Rearranging the blocks of `W` turns `A ⊗ B` into the rank-one matrix
#    `vec(A) vec(B)^T`.
# 3. So the best `r`-term Kronecker sum is a truncated SVD of the rearranged
#    matrix, and its error is the tail of the singular values.

# %%
import numpy as np

import kronlab as kl

rng = kl.make_rng(0)

# %% [markdown]
# ## Applying a Kronecker product implicitly

# %%
a = rng.standard_normal((3, 4))
b = rng.standard_normal((5, 2))
x = rng.standard_normal(4 * 2)

explicit = kl.kron_explicit(a, b) @ x
implicit = kl.apply_kron(kl.KronTerm(a, b), x)
print("max gap:", np.max(np.abs(explicit - implicit)))

# A batch works the same way: each column of the n x k batch is handled at once
# through two mode products on an n1 x n2 x k tensor.
batch = rng.standard_normal((8, 6))
ksum = kl.KronSum([kl.KronTerm(a, b)], 15, 8)
print("batch gap:", np.max(np.abs(kl.apply_kron_batch(ksum, batch) - kl.kron_explicit(a, b) @ batch)))

# %% [markdown]
# ## The rearrangement
#
# `R(W)` has one row per `m2 x n2` block of `W` (blocks taken column by
# column), holding that block's column-major vectorisation.

# %%
shape = kl.KronShape(m1=3, m2=5, n1=4, n2=2)
rw = kl.rearrange(kl.kron_explicit(a, b), shape)
print("R(A ⊗ B) has shape", rw.shape, "and numerical rank", np.linalg.matrix_rank(rw))
print("equals vec(A) vec(B)^T:", np.allclose(rw, np.outer(kl.vec(a), kl.vec(b))))

# %% [markdown]
# ## KPSVD
#
# Build a matrix that is a sum of two Kronecker products plus a little
# noise, then recover it term by term.

# %%
w = sum(kl.kron_explicit(rng.standard_normal((3, 4)), rng.standard_normal((5, 2))) for _ in range(2))
w += 0.01 * rng.standard_normal(w.shape)

for r in (1, 2, 3):
    approx, report = kl.kpsvd(w, shape, r)
    print(
        f"rank {r}: residual {report.residual_fro:.4f}, "
        f"sigma tail {report.tail_residuals()[r]:.4f}, params {report.params_used} of {w.size}"
    )

# %% [markdown]
# The residual is measured directly, yet it matches the singular-value
# tail, so no other choice of factors with this shape does better.  With
# the shape `(m, 1, 1, n)` every term is an outer product and KPSVD is an
# ordinary truncated SVD:

# %%
outer = kl.KronShape(w.shape[0], 1, 1, w.shape[1])
s = np.linalg.svd(w, compute_uv=False)
for r in (1, 4):
    _, rep = kl.kpsvd(w, outer, r)
    print(f"rank {r}: kpsvd {rep.residual_fro:.6f}  truncated svd {np.sqrt(np.sum(s[r:] ** 2)):.6f}")
