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
# # Compressing a fully-connected layer
#
# A KFC layer replaces `W x` by `sum_i (A_i ⊗ B_i) x`.  We look at the
# parameter and multiply-add cost of a 256 x 6400 layer (the head of a small
# image classifier), choose shapes, and initialise the factors from a dense
# matrix.

# %%
import numpy as np

import kronlab as kl

rng = kl.make_rng(3)

# %% [markdown]
# ## Counting

# %%
cfg = kl.KfcConfig.from_tuple(64, 4, 256, 25, 5)
kfc = kl.kfc_cost(cfg)
svd = kl.svd_cost(256, 6400, 12)
print(f"dense  {kfc.baseline_params:>9,} params")
print(f"kfc    {kfc.params:>9,} params ({kl.format_ratio(kfc.reduction_vs_baseline)})")
print(f"svd-12 {svd.params:>9,} params ({kl.format_ratio(svd.reduction_vs_baseline)})")

# %% [markdown]
# Fewer parameters do not always mean fewer multiply-adds.  Applying `A`
# first costs `m1*n + n2*m` per term; applying `B` first costs
# `m2*n + n1*m`.  For this shape the first order is more expensive than the
# dense layer, and only the second one saves work:

# %%
print(f"A first {kfc.madds:>9,}  B first {kfc.madds_alt:>9,}  dense {kfc.baseline_madds:>9,}")

# %% [markdown]
# ## Choosing a shape
#
# A common heuristic picks `m1*n1` close to `sqrt(m*n)`, which balances the
# sizes of the two factors.

# %%
for s in kl.sqrt_heuristic_shapes(256, 6400)[:5]:
    print(s.as_tuple(), "params per term", s.params, "max rank", s.max_rank)

# %% [markdown]
# ## Initialising from a dense matrix
#
# A trained weight matrix usually has some structure.  Here it is a sum of
# three Kronecker products plus noise, for a smaller 64 x 144 layer.

# %%
shape = kl.KronShape(8, 8, 12, 12)
W = sum(kl.kron_explicit(rng.standard_normal((8, 12)), rng.standard_normal((8, 12))) for _ in range(3))
W += 0.1 * rng.standard_normal(W.shape)
b = rng.standard_normal(64)

for r in (1, 3, 6):
    layer = kl.kfc_from_pretrained(W, b, kl.KfcConfig((shape,), (r,)))
    err = np.linalg.norm(W - kl.reconstruct(layer.ksum)) / np.linalg.norm(W)
    print(f"rank {r}: relative error {err:.4f}, {kl.kfc_cost(layer.config).params} params of {W.size}")

# %% [markdown]
# Several shapes can share the budget.  Each stage fits what the previous
# ones left over.

# %%
plan = [(kl.KronShape(8, 8, 12, 12), 2), (kl.KronShape(4, 16, 24, 6), 2)]
ksum, reports = kl.kpsvd_multi(W, plan)
for rep in reports:
    print(rep.shape.as_tuple(), "rank", rep.rank, "residual after stage", round(rep.residual_fro, 4))

# %% [markdown]
# ## Nonlinearity inside or outside the sum
#
# The layer can apply the activation once to the whole sum or to every term
# separately.  The second form is more expressive but has no matching
# decomposition of a dense matrix, so it starts from random factors.

# %%
x = rng.standard_normal((144, 4))
inside = kl.kfc_random_init(kl.KfcConfig((shape,), (3,), activation="relu"), seed=0)
outside = kl.kfc_random_init(kl.KfcConfig((shape,), (3,), outside_sum=True, activation="relu"), seed=0)
print("inside-sum output", inside.forward(x)[0].shape, "bias vectors", inside.config.n_bias_vectors)
print("outside-sum output", outside.forward(x)[0].shape, "bias vectors", outside.config.n_bias_vectors)
print("gradient check:", kl.grad_check(outside, x))
