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
# # Kronecker convolutions
#
# An `o x c x h x w` kernel can be approximated by `sum_i A_i ⊗ B_i` with
# 4-D factors.  When one factor is `h x 1` and the other `1 x w` (or one of
# them is `1 x 1` spatially), the convolution runs as two cheaper
# convolutions in a row.

# %%
import time

import numpy as np

import kronlab as kl

rng = kl.make_rng(11)

# %% [markdown]
# ## Which spatial splits work
#
# The two-stage evaluation needs `h1*h2 == h` and `h1 + h2 - 1 == h`, so
# `h1` is 1 or `h`.

# %%
for h1 in (1, 3, 9):
    try:
        kl.KConvConfig.from_tuple(1, 2, 2, h1, 1, (4, 4, 9, 9))
        print(f"h1 = {h1}: ok")
    except kl.errors.ConstraintViolation as exc:
        print(f"h1 = {h1}: {exc}")

# %% [markdown]
# ## Two stages equal one convolution with the explicit kernel

# %%
cfg = kl.KConvConfig(((2, 3, 3, 1), (1, 2, 1, 3)), (4, 6, 3, 3))
layer = kl.KConvLayer.random(cfg, seed=0)
x = rng.standard_normal((2, 6, 8, 8))
two_stage, _ = layer.forward(x)
direct = kl.conv2d_forward(layer.explicit_kernel(), layer.bias, x)
print("max gap:", np.max(np.abs(two_stage - direct)))

# %% [markdown]
# ## A large layer
#
# One term with `A` of shape 128 x 24 x 9 x 1 and `B` of shape
# 1 x 2 x 1 x 9 replaces a 128 x 48 x 9 x 9 kernel.

# %%
big = kl.KConvConfig.from_tuple(1, 128, 24, 9, 1, (128, 48, 9, 9))
cost = kl.kconv_cost(big)
print(f"params {cost.params:,} vs {cost.baseline_params:,} ({kl.format_ratio(cost.reduction_vs_baseline)})")
print(f"madds per output position {cost.madds:,} vs {cost.baseline_madds:,} "
      f"({kl.format_ratio(cost.madd_reduction)})")

layer = kl.KConvLayer.random(big, seed=1)
kernel = layer.explicit_kernel()
x = rng.standard_normal((16, 48, 24, 24))


def best_of(fn, n=3):
    times = []
    for _ in range(n):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


t2 = best_of(lambda: layer.forward(x))
t1 = best_of(lambda: kl.conv2d_forward(kernel, layer.bias, x))
print(f"two-stage {t2 * 1e3:.1f} ms, direct {t1 * 1e3:.1f} ms")

# %% [markdown]
# The measured speedup is smaller than the multiply-add ratio.  The direct
# path runs a few large matrix products, while the two-stage path has more
# reshaping and smaller products.

# %% [markdown]
# ## Formulations for a flattened feature volume
#
# A fully-connected layer after a convolution sees a `c x h x w` volume.
# Different splits of its columns group channels, columns or rows.

# %%
for f in kl.formulation_shapes(32, 5, 5, 256, 16):
    print(f.name, f.shape.as_tuple(), "permutation", f.permutation)
