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
# # Training small networks
#
# Four Gaussian clusters in 64 dimensions, unit variance within a class,
# class means 4 apart.  We train a dense hidden layer, a low-rank one and a
# KFC one with the same seed, and compare accuracy against parameters.

# %%
import kronlab as kl

X, y = kl.toy_data(512, 64, 4, seed=0)

# %%
hidden = {
    "fc": kl.FcLayer.random(32, 64, 1, "relu"),
    "svd rank 8": kl.SvdFcLayer.random(32, 64, 8, 1, "relu"),
    "kfc (4,8,8,8,8)": kl.kfc_random_init(kl.KfcConfig.from_tuple(4, 8, 8, 8, 8, activation="relu"), 1),
    "kfc (4,8,8,8,2)": kl.kfc_random_init(kl.KfcConfig.from_tuple(4, 8, 8, 8, 2, activation="relu"), 1),
}

for name, layer in hidden.items():
    net = kl.ToyNet([layer, kl.FcLayer.random(4, 32, 2)], (64,))
    res = kl.train_toy(net, (X, y), epochs=50, lr=0.05, seed=0)
    curve = " ".join(f"{a:.2f}" for a in res.accuracy[::10])
    print(f"{name:>16}: {layer.n_params:5d} params, accuracy every 10 epochs {curve}")

# %% [markdown]
# Gradients of every layer kind can be checked against central differences.

# %%
net = kl.ToyNet([hidden["kfc (4,8,8,8,8)"], kl.FcLayer.random(4, 32, 2)], (64,))
print("max relative error:", kl.grad_check(net, X[:, :8]))
