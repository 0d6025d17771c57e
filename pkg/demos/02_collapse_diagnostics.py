# Posterior collapse on a synthetic 4-factor manifold: vanilla VAE vs the
# re-encoding (se) objective.  Takes about a minute on one core.
#
# Run with:  python3 demos/02_collapse_diagnostics.py

# %%
import numpy as np

from nevae import LossConfig, SyntheticSpec, TrainConfig, evaluate, make_synthetic, train
from nevae.data import binarize
from nevae.metrics import EvalConfig

# %% 2000 binary 28x28 images driven by 4 latent factors.
data = binarize(make_synthetic(SyntheticSpec(intrinsic_dim=4, ambient_dim=784, n_samples=2000,
                                             noise_sigma=0.0, seed=0)))
print(len(data), "images,", data.pixels, "pixels, mean intensity", round(data.images.mean(), 3))

# %% Same architecture, seed and schedule; only the objective differs.
common = dict(epochs=20, n_z=32, hidden=(256, 256), seed=0)
models = {}
for variant in ("vanilla", "ne_se"):
    models[variant], log = train(data, TrainConfig(loss=LossConfig(variant), **common))
    curve = log.reencode_curve
    print(f"{variant:8s} re-encoding SE: epoch 1 {curve[0][1]:.2f} -> epoch 20 {curve[-1][1]:.2f}")

# %% Active units, KL and mutual information on the first 1000 images.
for variant, model in models.items():
    rep = evaluate(model, data.subset(slice(0, 1000)), EvalConfig(seed=0))
    print(f"{variant:8s} -ELBO {rep.neg_elbo:7.2f}  KL {rep.kl:6.2f}  MI {rep.mi:5.2f}  AU {rep.au_count}/32")

# %% Per-dimension activity, sorted.  Collapsed dimensions sit near zero.
for variant, model in models.items():
    act = np.sort(evaluate(model, data.subset(slice(0, 1000))).activity)[::-1]
    print(variant, np.array2string(act, precision=2, max_line_width=120))
