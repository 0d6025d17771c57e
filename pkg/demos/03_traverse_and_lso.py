# Latent traversals written as PGM grids, then latent space optimization
# against a frozen decoder.
#
# Run with:  python3 demos/03_traverse_and_lso.py [out_dir]

# %%
import sys
from pathlib import Path

import numpy as np

from nevae import LossConfig, SyntheticSpec, TrainConfig, make_synthetic, train
from nevae.data import binarize
from nevae.lso import LsoConfig, lso_benchmark
from nevae.metrics import evaluate
from nevae.traverse import TraverseSpec, traverse_codes, write_traverse, zero_top_active

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

data = binarize(make_synthetic(SyntheticSpec(4, 784, 2000, noise_sigma=0.0, seed=0)))
model, _ = train(data, TrainConfig(epochs=10, n_z=16, hidden=(256, 256), loss=LossConfig("ne_se")))

# %% One image grid per traversal: 100 tiles in a 10x10 layout.
for dim in range(3):
    spec = TraverseSpec("single_dim", dim=dim)
    print(write_traverse(out, spec, traverse_codes(spec, model.n_z), model.decoder))

# %% A random ray of length 10 with the two most active dimensions switched off.
activity = evaluate(model, data.subset(slice(0, 1000))).activity
off = tuple(zero_top_active(activity, 2))
spec = TraverseSpec("random_direction", zero_dims=off, seed=7)
print("zeroed dims", off, "->", write_traverse(out, spec, traverse_codes(spec, model.n_z), model.decoder))

# %% LSO: fit codes for 10 images from two starting points and compare where they land.
targets = data.images[np.random.default_rng(0).choice(len(data), 10, replace=False)]
report = lso_benchmark(targets, {"ne_se": model}, LsoConfig(max_iters=3000),
                       thresholds=(0.01, 0.001), inits=("random_prior", "encoder_mean"))
for row in report.summary():
    print(row)
report.write_csv(out)
