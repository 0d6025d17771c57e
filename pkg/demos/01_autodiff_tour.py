# A short tour of the tape-based autodiff used by every model in nevae.
#
# Run with:  python3 demos/01_autodiff_tour.py

# %%
import numpy as np

from nevae import autodiff as ad
from nevae.autodiff import AdamState, Tape, Tensor, adam_step

# %% Gradients are recorded only inside a Tape and only for watched tensors.
x = Tensor([1.0, 2.0, 3.0])
with Tape() as tape:
    tape.watch(x)
    y = ad.sum_(ad.square(x))
    ad.backward(y)
print("d/dx sum(x^2) =", x.grad)  # [2. 4. 6.]

# %% `grad` is the functional shortcut.  Check it against central differences.
rng = np.random.default_rng(0)
W = rng.standard_normal((4, 3))


def f(v):
    return ad.sum_(ad.tanh(ad.matmul(v, W)))


v0 = rng.standard_normal((2, 4))
(g,) = ad.grad(f, v0)
h = 1e-6
fd = np.zeros_like(v0)
for idx in np.ndindex(v0.shape):
    e = np.zeros_like(v0)
    e[idx] = h
    fd[idx] = (f(Tensor(v0 + e)).item() - f(Tensor(v0 - e)).item()) / (2 * h)
print("max |tape - finite difference| =", np.abs(g - fd).max())

# %% Domain and finiteness errors surface immediately instead of as NaNs later.
try:
    ad.log(np.array([0.0]))
except ad.DomainError as exc:
    print("DomainError:", exc)

# %% Adam minimizing a quadratic bowl.
p = Tensor([3.0, -2.0])
state = AdamState(lr=0.1)
for _ in range(300):
    (gp,) = ad.grad(lambda t: ad.sum_(ad.square(t - np.array([1.0, 1.0]))), p.data)
    adam_step([p], [gp], state)
print("Adam after 300 steps:", p.data)
