"""Training objectives: ELBO, beta-weighted ELBO, KL annealing, re-encoding losses.

Reduction convention everywhere: sum over latent dims / pixels within a
sample, mean over the batch (nats per image).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import VAE, GaussianCode, decode, encode, reencode

VARIANTS = ("vanilla", "beta", "ne_se", "ne_lp")
VAR_FLOOR = 1e-8
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossConfig:
    variant: str = "vanilla"
    beta: float = 1.0
    cap_c: float = 0.0
    # (start_weight, end_weight, epochs); None disables annealing
    anneal: tuple[float, float, int] | None = (0.1, 1.0, 10)
    ne_weight: float = 1.0
    binarize_reencode: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "beta" and not self.beta > 0:
            raise ValueError("beta must be positive")
        if math.isnan(self.cap_c):
            raise ValueError("cap_c must not be NaN")
        if self.anneal is not None:
            start, end, epochs = self.anneal
            if not (0 < start <= end <= 1):
                raise ValueError(f"anneal weights must satisfy 0 < start <= end <= 1, got {self.anneal}")
            if epochs < 0:
                raise ValueError("anneal epochs must be >= 0")


@dataclass
class LossReport:
    """Batch-mean loss terms.  ``ne_term`` is already weighted and may be
    negative for ne_lp with a negative cap."""

    recon_nll: float
    kl: float
    ne_term: float
    kl_weight_applied: float
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)
    code: GaussianCode | None = field(default=None, repr=False, compare=False)
    code_hat: GaussianCode | None = field(default=None, repr=False, compare=False)


def kl_diag_gauss_to_std(mu, log_var) -> Tensor:
    """Per-dimension KL(N(mu, exp(log_var)) || N(0, 1)), shape [batch, n_z]."""
    mu, log_var = ad.as_tensor(mu), ad.as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ad.ShapeError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    return 0.5 * (ad.square(mu) + ad.exp(log_var) - 1.0 - log_var)


def bernoulli_nll(logits, x) -> Tensor:
    """Per-pixel -log Bernoulli(x; sigmoid(logits)) = softplus(l) - x*l."""
    logits, x = ad.as_tensor(logits), ad.as_tensor(x)
    return ad.softplus(logits) - x * logits


def ne_se(z, z_hat) -> Tensor:
    """Squared re-encoding error per sample, shape [batch]."""
    z, z_hat = ad.as_tensor(z), ad.as_tensor(z_hat)
    if z.shape != z_hat.shape:
        raise ad.ShapeError(f"z {z.shape} and z_hat {z_hat.shape} differ")
    return ad.sum_(ad.square(z - z_hat), axis=1)


def gaussian_nll(z, mu, log_var) -> Tensor:
    """Per-dimension -log N(z; mu, max(exp(log_var), VAR_FLOOR))."""
    log_var = ad.clip_min(ad.as_tensor(log_var), math.log(VAR_FLOOR))
    diff = ad.as_tensor(z) - mu
    return HALF_LOG_2PI + 0.5 * log_var + ad.square(diff) * (0.5 * ad.exp(ad.neg(log_var)))


def ne_lp(z, mu_hat, log_var_hat, c: float) -> Tensor:
    """Capped Gaussian NLL of z under the re-encoded posterior, shape [batch].

    A dimension contributes its NLL only when the NLL is >= c; the mask is
    piecewise constant so it carries no gradient.
    """
    z, mu_hat, log_var_hat = (ad.as_tensor(t) for t in (z, mu_hat, log_var_hat))
    if not (z.shape == mu_hat.shape == log_var_hat.shape):
        raise ad.ShapeError(f"shapes differ: {z.shape}, {mu_hat.shape}, {log_var_hat.shape}")
    nll = gaussian_nll(z, mu_hat, log_var_hat)
    keep = (nll.data >= c).astype(np.float64)
    return ad.sum_(nll * keep, axis=1)


def anneal_weight(epoch: float, schedule: tuple[float, float, int] | None = (0.1, 1.0, 10)) -> float:
    """Linear ramp from start to end over the first ``epochs`` epochs, then flat."""
    if schedule is None:
        return 1.0
    start, end, epochs = schedule
    if epochs <= 0 or epoch >= epochs:
        return float(end)
    return float(start + (end - start) * (max(epoch, 0) / epochs))


def kl_weight(config: LossConfig, epoch: float) -> float:
    if config.variant != "beta":
        return anneal_weight(epoch, config.anneal)
    if config.anneal is None:
        return float(config.beta)
    start, end, epochs = config.anneal
    # beta > 1 ramps toward beta itself; beta <= 1 stops once the ramp reaches it
    ramp = anneal_weight(epoch, (start, max(end, config.beta), epochs) if config.beta > end
                         else config.anneal)
    return float(min(ramp, config.beta))


def total_loss(batch, model: VAE, config: LossConfig, rng: np.random.Generator,
               epoch: float = 0, kl_weight_override: float | None = None) -> LossReport:
    """-ELBO (with KL weight) plus the configured re-encoding term.

    ``report.objective`` is the scalar tensor to differentiate.
    """
    x = ad.as_tensor(batch)
    code = encode(x, model.encoder, rng)
    recon = decode(code.z, model.decoder, model.output)
    recon_nll = ad.mean(ad.sum_(bernoulli_nll(recon.logits, x), axis=1))
    kl = ad.mean(ad.sum_(kl_diag_gauss_to_std(code.mu, code.log_var), axis=1))
    w = kl_weight(config, epoch) if kl_weight_override is None else float(kl_weight_override)

    code_hat = None
    ne_term = ad.as_tensor(0.0)
    if config.variant in ("ne_se", "ne_lp"):
        code_hat = reencode(recon, model.encoder, rng, binarize=config.binarize_reencode)
        if config.variant == "ne_se":
            per_sample = ne_se(code.z, code_hat.z)
        else:
            per_sample = ne_lp(code.z, code_hat.mu, code_hat.log_var, config.cap_c)
        ne_term = ad.mean(per_sample)
        if config.ne_weight != 1.0:
            ne_term = ne_term * config.ne_weight

    objective = (recon_nll + w * kl) + ne_term
    return LossReport(
        recon_nll=recon_nll.item(),
        kl=kl.item(),
        ne_term=ne_term.item(),
        kl_weight_applied=w,
        total=objective.item(),
        objective=objective,
        code=code,
        code_hat=code_hat,
    )
