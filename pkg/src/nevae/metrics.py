"""Posterior-collapse diagnostics over a dataset.

All estimators run on frozen parameters without a tape.  Batched passes
accumulate per-sample values and reduce once at the end, so results do not
depend on the batch size beyond float reassociation inside BLAS.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .losses import bernoulli_nll, kl_diag_gauss_to_std, ne_se
from .models import VAE, decode, encode, reencode

AU_THRESHOLD = 0.01
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class EvalConfig:
    seed: int = 1234
    batch_size: int = 500
    mi_samples: int = 1
    mi_max_items: int = 2048
    au_threshold: float = AU_THRESHOLD


@dataclass
class DiagnosticsReport:
    neg_elbo: float
    kl: float
    mi: float
    au_count: int
    activity: list[float]
    mean_reencode_se: float
    au_threshold: float = AU_THRESHOLD

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


CSV_FIELDS = ("run_id", "epoch", "neg_elbo", "kl", "mi", "au", "mean_reencode_se")


def fmt(x: float) -> str:
    return f"{x:.6g}"


def append_csv(path, report: DiagnosticsReport, run_id: str, epoch: int) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_FIELDS)
        w.writerow([run_id, epoch, fmt(report.neg_elbo), fmt(report.kl), fmt(report.mi),
                    report.au_count, fmt(report.mean_reencode_se)])


def write_activity_csv(path, report: DiagnosticsReport, run_id: str, epoch: int) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(("run_id", "epoch", "dim", "activity", "active"))
        for j, a in enumerate(report.activity):
            w.writerow([run_id, epoch, j, fmt(a), int(a > report.au_threshold)])


def activity(mus) -> np.ndarray:
    """Per-dimension variance (divisor N-1) of posterior means across the data."""
    mus = np.asarray(mus, dtype=np.float64)
    if mus.ndim != 2 or mus.shape[0] < 2:
        raise ValueError(f"activity needs at least 2 rows, got shape {mus.shape}")
    return mus.var(axis=0, ddof=1)


def active_units(act, threshold: float = AU_THRESHOLD) -> int:
    return int(np.count_nonzero(np.asarray(act) > threshold))


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def posterior_params(model: VAE, images: np.ndarray, batch_size: int = 500):
    """Posterior mean and log-variance for every row (no sampling)."""
    mus, lvs = [], []
    rng = np.random.default_rng(0)
    for sl in _batches(len(images), batch_size):
        code = encode(images[sl], model.encoder, rng)
        mus.append(code.mu.data)
        lvs.append(code.log_var.data)
    return np.concatenate(mus), np.concatenate(lvs)


def _log_normal(z: np.ndarray, mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """log N(z_s; mu_j, diag exp(log_var_j)) for every pair -> [S, J]."""
    inv_var = np.exp(-log_var)                                  # [J, d]
    quad = ((z[:, None, :] - mu[None, :, :]) ** 2 * inv_var[None]).sum(-1)
    return -0.5 * (quad + log_var.sum(-1)[None, :] + mu.shape[1] * LOG_2PI)


def mi_from_params(mu: np.ndarray, log_var: np.ndarray, m_samples: int,
                   rng: np.random.Generator, chunk: int = 256) -> float:
    """Mutual information I_q = E_x KL(q(z|x)||p) - KL(q(z)||p).

    The first term is closed form.  The aggregated-posterior KL is estimated
    from draws z ~ q(z|x_i) with log q(z) a log-mean-exp over all components,
    using the closed-form per-datum KL as a control variate:
        KL(q(z)||p) ~= mean[KL_i + log q(z) - log q(z|x_i)]
    which has the same expectation as mean[log q(z) - log p(z)] but near-zero
    variance when the components are well separated.
    """
    if mu.shape[0] == 0:
        raise ValueError("mutual information of an empty dataset")
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    n, d = mu.shape
    kl_i = (0.5 * (mu**2 + np.exp(log_var) - 1.0 - log_var)).sum(axis=1)
    agg_terms = []
    for _ in range(m_samples):
        eps = rng.standard_normal(mu.shape)
        z = mu + np.exp(0.5 * log_var) * eps
        log_q_cond = -0.5 * ((eps**2).sum(1) + log_var.sum(1) + d * LOG_2PI)
        for sl in _batches(n, chunk):
            log_q = logsumexp(_log_normal(z[sl], mu, log_var), axis=1) - math.log(n)
            agg_terms.append(kl_i[sl] + log_q - log_q_cond[sl])
    agg_kl = float(np.concatenate(agg_terms).mean())
    return float(kl_i.mean()) - agg_kl


def mutual_information(model: VAE, dataset: Dataset, m_samples: int = 1,
                       rng: np.random.Generator | None = None, max_items: int = 2048,
                       batch_size: int = 500) -> float:
    if len(dataset) == 0:
        raise ValueError("mutual information of an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    images = dataset.images
    if len(images) > max_items:
        images = images[np.sort(rng.choice(len(images), size=max_items, replace=False))]
    mu, lv = posterior_params(model, images, batch_size)
    return mi_from_params(mu, lv, m_samples, rng)


def reencode_error(model: VAE, dataset: Dataset, rng: np.random.Generator | None = None,
                   batch_size: int = 500) -> float:
    """Mean ||z - z_hat||^2 over one encode -> decode -> re-encode pass."""
    rng = rng if rng is not None else np.random.default_rng(0)
    vals = []
    for sl in _batches(len(dataset), batch_size):
        code = encode(dataset.images[sl], model.encoder, rng)
        recon = decode(code.z, model.decoder, model.output)
        code_hat = reencode(recon, model.encoder, rng)
        vals.append(ne_se(code.z, code_hat.z).data)
    return float(np.concatenate(vals).mean())


def evaluate(model: VAE, dataset: Dataset, config: EvalConfig | None = None) -> DiagnosticsReport:
    """Full diagnostic report with a fixed evaluation seed."""
    config = config or EvalConfig()
    ss = np.random.SeedSequence(config.seed)
    elbo_rng, mi_rng, se_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    recon_terms, kl_terms, mus = [], [], []
    for sl in _batches(len(dataset), config.batch_size):
        x = dataset.images[sl]
        code = encode(x, model.encoder, elbo_rng)
        recon = decode(code.z, model.decoder, model.output)
        recon_terms.append(bernoulli_nll(recon.logits, x).data.sum(axis=1))
        kl_terms.append(kl_diag_gauss_to_std(code.mu, code.log_var).data.sum(axis=1))
        mus.append(code.mu.data)
    recon_nll = np.concatenate(recon_terms)
    kl = np.concatenate(kl_terms)
    mus = np.concatenate(mus)

    act = activity(mus) if len(mus) >= 2 else np.zeros(model.n_z)
    mi = mutual_information(model, dataset, config.mi_samples, mi_rng,
                            config.mi_max_items, config.batch_size)
    se = reencode_error(model, dataset, se_rng, config.batch_size)
    return DiagnosticsReport(
        neg_elbo=float((recon_nll + kl).mean()),
        kl=float(kl.mean()),
        mi=mi,
        au_count=active_units(act, config.au_threshold),
        activity=[float(a) for a in act],
        mean_reencode_se=se,
        au_threshold=config.au_threshold,
    )
