"""Training loops: standard (optionally KL-annealed) and aggressive-encoder.

Randomness is split into independent streams derived from ``config.seed``:
parameter init, minibatch shuffling, reparameterization noise and
evaluation.  Two runs with the same config are bitwise identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step
from .data import Dataset
from .losses import LossConfig, LossReport, total_loss
from .metrics import DiagnosticsReport, EvalConfig, evaluate, fmt, mutual_information, reencode_error
from .models import VAE, init_vae, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, terms: dict):
        self.epoch, self.batch, self.terms = epoch, batch, terms
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {terms}")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    n_z: int = 32
    hidden: tuple[int, ...] = (512, 512)
    activation: str = "tanh"
    zero_head: bool = False
    aggressive: bool = False
    aggressive_max_inner: int = 100
    aggressive_stop_window: int = 10
    reset_adam_after_aggressive: bool = False
    eval_every: int = 0  # 0 disables per-epoch diagnostics snapshots
    eval_max_items: int = 1000
    reencode_every: int = 1  # re-encoding-error curve cadence (0 disables)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.aggressive_max_inner < 1 or self.aggressive_stop_window < 1:
            raise ValueError("aggressive_max_inner and aggressive_stop_window must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class EpochRecord:
    epoch: int
    recon_nll: float
    kl: float
    ne_term: float
    kl_weight_applied: float
    total: float
    reencode_se: float | None = None
    aggressive: bool = False
    inner_steps: int = 0
    diagnostics: DiagnosticsReport | None = None


@dataclass
class RunLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def reencode_curve(self) -> list[tuple[int, float]]:
        return [(e.epoch, e.reencode_se) for e in self.epochs if e.reencode_se is not None]

    def write_csv(self, path) -> None:
        cols = ("epoch", "recon_nll", "kl", "ne_term", "kl_weight_applied", "total",
                "reencode_se", "aggressive", "inner_steps")
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for e in self.epochs:
                w.writerow([e.epoch, fmt(e.recon_nll), fmt(e.kl), fmt(e.ne_term),
                            fmt(e.kl_weight_applied), fmt(e.total),
                            "" if e.reencode_se is None else fmt(e.reencode_se),
                            int(e.aggressive), e.inner_steps])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps([asdict(e) for e in self.epochs], indent=1) + "\n")


@dataclass
class _Streams:
    init_seed: int
    shuffle: np.random.Generator
    noise: np.random.Generator
    eval_seed: int


def _streams(seed: int) -> _Streams:
    init, shuf, noise, ev = np.random.SeedSequence(seed).spawn(4)
    return _Streams(int(init.generate_state(1)[0]), np.random.default_rng(shuf),
                    np.random.default_rng(noise), int(ev.generate_state(1)[0]))


def _loss_and_grads(x: np.ndarray, model: VAE, config: TrainConfig, rng, epoch: int,
                    params: Sequence[ad.Tensor]) -> tuple[LossReport, list[np.ndarray]]:
    with Tape() as tape:
        tape.watch(*params)
        report = total_loss(x, model, config.loss, rng, epoch)
        ad.backward(report.objective, tape)
    grads = [p.grad for p in params]
    for p in params:
        p.grad = None
    return report, grads


def _check_finite(report: LossReport, epoch: int, batch: int) -> None:
    terms = {"recon_nll": report.recon_nll, "kl": report.kl, "ne_term": report.ne_term,
             "total": report.total}
    if not all(math.isfinite(v) for v in terms.values()):
        raise NonFiniteLossError(epoch, batch, terms)


def _step(model, params, x, config, streams, state, epoch, b, only_encoder=False):
    try:
        report, grads = _loss_and_grads(x, model, config, streams.noise, epoch, params)
    except ad.NonFiniteError as exc:
        raise NonFiniteLossError(epoch, b, {"error": str(exc)}) from exc
    _check_finite(report, epoch, b)
    if only_encoder:
        n_enc = len(model.encoder.parameters())
        grads = grads[:n_enc] + [None] * (len(grads) - n_enc)
    adam_step(params, grads, state)
    return report


def _eval_subset(dataset: Dataset, config: TrainConfig) -> Dataset:
    if len(dataset) <= config.eval_max_items:
        return dataset
    return dataset.subset(slice(0, config.eval_max_items))


def train(dataset: Dataset, config: TrainConfig, model: VAE | None = None,
          run_dir=None) -> tuple[VAE, RunLog]:
    """Minimize -ELBO (+ re-encoding loss) with Adam.

    Dispatches to :func:`train_aggressive` when ``config.aggressive`` is set.
    Checkpoints go to ``run_dir`` when given.
    """
    if config.aggressive:
        return train_aggressive(dataset, config, model, run_dir)
    return _train(dataset, config, model, run_dir, aggressive=False)


def train_aggressive(dataset: Dataset, config: TrainConfig, model: VAE | None = None,
                     run_dir=None) -> tuple[VAE, RunLog]:
    """Aggressive encoder updates until mutual information stops rising.

    For each outer batch the encoder alone is updated on fresh minibatches
    (decoder frozen) until its objective has not improved for
    ``aggressive_stop_window`` steps or ``aggressive_max_inner`` steps were
    taken; then one joint update runs on the outer batch.
    """
    return _train(dataset, config, model, run_dir, aggressive=True)


def _train(dataset, config, model, run_dir, aggressive):
    streams = _streams(config.seed)
    if model is None:
        model = init_vae(dataset.pixels, config.n_z, config.hidden, config.activation,
                         seed=streams.init_seed, zero_head=config.zero_head)
    if model.pixels != dataset.pixels:
        raise ad.ShapeError(f"model expects {model.pixels} pixels, dataset has {dataset.pixels}")
    params = model.parameters()
    n_enc = len(model.encoder.parameters())
    state = AdamState(lr=config.lr)
    runlog = RunLog()
    run_dir = Path(run_dir) if run_dir is not None else None
    eval_set = _eval_subset(dataset, config)
    n = len(dataset)
    prev_mi = -math.inf

    for epoch in range(config.epochs):
        order = streams.shuffle.permutation(n)
        sums = np.zeros(5)
        inner_total = 0
        n_batches = 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            x = dataset.images[order[lo:lo + config.batch_size]]
            if aggressive:
                inner_total += _inner_loop(model, params, n_enc, dataset, config,
                                           streams, state, epoch, b)
            report = _step(model, params, x, config, streams, state, epoch, b)
            sums += (report.recon_nll, report.kl, report.ne_term,
                     report.kl_weight_applied, report.total)
            n_batches += 1
        means = sums / max(n_batches, 1)
        rec = EpochRecord(epoch, *means.tolist(), aggressive=aggressive, inner_steps=inner_total)

        eval_rng_seed = streams.eval_seed + epoch
        if config.reencode_every and (epoch + 1) % config.reencode_every == 0:
            rec.reencode_se = reencode_error(model, eval_set, np.random.default_rng(eval_rng_seed))
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            rec.diagnostics = evaluate(model, eval_set, EvalConfig(seed=eval_rng_seed))
        if aggressive:
            mi = (rec.diagnostics.mi if rec.diagnostics is not None else
                  mutual_information(model, eval_set, 1, np.random.default_rng(eval_rng_seed),
                                     max_items=min(len(eval_set), 500)))
            if mi <= prev_mi:
                log.info("epoch %d: MI stopped increasing (%.4f <= %.4f); aggressive phase off",
                         epoch, mi, prev_mi)
                aggressive = False
                if config.reset_adam_after_aggressive:
                    state.reset()
            prev_mi = mi
        runlog.epochs.append(rec)
        log.info("epoch %d total=%.4f recon=%.4f kl=%.4f ne=%.4f w=%.3f", epoch, rec.total,
                 rec.recon_nll, rec.kl, rec.ne_term, rec.kl_weight_applied)
        if run_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, run_dir / f"checkpoint_epoch{epoch + 1:04d}.bin")
    if run_dir is not None:
        save_checkpoint(model, run_dir / "final.bin")
    return model, runlog


def _inner_loop(model, params, n_enc, dataset, config, streams, state, epoch, b) -> int:
    n = len(dataset)
    best = math.inf
    since_best = 0
    steps = 0
    while steps < config.aggressive_max_inner:
        idx = streams.shuffle.choice(n, size=min(config.batch_size, n), replace=False)
        report = _step(model, params, dataset.images[idx], config, streams, state, epoch, b,
                       only_encoder=True)
        steps += 1
        if report.total < best:
            best, since_best = report.total, 0
        else:
            since_best += 1
            if since_best >= config.aggressive_stop_window:
                break
    return steps
