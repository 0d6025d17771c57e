"""Latent space optimization against a frozen decoder.

Each target image gets its own latent code, optimized by Adam to minimize the
squared error between the decoder mean and the target.  Targets are stacked
as rows of one code matrix: the objective is a sum of per-row terms and Adam
is elementwise, so every row follows its own independent trajectory (up to BLAS
reassociation across batch sizes).
A row stops once the absolute loss change stays <= the threshold for
``stop_window`` consecutive steps.  Several thresholds are tracked on one
trajectory: a looser threshold always stops at or before a tighter one.

``loss_resolution`` picks the precision at which consecutive losses are
compared.  With "float64" a zero threshold demands an exact stall of the
double-precision loss, which Adam on a nonlinear decoder may never reach;
"float32" compares the losses rounded to single precision, as a float32
training stack would see them.  The optimization itself always runs in float64.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import fmt, posterior_params
from .models import VAE, DecoderParams, decode

DEFAULT_THRESHOLDS = (0.01, 0.005, 0.001, 0.0)
RESOLUTIONS = {"float64": np.float64, "float32": np.float32}


class LsoError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LsoConfig:
    n_targets: int = 50
    init: str = "random_prior"  # or "encoder_mean"
    stop_threshold: float = 0.0
    stop_window: int = 10
    max_iters: int = 20000
    lr: float = 0.01
    seed: int = 0
    loss_resolution: str = "float64"  # or "float32"

    def __post_init__(self):
        if self.n_targets < 1 or self.max_iters < 1 or self.stop_window < 1:
            raise ValueError("n_targets, max_iters and stop_window must be >= 1")
        if not self.stop_threshold >= 0:
            raise ValueError("stop_threshold must be >= 0")
        if self.init not in ("random_prior", "encoder_mean"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.loss_resolution not in RESOLUTIONS:
            raise ValueError(f"unknown loss_resolution {self.loss_resolution!r}")


@dataclass
class LsoTrace:
    """One optimized target: ``loss_curve[0]`` is the loss at the initial code."""

    loss_curve: np.ndarray
    iterations_to_stop: int
    z_final: np.ndarray
    final_loss: float
    z_init: np.ndarray = field(repr=False, default=None)

    @property
    def best_loss(self) -> float:
        return float(self.loss_curve.min())


def _objective(z: ad.Tensor, targets: np.ndarray, decoder: DecoderParams, output: str):
    probs = decode(z, decoder, output).probs
    return ad.sum_(ad.square(probs - targets), axis=1)


def lso_run(targets: np.ndarray, decoder: DecoderParams, init_codes: np.ndarray,
            thresholds: Sequence[float], stop_window: int = 10, max_iters: int = 20000,
            lr: float = 0.01, output: str = "sigmoid",
            loss_resolution: str = "float64") -> list[dict[float, LsoTrace]]:
    """Optimize every row of ``init_codes`` toward the matching target row.

    Returns, per row, a trace for each threshold.  Curves for looser
    thresholds are prefixes of the tightest one's curve.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    z = np.array(np.atleast_2d(init_codes), dtype=np.float64)
    n, n_z = z.shape
    if targets.shape[0] != n:
        raise ad.ShapeError(f"{targets.shape[0]} targets but {n} initial codes")
    thr = np.array(sorted(thresholds, reverse=True), dtype=np.float64)
    if loss_resolution not in RESOLUTIONS:
        raise ValueError(f"unknown loss_resolution {loss_resolution!r}")
    cmp_dtype = RESOLUTIONS[loss_resolution]
    frozen = decoder.copy()  # constants: never watched, never updated

    m = np.zeros_like(z)
    v = np.zeros_like(z)
    b1, b2, eps = 0.9, 0.999, 1e-8
    runs = np.zeros((n, len(thr)), dtype=np.int64)
    stop_at = np.full((n, len(thr)), -1, dtype=np.int64)
    z_stop = np.zeros((n, len(thr), n_z))
    curves: list[list[float]] = [[] for _ in range(n)]
    active = np.arange(n)

    def evaluate(rows):
        zt = ad.Tensor(z[rows])
        with ad.Tape() as tape:
            tape.watch(zt)
            try:
                per_row = _objective(zt, targets[rows], frozen, output)
                ad.backward(ad.sum_(per_row), tape)
            except ad.NonFiniteError as exc:
                raise LsoError(f"non-finite LSO loss on rows {rows.tolist()}: {exc}") from exc
        return per_row.data, zt.grad

    loss, g = evaluate(active)
    for r, val in zip(active, loss):
        curves[r].append(float(val))
    t = 0
    while True:
        if t > 0:
            prev = np.array([curves[r][-2] for r in active]).astype(cmp_dtype)
            change = np.abs(loss.astype(cmp_dtype) - prev).astype(np.float64)
            small = change[:, None] <= thr[None, :]
            runs[active] = np.where(small, runs[active] + 1, 0)
            newly = (runs[active] >= stop_window) & (stop_at[active] < 0)
            for i, k in zip(*np.nonzero(newly)):
                stop_at[active[i], k] = t
                z_stop[active[i], k] = z[active[i]]
        if t == max_iters:
            for r in active:
                for k in np.flatnonzero(stop_at[r] < 0):
                    stop_at[r, k] = t
                    z_stop[r, k] = z[r]
        keep = stop_at[active, -1] < 0
        active, g = active[keep], g[keep]
        if active.size == 0:
            break
        t += 1
        m[active] = b1 * m[active] + (1 - b1) * g
        v[active] = b2 * v[active] + (1 - b2) * g * g
        step = lr * (m[active] / (1 - b1**t)) / (np.sqrt(v[active] / (1 - b2**t)) + eps)
        z[active] -= step
        loss, g = evaluate(active)
        for r, val in zip(active, loss):
            curves[r].append(float(val))

    out = []
    init = np.atleast_2d(init_codes)
    for r in range(n):
        curve = np.array(curves[r])
        out.append({
            float(th): LsoTrace(curve[: stop_at[r, k] + 1], int(stop_at[r, k]),
                                z_stop[r, k].copy(), float(curve[stop_at[r, k]]), init[r].copy())
            for k, th in enumerate(thr)
        })
    return out


def lso_optimize(target: np.ndarray, decoder: DecoderParams, config: LsoConfig,
                 init_code: np.ndarray, output: str = "sigmoid") -> LsoTrace:
    """Single-target LSO with ``config.stop_threshold``."""
    res = lso_run(np.atleast_2d(target), decoder, np.atleast_2d(init_code),
                  [config.stop_threshold], config.stop_window, config.max_iters,
                  config.lr, output, config.loss_resolution)
    return res[0][float(config.stop_threshold)]


def initial_codes(model: VAE, targets: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "encoder_mean":
        return posterior_params(model, targets)[0]
    if kind == "random_prior":
        return rng.standard_normal((len(targets), model.n_z))
    raise ValueError(f"unknown init kind {kind!r}")


@dataclass
class LsoRow:
    model_id: str
    target_id: int
    init_kind: str
    threshold: float
    iterations: int
    final_loss: float


@dataclass
class LsoPair:
    model_id: str
    target_id: int
    threshold: float
    init_a: str
    init_b: str
    sq_distance: float


@dataclass
class LsoReport:
    rows: list[LsoRow] = field(default_factory=list)
    pairs: list[LsoPair] = field(default_factory=list)

    def summary(self) -> list[dict]:
        out = []
        keys = sorted({(r.model_id, r.threshold, r.init_kind) for r in self.rows},
                      key=lambda k: (k[0], -k[1], k[2]))
        for model_id, th, init in keys:
            sel = [r for r in self.rows if (r.model_id, r.threshold, r.init_kind) == (model_id, th, init)]
            its = np.array([r.iterations for r in sel])
            dists = [p.sq_distance for p in self.pairs if p.model_id == model_id and p.threshold == th]
            out.append({
                "model_id": model_id, "threshold": th, "init_kind": init,
                "mean_iterations": float(its.mean()), "median_iterations": float(np.median(its)),
                "mean_final_loss": float(np.mean([r.final_loss for r in sel])),
                "mean_pair_sq_distance": float(np.mean(dists)) if dists else None,
            })
        return out

    def mean_iterations(self, model_id: str, threshold: float, init_kind: str | None = None) -> float:
        its = [r.iterations for r in self.rows if r.model_id == model_id and r.threshold == threshold
               and (init_kind is None or r.init_kind == init_kind)]
        return float(np.mean(its))

    def write_csv(self, out_dir, prefix: str = "lso") -> tuple[Path, Path, Path]:
        out_dir = Path(out_dir)
        paths = (out_dir / f"{prefix}_trials.csv", out_dir / f"{prefix}_pairs.csv",
                 out_dir / f"{prefix}_summary.csv")
        with paths[0].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("model_id", "target_id", "init_kind", "threshold", "iterations", "final_loss"))
            for r in self.rows:
                w.writerow([r.model_id, r.target_id, r.init_kind, fmt(r.threshold), r.iterations,
                            fmt(r.final_loss)])
        with paths[1].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("model_id", "target_id", "threshold", "init_a", "init_b", "sq_distance"))
            for p in self.pairs:
                w.writerow([p.model_id, p.target_id, fmt(p.threshold), p.init_a, p.init_b,
                            fmt(p.sq_distance)])
        with paths[2].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ("model_id", "threshold", "init_kind", "mean_iterations", "median_iterations",
                    "mean_final_loss", "mean_pair_sq_distance")
            w.writerow(cols)
            for s in self.summary():
                w.writerow([s["model_id"], fmt(s["threshold"]), s["init_kind"],
                            fmt(s["mean_iterations"]), fmt(s["median_iterations"]),
                            fmt(s["mean_final_loss"]),
                            "" if s["mean_pair_sq_distance"] is None else fmt(s["mean_pair_sq_distance"])])
        return paths


def lso_benchmark(targets: np.ndarray, models: Mapping[str, VAE], config: LsoConfig,
                  thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                  inits: Sequence[str] = ("random_prior", "encoder_mean")) -> LsoReport:
    """Run every model x init on the same targets and tabulate convergence.

    ``inits`` entries may repeat ("random_prior" twice gives two independent
    random restarts, labelled ``random_prior#0`` and ``random_prior#1``).
    Random initial codes depend only on ``config.seed`` and the restart index,
    so all models start from the same points.
    """
    targets = np.asarray(targets, dtype=np.float64)
    shapes = {(m.n_z, m.pixels) for m in models.values()}
    if len(shapes) > 1:
        raise ad.ShapeError(f"models disagree on (n_z, pixels): {sorted(shapes)}")
    if shapes and next(iter(shapes))[1] != targets.shape[1]:
        raise ad.ShapeError(f"targets have {targets.shape[1]} pixels, models expect {next(iter(shapes))[1]}")

    labels = []
    counts: dict[str, int] = {}
    for kind in inits:
        i = counts.get(kind, 0)
        counts[kind] = i + 1
        labels.append((kind, f"{kind}#{i}" if inits.count(kind) > 1 else kind, i))

    report = LsoReport()
    for model_id, model in models.items():
        finals: dict[str, list[dict[float, LsoTrace]]] = {}
        for kind, label, i in labels:
            rng = np.random.default_rng([config.seed, i])
            z0 = initial_codes(model, targets, kind, rng)
            res = lso_run(targets, model.decoder, z0, thresholds, config.stop_window,
                          config.max_iters, config.lr, model.output, config.loss_resolution)
            finals[label] = res
            for t_id, per_th in enumerate(res):
                for th, tr in per_th.items():
                    report.rows.append(LsoRow(model_id, t_id, label, th, tr.iterations_to_stop,
                                              tr.final_loss))
        for a, b in itertools.combinations([lab for _, lab, _ in labels], 2):
            for t_id in range(len(targets)):
                for th in finals[a][t_id]:
                    d = finals[a][t_id][th].z_final - finals[b][t_id][th].z_final
                    report.pairs.append(LsoPair(model_id, t_id, th, a, b, float(d @ d)))
    return report
