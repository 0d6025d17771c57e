"""Command line entry point: ``nevae train|eval|traverse|lso``.

Exit codes: 0 success, 1 runtime failure, 2 usage / config / input error.
Output root is ``--out``, else ``$NEVAE_RUN_DIR``, else ``./runs``.

Run-config files are flat ``key = value`` text, one entry per line, ``#``
starts a comment.  Keys are the long option names with dashes or
underscores (``batch_size = 64``); booleans take true/false.  Command line
flags override file entries.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, IdxError, binarize, load_idx
from .losses import LossConfig
from .lso import DEFAULT_THRESHOLDS, LsoConfig, lso_benchmark
from .metrics import EvalConfig, append_csv, evaluate, write_activity_csv
from .models import CheckpointError, load_checkpoint
from .training import NonFiniteLossError, TrainConfig, train
from .traverse import TraverseSpec, traverse_codes, write_traverse, zero_top_active

log = logging.getLogger("nevae")


class UsageError(Exception):
    pass


# --- config files -----------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _config_argv(parser: argparse.ArgumentParser, entries: dict[str, str]) -> list[str]:
    actions = {a.dest: a for a in parser._actions if a.option_strings}
    argv = []
    for key, value in entries.items():
        action = actions.get(key)
        if action is None or key in ("config", "out"):
            raise UsageError(f"unknown config key {key!r}")
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{key}: expected a boolean, got {value!r}")
        elif isinstance(action, argparse._AppendAction):
            for part in value.split(","):
                argv += [flag, part]
        else:
            argv += [flag, value]
    return argv


def format_config(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# --- shared helpers ---------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get("NEVAE_RUN_DIR") or "runs")


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is not None:
            h.update(Path(p).read_bytes())
    return h.hexdigest()


def _load_dataset(args) -> Dataset:
    for p in (args.data, getattr(args, "labels", None)):
        if p is not None and not Path(p).is_file():
            raise UsageError(f"dataset file not found: {p}")
    ds = load_idx(args.data, getattr(args, "labels", None))
    if getattr(args, "subset", None):
        ds = ds.subset(slice(0, args.subset))
    mode = getattr(args, "binarize", "threshold")
    if mode and mode != "none":
        ds = binarize(ds, mode, seed=args.seed)
    return ds


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _add_data_args(p, required=True):
    p.add_argument("--data", required=required, help="IDX3 image file (optionally gzipped)")
    p.add_argument("--labels", help="IDX1 label file")
    p.add_argument("--binarize", choices=("threshold", "stochastic", "none"), default="threshold")
    p.add_argument("--subset", type=int, help="keep only the first N images")


# --- subcommands ------------------------------------------------------------


def cmd_train(args) -> Path:
    ds = _load_dataset(args)
    anneal = None if args.no_anneal else tuple(args.anneal)
    if anneal is not None:
        if len(anneal) != 3:
            raise UsageError("--anneal takes start,end,epochs")
        anneal = (anneal[0], anneal[1], int(anneal[2]))
    try:
        loss = LossConfig(variant=args.variant, beta=args.beta, cap_c=args.cap, anneal=anneal,
                          ne_weight=args.ne_weight, binarize_reencode=args.binarize_reencode)
        config = TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed, loss=loss,
            n_z=args.nz, hidden=tuple(args.hidden), activation=args.activation,
            zero_head=args.zero_head, aggressive=args.aggressive,
            aggressive_max_inner=args.aggressive_max_inner,
            aggressive_stop_window=args.aggressive_stop_window,
            eval_every=args.eval_every, checkpoint_every=args.checkpoint_every)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    run_id = args.run_id or f"{args.variant}_nz{args.nz}_seed{args.seed}"
    run_dir = _out_root(args) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config", "out", "command")}
    resolved["run_id"] = run_id
    (run_dir / "config.txt").write_text(format_config(resolved))
    manifest = {
        "run_id": run_id,
        "version": __version__,
        "seed": args.seed,
        "dataset_fingerprint": _file_digest(args.data, args.labels),
        "config": {k: resolved[k] for k in sorted(resolved)},
        "artifacts": {"config": "config.txt", "checkpoint": "final.bin", "runlog_csv": "runlog.csv",
                      "runlog_json": "runlog.json", "metrics_csv": "metrics.csv",
                      "activity_csv": "activity.csv"},
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    for stale in ("metrics.csv", "activity.csv"):
        (run_dir / stale).unlink(missing_ok=True)
    model, runlog = train(ds, config, run_dir=run_dir)
    runlog.write_csv(run_dir / "runlog.csv")
    runlog.write_json(run_dir / "runlog.json")
    for rec in runlog.epochs:
        if rec.diagnostics is not None:
            append_csv(run_dir / "metrics.csv", rec.diagnostics, run_id, rec.epoch + 1)
            write_activity_csv(run_dir / "activity.csv", rec.diagnostics, run_id, rec.epoch + 1)
    print(run_dir)
    return run_dir


def cmd_eval(args) -> Path:
    model = _load_model(args.checkpoint)
    ds = _load_dataset(args)
    report = evaluate(model, ds, EvalConfig(seed=args.seed, mi_samples=args.mi_samples,
                                            mi_max_items=args.mi_max_items))
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    run_id = args.run_id or Path(args.checkpoint).parent.name
    report.to_json(out / "eval.json")
    append_csv(out / "metrics.csv", report, run_id, args.epoch)
    if args.activity_csv:
        write_activity_csv(args.activity_csv, report, run_id, args.epoch)
    print(report.to_json())
    return out


def cmd_traverse(args) -> Path:
    model = _load_model(args.checkpoint)
    zero_dims: tuple[int, ...] = tuple(args.zero_dims or ())
    if args.zero_top:
        if args.data is None:
            raise UsageError("--zero-top needs --data to measure activity")
        report = evaluate(model, _load_dataset(args), EvalConfig(seed=args.seed))
        zero_dims = tuple(sorted(set(zero_dims) | set(zero_top_active(report.activity, args.zero_top))))
    try:
        spec = TraverseSpec(kind="random_direction" if args.random else "single_dim",
                            dim=args.dim, n_points=args.n_points, range=(args.lo, args.hi),
                            radius=args.radius, zero_dims=zero_dims, seed=args.seed)
        codes = traverse_codes(spec, model.n_z)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    side = args.image_side
    shape = (side, model.pixels // side) if side else None
    path = write_traverse(out, spec, codes, model.decoder, args.cols, shape, model.output)
    print(path)
    return path


def cmd_lso(args) -> Path:
    models = {}
    for item in args.checkpoint:
        model_id, _, path = item.rpartition("=")
        models[model_id or Path(path).parent.name or Path(path).stem] = _load_model(path)
    ds = _load_dataset(args)
    try:
        config = LsoConfig(n_targets=args.targets, stop_window=args.stop_window,
                           max_iters=args.max_iters, lr=args.lr, seed=args.seed,
                           loss_resolution=args.loss_resolution)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rng = np.random.default_rng(args.seed)
    n = min(config.n_targets, len(ds))
    idx = np.sort(rng.choice(len(ds), size=n, replace=False))
    report = lso_benchmark(ds.images[idx], models, config, args.thresholds, args.inits.split(","))
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "lso_config.txt").write_text(format_config(
        {k: v for k, v in vars(args).items() if k not in ("func", "config", "out", "command")}))
    paths = report.write_csv(out)
    for p in paths:
        print(p)
    return out


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nevae", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_data_args(p)
    p.add_argument("--config", help="flat key = value run-config file")
    p.add_argument("--variant", choices=("vanilla", "beta", "ne_se", "ne_lp"), default="vanilla")
    p.add_argument("--nz", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--cap", type=float, default=0.0, help="ne_lp capping threshold c")
    p.add_argument("--ne-weight", type=float, default=1.0)
    p.add_argument("--binarize-reencode", action="store_true")
    p.add_argument("--anneal", type=_floats, default=[0.1, 1.0, 10], help="start,end,epochs")
    p.add_argument("--no-anneal", action="store_true")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--hidden", type=_ints, default=[512, 512])
    p.add_argument("--activation", choices=("tanh", "relu", "sigmoid"), default="tanh")
    p.add_argument("--zero-head", action="store_true", help="zero-initialize both output layers")
    p.add_argument("--aggressive", action="store_true")
    p.add_argument("--aggressive-max-inner", type=int, default=100)
    p.add_argument("--aggressive-stop-window", type=int, default=10)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--run-id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="posterior-collapse diagnostics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--mi-samples", type=int, default=1)
    p.add_argument("--mi-max-items", type=int, default=2048)
    p.add_argument("--epoch", type=int, default=0, help="epoch label for the CSV row")
    p.add_argument("--run-id")
    p.add_argument("--activity-csv", help="also write per-dimension activity here")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("traverse", help="render latent traversals as PGM grids")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p, required=False)
    p.add_argument("--dim", type=int, default=0)
    p.add_argument("--random", action="store_true", help="random direction from the origin")
    p.add_argument("--zero-top", type=int, default=0, help="zero the k most active dims")
    p.add_argument("--zero-dims", type=_ints)
    p.add_argument("--n-points", type=int, default=100)
    p.add_argument("--lo", type=float, default=-10.0)
    p.add_argument("--hi", type=float, default=10.0)
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--cols", type=int)
    p.add_argument("--image-side", type=int, help="tile height when images are not square")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("lso", help="latent space optimization benchmark")
    p.add_argument("--checkpoint", action="append", required=True, help="[id=]path, repeatable")
    _add_data_args(p)
    p.add_argument("--config", help="flat key = value run-config file")
    p.add_argument("--targets", type=int, default=50)
    p.add_argument("--thresholds", type=_floats, default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--inits", default="random_prior,encoder_mean")
    p.add_argument("--max-iters", type=int, default=20000)
    p.add_argument("--stop-window", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--loss-resolution", choices=("float64", "float32"), default="float64",
                   help="precision at which successive losses are compared for stopping")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lso)
    return parser


def _with_config(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Splice config-file entries in right after the subcommand name."""
    args, _ = parser.parse_known_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return argv
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    pos = argv.index(args.command) + 1
    return argv[:pos] + _config_argv(sub, read_config_file(path)) + argv[pos:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _with_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"nevae: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, IdxError, CheckpointError) as exc:
        print(f"nevae: error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteLossError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"nevae: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
