"""Command-line entry point: ``ugmae {pretrain,probe,ablate,sweep,plot-embeddings}``.

Exit codes: 0 success, 2 usage or config error, 3 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as dt
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from .datasets import parse_dataset_arg
from .errors import ConfigError, IncompatibleCheckpoint, MissingLabels, UgmaeError
from .evaluation import embed_nodes, linear_probe, write_probe_results
from .experiments import (COMPONENTS, cluster_separation, parse_components, pretrain_and_probe, project_2d,
                          run_ablations)
from .trainer import TrainConfig, config_digest, load_checkpoint, pretrain, restore_state

log = logging.getLogger("ugmae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SWEEP_GRIDS = {"p_f": (0.25, 0.375, 0.5, 0.625, 0.75), "p_s": (0.1, 0.2, 0.3, 0.4, 0.5)}
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def load_config(path, seed=None) -> TrainConfig:
    if path is None:
        cfg = TrainConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        try:
            cfg = TrainConfig.from_dict(data)
        except ConfigError as exc:
            raise UsageError(f"{p}: {exc}") from None
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@contextlib.contextmanager
def run_directory(out, command: str, digest: str, config_path, force: bool):
    """Yield a scratch directory that replaces ``out`` only if the run succeeds.

    A non-empty ``out`` is refused unless ``force`` is set.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        prior = out / MANIFEST
        same = prior.exists() and json.loads(prior.read_text()).get("config_digest") == digest
        hint = "an identical run" if same else "existing files"
        raise UsageError(f"{out} already holds {hint}; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    started = _now()
    try:
        yield tmp
        manifest = {"command": command, "config_path": None if config_path is None else str(config_path),
                    "out_dir": str(out), "started": started, "finished": _now(), "config_digest": digest}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out.exists():
            old = out.with_name(f".{out.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(out, old)
            os.replace(tmp, out)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def _digest(command, cfg: TrainConfig | None, **extra) -> str:
    return config_digest({"command": command, "config": None if cfg is None else cfg.to_dict(), **extra})


def _dataset(arg):
    try:
        return parse_dataset_arg(arg)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.seed)
    graph, spec = _dataset(args.dataset)
    digest = _digest("pretrain", cfg, dataset=args.dataset)
    with run_directory(args.out, "pretrain", digest, args.config, args.force) as tmp:
        pretrain(graph, cfg, out_dir=tmp)
    print(f"wrote {Path(args.out) / 'checkpoint.bin'}")
    return EXIT_OK


def _load_for_probe(args):
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    graph, spec = _dataset(args.dataset)
    if ckpt.feature_dim != graph.feature_dim:
        raise IncompatibleCheckpoint(
            f"checkpoint was trained on {ckpt.feature_dim}-dim features, dataset has {graph.feature_dim}")
    return ckpt, graph, spec


def cmd_probe(args) -> int:
    ckpt, graph, spec = _load_for_probe(args)
    if graph.labels is None:
        raise MissingLabels(f"dataset {args.dataset!r} has no labels")
    backbone = restore_state(ckpt).backbone
    seeds = list(range(args.seed or 0, (args.seed or 0) + args.runs))
    result = linear_probe(embed_nodes(backbone, graph), graph.labels, spec.split, seeds=seeds)
    digest = _digest("probe", ckpt.train_config, dataset=args.dataset, checkpoint=str(args.checkpoint), seeds=seeds)
    with run_directory(args.out, "probe", digest, args.config, args.force) as tmp:
        write_probe_results(result, spec.name, tmp, seeds)
    print(f"accuracy {result.accuracy_mean:.2f} +/- {result.accuracy_std:.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        components = list(COMPONENTS) if args.components is None else parse_components(args.components)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    graph, spec = _dataset(args.dataset)
    digest = _digest("ablate", cfg, dataset=args.dataset, components=components, runs=args.runs)
    with run_directory(args.out, "ablate", digest, args.config, args.force) as tmp:
        rows = run_ablations(graph, spec, cfg, components, args.runs, tmp)
        with open(tmp / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "mean", "std", "runs"])
            for name, res in rows:
                w.writerow([name, repr(res.accuracy_mean), repr(res.accuracy_std), len(res.per_seed)])
    for name, res in rows:
        print(f"{name:10s} {res.accuracy_mean:6.2f} +/- {res.accuracy_std:.2f}")
    return EXIT_OK


def parse_values(param: str, text: str | None) -> list[float]:
    if param not in SWEEP_GRIDS:
        raise UsageError(f"--param must be one of {', '.join(SWEEP_GRIDS)}")
    if not text:
        return list(SWEEP_GRIDS[param])
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be a comma-separated list of numbers, got {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    for v in values:
        ok = 0.0 < v <= 1.0 if param == "p_f" else 0.0 <= v < 1.0
        if not ok:
            rng = "(0, 1]" if param == "p_f" else "[0, 1)"
            raise UsageError(f"{param}={v} is outside the valid range {rng}")
    return values


def _plot_curve(path, param, rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    es = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3)
    ax.set_xlabel(param)
    ax.set_ylabel("probe accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_sweep(args) -> int:
    values = parse_values(args.param, args.values)
    cfg = load_config(args.config, args.seed)
    graph, spec = _dataset(args.dataset)
    digest = _digest("sweep", cfg, dataset=args.dataset, param=args.param, values=values, runs=args.runs)
    rows = []
    with run_directory(args.out, "sweep", digest, args.config, args.force) as tmp:
        for v in values:
            res = pretrain_and_probe(graph, spec, cfg.replace(**{args.param: v}), args.runs,
                                     tmp / "runs" / f"{args.param}={v}")
            rows.append((v, res.accuracy_mean, res.accuracy_std))
        with open(tmp / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "mean", "std"])
            for v, m, s in rows:
                w.writerow([repr(v), repr(m), repr(s)])
        _plot_curve(tmp / "sweep.png", args.param, rows)
    for v, m, s in rows:
        print(f"{args.param}={v:<6g} {m:6.2f} +/- {s:.2f}")
    return EXIT_OK


def cmd_plot_embeddings(args) -> int:
    ckpt, graph, spec = _load_for_probe(args)
    if graph.labels is None:
        raise MissingLabels(f"dataset {args.dataset!r} has no labels to color by")
    backbone = restore_state(ckpt).backbone
    coords = project_2d(embed_nodes(backbone, graph))
    labels = graph.labels.tolist()
    digest = _digest("plot-embeddings", ckpt.train_config, dataset=args.dataset, checkpoint=str(args.checkpoint))
    with run_directory(args.out, "plot-embeddings", digest, args.config, args.force) as tmp:
        write_coordinates(tmp / "coords.csv", coords, labels)
        plot_scatter(tmp / "embeddings.png", coords, labels)
    gap, radius = cluster_separation(coords, labels)
    print(f"closest class centers {gap:.3f} apart, mean class radius {radius:.3f}")
    return EXIT_OK


def write_coordinates(path, coords, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "label", "x", "y"])
        for i, (xy, y) in enumerate(zip(coords, labels)):
            w.writerow([i, y, repr(float(xy[0])), repr(float(xy[1]))])


def plot_scatter(path, coords, labels):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(coords[:, 0], coords[:, 1], c=labels, s=6, cmap="tab10")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ugmae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, checkpoint=False):
        if config:
            p.add_argument("--config", metavar="PATH", help="JSON training config (defaults if omitted)")
        if checkpoint:
            p.add_argument("--checkpoint", metavar="PATH", required=True)
        p.add_argument("--out", metavar="DIR", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--dataset", default="sbm", metavar="NAME|PATH",
                       help="'sbm', 'sbm:key=value,...' or a dataset directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen embeddings")
    common(p, checkpoint=True)
    p.add_argument("--runs", type=int, default=5, help="probe seeds")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="remove components one at a time")
    common(p)
    p.add_argument("--components", default=None, help="subset of AM,SR,BS,CA (default all; empty runs the full model only)")
    p.add_argument("--runs", type=int, default=5, help="pretraining seeds per variant")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="mask-rate sweep")
    common(p)
    p.add_argument("--param", choices=sorted(SWEEP_GRIDS), required=True)
    p.add_argument("--values", default=None, help="comma-separated rates (default: standard grid)")
    p.add_argument("--runs", type=int, default=5, help="pretraining seeds per value")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot-embeddings", help="2-D scatter of frozen embeddings")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_plot_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UgmaeError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
