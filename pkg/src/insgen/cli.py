"""Command-line runner: ``insgen train|eval|ablate|sweep-queue|schema``.

Configs are JSON files (see ``insgen schema``).  Any field can be overridden
with ``--set section.key=value`` or an ``INSGEN_SECTION__KEY`` environment
variable; the command line wins over the environment.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load
from .config import ConfigError, RunConfig, config_schema, load_config
from .datasets import DatasetError, load_table
from .presets import PRESETS, apply_preset
from .trainer import TrainingDiverged, build_dataset, evaluate, run, sample

log = logging.getLogger("insgen")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SUMMARY_KEYS = ("frechet", "mode_coverage", "hq_fraction", "mean_real_logit", "mean_fake_logit")
EVAL_KEYS = ("step", "n_samples", "frechet", "mode_coverage", "hq_fraction",
             "mean_real_logit", "mean_fake_logit", "memorization_gap")


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def train_one(cfg: RunConfig, out_dir, plots: bool = True) -> dict:
    """Train, write metrics/checkpoints/figures under ``out_dir``; returns the last record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    dataset = build_dataset(cfg)
    records, state = run(cfg, dataset, out_dir)
    if plots:
        from .plots import run_figures

        run_figures(records, sample(state, cfg, cfg.eval.samples), dataset, out_dir)
    return records[-1] if records else {}


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _print_table(header, rows):
    cells = [list(map(str, header))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    last = train_one(cfg, args.out, plots=not args.no_plots)
    print(json.dumps({k: _json_safe(last.get(k)) for k in ("step", *SUMMARY_KEYS)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    state = checkpoint_load(ckpt)
    from .checkpoint import read_checkpoint
    from .config import from_dict

    cfg = from_dict(read_checkpoint(ckpt)[0]["config"])
    dataset = load_table(args.dataset) if args.dataset else build_dataset(cfg)
    n = 10 * len(dataset)
    metrics = evaluate(state, cfg, dataset, n_samples=n)
    fakes = sample(state, cfg, n)
    gap = None
    holdout = dataset.meta.get("holdout")
    if holdout is not None and len(holdout):
        from .metrics import memorization_gap

        # equal set sizes: a denser holdout would sit closer to every fake
        gap = memorization_gap(fakes, dataset.samples, holdout[:len(dataset)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"step": state.step, "n_samples": n, **metrics, "memorization_gap": gap}
    report = {k: _json_safe(report.get(k)) for k in EVAL_KEYS}
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    from .plots import scatter

    scatter(fakes, dataset, out / "samples.svg", title=f"step {state.step}")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _train_job(job):
    cfg_dict, out_dir, plots = job
    from .config import from_dict

    return train_one(from_dict(cfg_dict), out_dir, plots)


def _run_jobs(jobs, parallel: int):
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def _seeds(args, cfg):
    return args.seeds if args.seeds else [cfg.trainer.seed]


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set)
    presets = list(dict.fromkeys(args.preset))
    for p in presets:
        if p not in PRESETS:
            raise ConfigError("preset", f"unknown preset {p!r}; expected one of {', '.join(PRESETS)}")
    out = Path(args.out)
    jobs, keys = [], []
    for p in presets:
        for seed in _seeds(args, base):
            cfg = apply_preset(base.override([f"trainer.seed={seed}"]), p)
            jobs.append((cfg.to_dict(), str(out / p.lstrip("+") / f"seed{seed}"), not args.no_plots))
            keys.append((p, seed))
    finals = _run_jobs(jobs, args.parallel)
    header = ("preset", "seed", *SUMMARY_KEYS)
    rows = [(p, s, *(finals[i].get(k) for k in SUMMARY_KEYS)) for i, (p, s) in enumerate(keys)]
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "summary.csv", header, rows)
    _print_table(header, rows)
    return EXIT_OK


def cmd_sweep_queue(args) -> int:
    base = load_config(args.config, args.set)
    bad = [n for n in args.lengths if n <= 0]
    if bad:
        raise ConfigError("lengths", f"queue lengths must be positive, got {bad[0]}")
    lengths = list(dict.fromkeys(args.lengths))
    if len(lengths) != len(args.lengths):
        log.warning("duplicate queue lengths dropped; sweeping %s", lengths)
    out = Path(args.out)
    seeds = _seeds(args, base)
    jobs = []
    for n in lengths:
        for seed in seeds:
            cfg = base.override([f"contrastive.queue_fake={n}", f"trainer.seed={seed}"])
            jobs.append((cfg.to_dict(), str(out / f"len{n}" / f"seed{seed}"), not args.no_plots))
    finals = _run_jobs(jobs, args.parallel)
    rows, medians, spreads = [], [], []
    for i, n in enumerate(lengths):
        vals = [finals[i * len(seeds) + j].get("frechet") for j in range(len(seeds))]
        vals = [v for v in vals if v is not None]
        med = float(np.median(vals)) if vals else float("nan")
        rows.append((n, len(vals), med, min(vals, default=None), max(vals, default=None)))
        medians.append(med)
        spreads.append((min(vals, default=med), max(vals, default=med)))
    header = ("queue_fake", "runs", "median_frechet", "min_frechet", "max_frechet")
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "sweep.csv", header, rows)
    from .plots import sweep_plot

    sweep_plot(lengths, medians, out / "sweep.svg", spreads)
    _print_table(header, rows)
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="insgen", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, multi=False):
        p.add_argument("config", nargs="?", default=None, help="JSON run config (defaults if omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. trainer.steps=1000")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--no-plots", action="store_true", help="skip SVG figures")
        if multi:
            p.add_argument("--seeds", type=int, nargs="+", help="one run per seed")
            p.add_argument("--parallel", type=int, default=1,
                           help="worker processes (runs use disjoint directories)")

    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate the averaged generator of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="CSV table; defaults to the checkpoint's dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train ablation presets and tabulate final metrics")
    common(p, multi=True)
    p.add_argument("--preset", nargs="+", required=True, help=" | ".join(PRESETS))
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep-queue", help="train once per fake-queue capacity")
    common(p, multi=True)
    p.add_argument("--lengths", type=int, nargs="+", required=True)
    p.set_defaults(fn=cmd_sweep_queue)

    p = sub.add_parser("schema", help="print the config JSON schema")
    p.set_defaults(fn=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"insgen: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError) as exc:
        print(f"insgen: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except TrainingDiverged as exc:
        print(f"insgen: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
