"""Operator entry point: data generation, anchor clustering, training,
evaluation, scoring, gradient checks, ablations, and plots.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs, config
mistakes), 2 runtime failure, 3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .ablate import MATRICES, run_matrices, write_table
from .anchors import AnchorBankError, cluster_anchors, load_bank, save_bank
from .checkpoint import CheckpointError, load_into
from .config import Config, ConfigError, resolve
from .core import COMMANDS
from .evaluate import (
    EvalError,
    load_trajectories,
    run_eval,
    run_score,
    write_score_report,
    write_trajectories,
)
from .model import Planner
from .scenarios import (
    DatasetError,
    GenerationError,
    TEMPLATES,
    generate,
    load_dataset,
    save_dataset,
)
from .training import TrainingAborted, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config file of 'key = value' lines")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    p = _Parser(prog="pieplan", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = add("gen-data", help="write train/val/test splits and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="base seed (gen.seed)")
    g.add_argument("--count", type=int, default=None,
                   help="training scenarios (gen.train_count)")

    c = add("cluster-anchors", help="build the anchor bank from a split")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)

    t = add("train", help="train the planner")
    t.add_argument("--data", required=True)
    t.add_argument("--bank", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--val-data", help="split scored for periodic validation")

    e = add("eval", help="plan trajectories over a split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--bank")
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", action="store_true",
                   help="constant-velocity straight-line planner")
    e.add_argument("--jobs", type=int, default=None)

    s = add("score", help="score planned trajectories")
    s.add_argument("--data", required=True)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=None)

    add("gradcheck", help="finite-difference verification suite")

    a = add("ablate", help="run a named config matrix")
    a.add_argument("--matrix", required=True,
                   choices=sorted(MATRICES) + ["all"])
    a.add_argument("--data", required=True)
    a.add_argument("--val-data", required=True)
    a.add_argument("--bank", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=None)

    pl = add("plot", help="render SVG plots from structured outputs")
    pl.add_argument("--out", required=True)
    pl.add_argument("--metrics", help="metrics.jsonl from train")
    pl.add_argument("--report", help="report.csv from score")
    pl.add_argument("--data", help="dataset split for BEV snapshots")
    pl.add_argument("--trajectories", help="planned trajectories for BEV snapshots")
    pl.add_argument("--bank", help="anchor bank to overlay on snapshots")
    pl.add_argument("--snapshots", type=int, default=4)
    return p


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: Config, out_dir: Path) -> None:
    cfg.write_snapshot(out_dir / "resolved-config.txt")


def _split_seeds(cfg: Config) -> dict:
    base = cfg.get("gen.seed")
    n_train = cfg.get("gen.train_count")
    n_val = cfg.get("gen.val_count")
    n_test = cfg.get("gen.test_count")
    return {
        "train": (base, base + n_train),
        "val": (base + n_train, base + n_train + n_val),
        "test": (base + n_train + n_val, base + n_train + n_val + n_test),
    }


def _pick_templates(cfg: Config, seeds: range) -> list:
    mix = cfg.template_mix()
    names = [n for n, _ in mix]
    weights = np.array([w for _, w in mix])
    rng = np.random.default_rng(cfg.get("gen.seed") + 99991)
    return [str(rng.choice(names, p=weights)) for _ in seeds]


def cmd_gen_data(args, cfg: Config) -> int:
    if args.seed is not None:
        cfg.values["gen.seed"] = args.seed
    if args.count is not None:
        cfg.values["gen.train_count"] = args.count
    out = _outdir(args.out)
    _snapshot(cfg, out)
    gen_cfg = cfg.generator_config()
    ranges = _split_seeds(cfg)
    manifest = {"splits": {}, "template_mix": cfg.get("gen.template_mix"),
                "config_digest": hashlib.sha256(
                    cfg.snapshot_text().encode()).hexdigest()[:16]}
    for split, (lo, hi) in ranges.items():
        seeds = range(lo, hi)
        templates = _pick_templates(cfg, seeds)
        scenarios = [generate(seed, tpl, gen_cfg)
                     for seed, tpl in zip(seeds, templates)]
        path = out / f"{split}.jsonl"
        save_dataset(scenarios, path)
        manifest["splits"][split] = {
            "path": path.name, "count": len(scenarios),
            "seed_range": [lo, hi],
        }
        print(f"wrote {path} ({len(scenarios)} scenarios, seeds [{lo}, {hi}))")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


def cmd_cluster_anchors(args, cfg: Config) -> int:
    data_path = _require_file(args.data, "dataset")
    scenarios = load_dataset(data_path)
    labeled = [(s.command, s.expert) for s in scenarios if s.command in COMMANDS]
    digest = hashlib.sha256(data_path.read_bytes()).hexdigest()[:16]
    bank = cluster_anchors(labeled, seed=cfg.get("anchors.seed"), source_hash=digest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out)
    cfg.write_snapshot(out.with_suffix(".config.txt"))
    print(f"wrote {out} (60 anchors from {len(labeled)} trajectories, "
          f"source {digest})")
    return EXIT_OK


def _load_planner(cfg: Config, bank_path, checkpoint=None) -> Planner:
    bank = load_bank(_require_file(bank_path, "anchor bank"))
    planner = Planner(cfg.model_config(), anchor_bank=bank)
    if checkpoint:
        load_into(planner, _require_file(checkpoint, "checkpoint"),
                  expected_hash=planner.config.config_hash())
    return planner


def cmd_train(args, cfg: Config) -> int:
    scenarios = load_dataset(_require_file(args.data, "dataset"))
    out = _outdir(args.out)
    _snapshot(cfg, out)
    planner = _load_planner(cfg, args.bank)
    train_cfg = cfg.train_config()

    val_fn = None
    if args.val_data:
        val_set = load_dataset(_require_file(args.val_data, "validation dataset"))
        scorer = cfg.scorer_config()

        def val_fn(model):
            records = run_score(run_eval(model, val_set), val_set, scorer)
            return float(np.mean([r.pdms for r in records]))

    records = train(planner, scenarios, train_cfg, out, val_fn=val_fn)
    print(f"trained {train_cfg.epochs} epochs: "
          f"first loss {records[0].train_loss:.4f}, "
          f"last loss {records[-1].train_loss:.4f}; checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    scenarios = load_dataset(_require_file(args.data, "dataset"))
    jobs = args.jobs if args.jobs is not None else cfg.get("eval.jobs")
    if args.baseline:
        records = run_eval(None, scenarios, jobs=jobs, baseline=True)
    else:
        if not args.bank or not args.checkpoint:
            raise UsageError("eval needs --bank and --checkpoint "
                             "(or --baseline)")
        planner = _load_planner(cfg, args.bank, args.checkpoint)
        records = run_eval(planner, scenarios, jobs=jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(records, out)
    cfg.write_snapshot(out.with_suffix(".config.txt"))
    print(f"wrote {out} ({len(records)} trajectories)")
    return EXIT_OK


def cmd_score(args, cfg: Config) -> int:
    scenarios = load_dataset(_require_file(args.data, "dataset"))
    trajs = load_trajectories(_require_file(args.trajectories, "trajectory file"))
    jobs = args.jobs if args.jobs is not None else cfg.get("eval.jobs")
    records = run_score(trajs, scenarios, cfg.scorer_config(), jobs=jobs)
    out = _outdir(args.out)
    _snapshot(cfg, out)
    agg = write_score_report(records, out)
    print(f"scored {agg['count']} scenarios: mean PDMS {agg['mean_pdms']:.4f}, "
          f"mean EPDMS {agg['mean_epdms']:.4f} -> {out}/report.jsonl")
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradsuite import run_suite
    ok = run_suite(report=print)
    if not ok:
        print("gradient suite FAILED")
        return EXIT_ACCEPTANCE
    print("gradient suite passed")
    return EXIT_OK


def cmd_ablate(args, cfg: Config) -> int:
    train_set = load_dataset(_require_file(args.data, "dataset"))
    val_set = load_dataset(_require_file(args.val_data, "validation dataset"))
    bank = load_bank(_require_file(args.bank, "anchor bank"))
    out = _outdir(args.out)
    _snapshot(cfg, out)
    jobs = args.jobs if args.jobs is not None else cfg.get("eval.jobs")
    rows = run_matrices(args.matrix, cfg.model_config(), cfg.train_config(),
                        train_set, val_set, bank, out,
                        scorer=cfg.scorer_config(), jobs=jobs)
    text = write_table(rows, out)
    print(text, end="")
    print(f"wrote {out}/ablation.csv")
    return EXIT_OK


def cmd_plot(args, cfg: Config) -> int:
    from . import svgplot
    out = _outdir(args.out)
    wrote = []
    if args.metrics:
        svgplot.plot_loss_curves(_require_file(args.metrics, "metrics log"),
                                 out / "loss_curves.svg")
        wrote.append("loss_curves.svg")
    if args.report:
        svgplot.plot_score_histogram(_require_file(args.report, "score report"),
                                     out / "pdms_hist.svg", column="pdms")
        svgplot.plot_score_histogram(args.report, out / "epdms_hist.svg",
                                     column="epdms")
        wrote.extend(["pdms_hist.svg", "epdms_hist.svg"])
    if args.data:
        scenarios = load_dataset(_require_file(args.data, "dataset"))
        planned = {}
        if args.trajectories:
            for rec in load_trajectories(_require_file(args.trajectories,
                                                       "trajectory file")):
                planned[rec["scenario_id"]] = np.asarray(rec["trajectory"])
        anchors = None
        for s in scenarios[:args.snapshots]:
            if args.bank and s.command in COMMANDS:
                anchors = load_bank(args.bank).anchors(s.command)
            name = f"bev_{s.id}.svg"
            svgplot.plot_bev(s, out / name, planned=planned.get(s.id),
                             anchors=anchors)
            wrote.append(name)
    if not wrote:
        raise UsageError("plot: nothing to do; pass --metrics, --report, or --data")
    print(f"wrote {', '.join(wrote)} in {out}")
    return EXIT_OK


COMMANDS_TABLE = {
    "gen-data": cmd_gen_data,
    "cluster-anchors": cmd_cluster_anchors,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(config_file=args.config, overrides=args.set)
        return COMMANDS_TABLE[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationError, DatasetError, CheckpointError, AnchorBankError,
            EvalError, TrainingAborted, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
