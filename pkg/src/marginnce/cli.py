"""Command-line interface: dataset generation, training, sweeps, evaluation.

Exit codes are a stable contract for scripting: 0 success, 2 configuration
error, 3 numerical failure, 4 I/O or data error. Every emitted CSV embeds the
sha256 of the fully resolved config, all writes are atomic, and sweep runs
leave per-run JSON markers so interrupted sweeps resume without recomputation.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys

import numpy as np

from . import fileio, metrics, synthdata, trainer
from .config import RunConfig, config_hash, load_run_config, resolve_open_set
from .metrics import EvalConfig
from .numerics import ConfigError, DataError, NumericalFailure, RngStream
from .trainer import SweepSetup

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marginnce",
        description="Negative-margin contrastive localization: data, training, sweeps, metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", default=None,
                       help="JSON run config (defaults apply for missing fields)")
        p.add_argument("--seed", type=int, default=None, metavar="N",
                       help="override both synth.seed and train.seed")
        p.add_argument("--out", default=None, metavar="DIR",
                       help="override output_dir")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved config as JSON and exit")

    p = sub.add_parser("gen-data", help="generate dataset and annotation files")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and evaluate it")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from an existing checkpoint in the output dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="margin sweep over seeds with resumable runs")
    common(p)
    p.add_argument("--margins", default=None, metavar="a,b,c",
                   help="comma-separated margin list (overrides config)")
    p.add_argument("--threads", type=int, default=1, metavar="N",
                   help="parallel worker processes for independent runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("open-set", help="heard/unheard evaluation on disjoint classes")
    common(p)
    p.add_argument("--margins", default=None, metavar="a,b,c")
    p.add_argument("--threads", type=int, default=1, metavar="N")
    p.set_defaults(func=cmd_open_set)

    p = sub.add_parser("eval-maps", help="score prediction maps against annotations")
    common(p)
    p.add_argument("--predictions", required=True, metavar="PATH")
    p.add_argument("--annotations", required=True, metavar="PATH")
    p.add_argument("--absolute-threshold", type=float, default=None, metavar="X",
                   help="binarize at this score instead of the per-map median")
    p.add_argument("--auc-step", type=float, default=None, metavar="S")
    p.set_defaults(func=cmd_eval_maps)

    p = sub.add_parser("print-config", help="print the resolved config as JSON")
    common(p)
    p.set_defaults(func=cmd_print_config)

    return parser


def _resolved_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(synth=cfg.synth.replace(seed=args.seed),
                          train=cfg.train.replace(seed=args.seed))
    if args.out is not None:
        cfg = cfg.replace(output_dir=args.out)
    margins = getattr(args, "margins", None)
    if margins is not None:
        try:
            values = tuple(float(v) for v in margins.split(",") if v.strip() != "")
        except ValueError:
            raise ConfigError(f"--margins must be comma-separated numbers, got {margins!r}")
        if not values:
            raise ConfigError("--margins must contain at least one value")
        cfg = cfg.replace(margins=values)
    eval_kw = {}
    if getattr(args, "absolute_threshold", None) is not None:
        eval_kw = {"threshold_rule": "absolute",
                   "absolute_threshold": args.absolute_threshold}
    if getattr(args, "auc_step", None) is not None:
        eval_kw["auc_step"] = args.auc_step
    if eval_kw:
        cfg = cfg.replace(eval=EvalConfig.from_dict({**cfg.eval.to_dict(), **eval_kw}))
    cfg.validate()
    return cfg


def _maybe_print_config(args, cfg: RunConfig) -> bool:
    if getattr(args, "print_config", False):
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return True
    return False


def _build_splits(cfg: RunConfig):
    rng = RngStream(cfg.synth.seed)
    if cfg.heard_classes is not None:
        heard, unheard = resolve_open_set(cfg)
        train, heard_test, unheard_test = synthdata.make_split(
            cfg.synth, heard, unheard, rng, cfg.test_samples_per_class)
        return {"train": train, "heard_test": heard_test, "unheard_test": unheard_test}
    train, test = synthdata.make_train_test(cfg.synth, rng, cfg.test_samples_per_class)
    return {"train": train, "test": test}


def cmd_print_config(args) -> int:
    cfg = _resolved_config(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _resolved_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    splits = _build_splits(cfg)
    ds_path = os.path.join(out, "dataset.npz")
    synthdata.save_dataset(ds_path, splits, cfg.synth)
    shape = (cfg.synth.grid_h * cfg.eval.upsample, cfg.synth.grid_w * cfg.eval.upsample)
    print(f"dataset: {ds_path}")
    for name in sorted(splits):
        scenes = splits[name]
        if name != "train":
            anno_path = os.path.join(out, f"annotations_{name}.json")
            metrics.save_annotations(anno_path, shape,
                                     synthdata.annotation_boxes(scenes, name))
            print(f"annotations: {anno_path}")
        counts = {}
        for s in scenes:
            counts[s.class_id] = counts.get(s.class_id, 0) + 1
        print(f"split {name}: {len(scenes)} scenes, per-class counts "
              f"{json.dumps(counts, sort_keys=True)}")
    frac = synthdata.corruption_fraction(splits["train"])
    print(f"train corruption fraction: {frac:.4f} "
          f"(configured {cfg.synth.faulty_positive_rate})")
    return EXIT_OK


def _load_or_build_splits(cfg: RunConfig):
    ds_path = os.path.join(cfg.output_dir, "dataset.npz")
    if os.path.exists(ds_path):
        splits, stored = synthdata.load_dataset(ds_path)
        if stored != cfg.synth:
            raise ConfigError(
                f"{ds_path} was generated with a different synth config; "
                "re-run gen-data or point output_dir elsewhere")
        return splits
    return _build_splits(cfg)


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    chash = config_hash(cfg)
    splits = _load_or_build_splits(cfg)
    train_set = splits["train"]
    test_set = splits.get("test") or splits.get("heard_test")

    ckpt_path = os.path.join(out, "checkpoint.npz")
    if args.resume and os.path.exists(ckpt_path):
        enc, saved_cfg, done, opt, history = trainer.load_checkpoint(ckpt_path)
        want = cfg.train.to_dict()
        have = saved_cfg.to_dict()
        want.pop("epochs")
        have.pop("epochs")
        if want != have:
            raise ConfigError(
                "checkpoint was written with a different train config; "
                "cannot resume")
        enc, history = trainer.train(enc, train_set, cfg.train, optimizer=opt,
                                     start_epoch=done, history=history)
    else:
        enc = trainer.new_encoder(cfg.train, cfg.synth.latent_dim)
        opt = trainer.make_optimizer(cfg.train)
        enc, history = trainer.train(enc, train_set, cfg.train, optimizer=opt)
    trainer.save_checkpoint(ckpt_path, enc, cfg.train, cfg.train.epochs, opt, history)

    loss_lines = ["# marginnce loss history", f"# config_sha256: {chash}",
                  "epoch,mean_loss"]
    loss_lines += [f"{i},{repr(v)}" for i, v in enumerate(history)]
    fileio.atomic_write_text(os.path.join(out, "loss_history.csv"),
                             "\n".join(loss_lines) + "\n")

    res = trainer.evaluate(enc, test_set, cfg.train.loss.pool, cfg.eval)
    record = trainer.RunRecord(
        margin=cfg.train.loss.margin, seed=cfg.train.seed,
        retrieval_accuracy=res.retrieval_accuracy, ciou_at_half=res.ciou_at_half,
        auc=res.auc_percent,
        final_loss=history[-1] if history else float("nan"))
    report = trainer.aggregate_runs([record])
    fileio.atomic_write_text(os.path.join(out, "eval_report.csv"),
                             trainer.report_to_csv(report, chash, "train report"))
    print(f"checkpoint: {ckpt_path}")
    print(f"margin {record.margin}: retrieval {record.retrieval_accuracy:.4f}, "
          f"cIoU@0.5 {record.ciou_at_half:.2f}%, AUC {record.auc:.2f}%")
    return EXIT_OK


def _marker_path(runs_dir: str, kind: str, margin: float, seed: int) -> str:
    return os.path.join(runs_dir, f"{kind}_m{margin!r}_s{seed}.json")


def _sweep_worker(job):
    margin, seed, setup = job
    return trainer.sweep_run(margin, seed, setup)


def _open_set_worker(job):
    margin, seed, setup, heard, unheard = job
    return trainer.open_set_run(margin, seed, setup, heard, unheard)


def _run_jobs(jobs, worker, threads: int):
    if threads > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, jobs))
    return [worker(job) for job in jobs]


def cmd_sweep(args) -> int:
    cfg = _resolved_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    out = cfg.output_dir
    runs_dir = os.path.join(out, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    chash = config_hash(cfg)
    setup = SweepSetup(synth=cfg.synth, train=cfg.train, eval=cfg.eval,
                       test_samples_per_class=cfg.test_samples_per_class)
    pairs = [(m, s) for m in cfg.margins for s in cfg.seeds]
    pending = [(m, s, setup) for m, s in pairs
               if not os.path.exists(_marker_path(runs_dir, "sweep", m, s))]
    for job, record in zip(pending, _run_jobs(pending, _sweep_worker, args.threads)):
        margin, seed, _ = job
        fileio.atomic_write_text(
            _marker_path(runs_dir, "sweep", margin, seed),
            json.dumps(record.to_dict(), sort_keys=True) + "\n")
    records = []
    for margin, seed in pairs:
        with open(_marker_path(runs_dir, "sweep", margin, seed), encoding="utf-8") as fh:
            records.append(trainer.RunRecord.from_dict(json.load(fh)))
    report = trainer.aggregate_runs(records)
    fileio.atomic_write_text(os.path.join(out, "sweep_report.csv"),
                             trainer.report_to_csv(report, chash, "sweep report"))
    fileio.atomic_write_text(os.path.join(out, "sweep_plot_data.csv"),
                             trainer.plot_data_csv(report, chash))
    print(f"sweep report: {os.path.join(out, 'sweep_report.csv')} "
          f"({len(pending)} run(s) executed, {len(pairs) - len(pending)} reused)")
    for agg in report.aggregates:
        print(f"margin {agg.margin:+.2f}: retrieval {agg.retrieval_mean:.4f}"
              f"±{agg.retrieval_std:.4f}, cIoU@0.5 {agg.ciou_at_half_mean:.2f}"
              f"±{agg.ciou_at_half_std:.2f}")
    return EXIT_OK


def cmd_open_set(args) -> int:
    cfg = _resolved_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    out = cfg.output_dir
    runs_dir = os.path.join(out, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    chash = config_hash(cfg)
    heard, unheard = resolve_open_set(cfg)
    synthdata.validate_class_split(cfg.synth.num_classes, heard, unheard)
    setup = SweepSetup(synth=cfg.synth, train=cfg.train, eval=cfg.eval,
                       test_samples_per_class=cfg.test_samples_per_class)
    pairs = [(m, s) for m in cfg.margins for s in cfg.seeds]
    pending = [(m, s, setup, heard, unheard) for m, s in pairs
               if not os.path.exists(_marker_path(runs_dir, "openset", m, s))]
    for job, (rec_h, rec_u) in zip(pending, _run_jobs(pending, _open_set_worker,
                                                      args.threads)):
        margin, seed = job[0], job[1]
        payload = {"heard": rec_h.to_dict(), "unheard": rec_u.to_dict()}
        fileio.atomic_write_text(_marker_path(runs_dir, "openset", margin, seed),
                                 json.dumps(payload, sort_keys=True) + "\n")
    heard_records, unheard_records = [], []
    for margin, seed in pairs:
        with open(_marker_path(runs_dir, "openset", margin, seed), encoding="utf-8") as fh:
            payload = json.load(fh)
        heard_records.append(trainer.RunRecord.from_dict(payload["heard"]))
        unheard_records.append(trainer.RunRecord.from_dict(payload["unheard"]))
    for name, records in (("heard", heard_records), ("unheard", unheard_records)):
        report = trainer.aggregate_runs(records)
        path = os.path.join(out, f"openset_{name}_report.csv")
        fileio.atomic_write_text(path,
                                 trainer.report_to_csv(report, chash,
                                                       f"open-set {name} report"))
        print(f"open-set {name} report: {path}")
        for agg in report.aggregates:
            print(f"  margin {agg.margin:+.2f}: retrieval {agg.retrieval_mean:.4f}"
                  f"±{agg.retrieval_std:.4f}, cIoU@0.5 {agg.ciou_at_half_mean:.2f}"
                  f"±{agg.ciou_at_half_std:.2f}")
    return EXIT_OK


def cmd_eval_maps(args) -> int:
    cfg = _resolved_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    shape, boxes_by_id = metrics.load_annotations(args.annotations)
    preds = metrics.load_predictions(args.predictions)
    rows, summary = metrics.evaluate_batch(preds, boxes_by_id, shape, cfg.eval)
    eval_hash = fileio.sha256_hex(fileio.canonical_json(cfg.eval.to_dict()))
    report_path = os.path.join(out, "metrics_report.csv")
    metrics.write_metrics_report(report_path, rows, summary, eval_hash)
    print(f"metrics report: {report_path}")
    print(f"cIoU@0.5: {summary['ciou_at_0.5_percent']:.3f}%  "
          f"AUC: {summary['auc_percent']:.3f}%  ({len(rows)} samples)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
