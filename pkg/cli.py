"""
Command-line surface.

    python cli.py gen-data --images 1000 --classes 8 --seed 0 --out data/train
    python cli.py run --config configs/4p4_latent_distill.yaml [--resume CKPT] [--sweep-freeze] [--full-scale]
    python cli.py eval --checkpoint runs/x/checkpoints/task_1.ckpt --data data/test
    python cli.py ledger --config configs/4p4_latent_distill.yaml [--sweep-freeze] [--out ledger.yaml]
    python cli.py report --runs runs/a runs/b --out runs/report

Errors print a one-line message and exit with status 1; bad flags exit 2.
"""
import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import yaml
from tabulate import tabulate

import checkpoint
from autodiff import AutodiffError
from cl_strategies import StrategyError, StrategyKind
from config import ConfigError, describe, load_config
from detector import DetectorError, build_detector, expand_head, set_freeze, set_split
from eval_metrics import (MetricsError, cost_ledger, distill_ratios, evaluate, freeze_sweep, nanodet_reference,
                          projected_buffer_bytes)
from scenario_data import ScenarioError, class_histogram, export_dataset, generate_dataset, load_dataset
from trainer import CSV_FIELDS, TrainingError, derive_seed, run_experiment, run_freeze_sweep, write_csv

ROOT = Path(__file__).resolve().parent
EXPECTED_ERRORS = (ConfigError, checkpoint.CheckpointError, ScenarioError, DetectorError, StrategyError,
                   MetricsError, TrainingError, AutodiffError)


def _map(v: str) -> str:
    return v if v else "-"


def cmd_gen_data(args) -> int:
    ds = generate_dataset(args.images, args.classes, args.seed)
    manifest = export_dataset(ds, Path(args.out))
    hist = class_histogram(ds.samples)
    print(tabulate([[c, n] for c, n in hist.items()], headers=["class", "objects"], tablefmt="fancy_grid"))
    print(f"Wrote {len(ds)} images ({sum(hist.values())} objects) to {manifest.parent}")
    return 0


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        print('Missing', cfg_path)
        raise SystemExit(1)
    cfg = load_config(cfg_path)
    if args.full_scale:
        cfg = cfg.with_full_scale()
    if args.output_dir:
        cfg = cfg.with_boundary(cfg.freeze_boundary, args.output_dir)
    print(tabulate(describe(cfg), tablefmt="fancy_grid"))

    if args.sweep_freeze:
        results = run_freeze_sweep(cfg, progress=args.progress)
        table = [[b] + [_map(r[k]) if k.endswith("map") else r[k] for k in ("task", "new_map", "all_map",
                                                                            "trainable_params", "bwd_macs")]
                 for b, art in results for r in art.rows]
        print(tabulate(table, headers=["boundary", "task", "new_map", "all_map", "trainable", "bwd_macs"],
                       tablefmt="fancy_grid"))
        print(f"Wrote {len(table)} rows to {Path(cfg.output_dir) / 'sweep.csv'}")
        return 0

    if args.resume and not Path(args.resume).exists():
        print('Missing', args.resume)
        raise SystemExit(1)
    art = run_experiment(cfg, resume=Path(args.resume) if args.resume else None, progress=args.progress)
    table = [[r["task"], r["strategy"], _map(r["old_map"]), _map(r["new_map"]), _map(r["all_map"]),
              r["overhead_params"], r["fwd_macs"], r["buffer_bytes"]] for r in art.rows]
    print(tabulate(table, headers=["task", "strategy", "old", "new", "all", "overhead", "fwd_macs", "buffer"],
                   tablefmt="fancy_grid"))
    print(f"Wrote {len(art.rows)} rows to {art.csv_path}")
    return 0


def cmd_eval(args) -> int:
    for p in (Path(args.checkpoint), Path(args.data)):
        if not p.exists():
            print('Missing', p)
            raise SystemExit(1)
    ckpt = checkpoint.load(Path(args.checkpoint))
    ds = load_dataset(Path(args.data))
    report = evaluate(ckpt.model, ds.samples, ckpt.state.old_range, ckpt.state.new_range, args.score_thr,
                      args.nms_iou)
    rows = [[c, f"{ap:.4f}", f"{report.per_class_ap50[c]:.4f}"] for c, ap in report.per_class_ap.items()]
    print(tabulate(rows, headers=["class", "mAP@[.5:.95]", "AP50"], tablefmt="fancy_grid"))
    summary = {k: ("-" if v is None else f"{v:.4f}") for k, v in
               (("old", report.old_map), ("new", report.new_map), ("all", report.all_map))}
    print(f"Old {summary['old']}  New {summary['new']}  All {summary['all']}  ({report.num_images} images)")
    if args.out:
        Path(args.out).write_text(yaml.safe_dump(report.to_dict(), sort_keys=True), encoding="utf-8")
        print('Wrote', args.out)
    return 0


def _final_model(cfg):
    """Detector as it looks on the last task: every class channel present, split/freeze at the boundary."""
    counts = cfg.scenario_spec.counts
    model = build_detector(cfg.detector_spec(), seed=derive_seed(cfg.seed, 0))
    if len(counts) > 1:
        model = expand_head(model, sum(counts[1:]), seed=0)
    return set_freeze(set_split(model, cfg.freeze_boundary), cfg.freeze_boundary)


def cmd_ledger(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        print('Missing', cfg_path)
        raise SystemExit(1)
    cfg = load_config(cfg_path)
    model = _final_model(cfg)
    payload: Dict[str, object] = {"config": str(cfg_path), "nanodet_reference": nanodet_reference()}

    if args.sweep_freeze:
        ld = freeze_sweep(model, StrategyKind.LATENT_DISTILL)
        classic = freeze_sweep(model, StrategyKind.SID)
        rows = []
        for a, b in zip(ld, classic):
            rows.append([a.boundary, a.trainable_params, a.cl_overhead_params, b.cl_overhead_params,
                         a.forward_macs_update, b.forward_macs_update, a.backward_macs_update,
                         f"{a.forward_macs_update / b.forward_macs_update:.3f}",
                         f"{a.update_macs / b.update_macs:.3f}"])
        print(tabulate(rows, headers=["boundary", "trainable", "ld_overhead", "classic_overhead", "ld_fwd",
                                      "classic_fwd", "bwd", "fwd_ratio", "update_ratio"], tablefmt="fancy_grid"))
        payload["sweep"] = [{"latent_distill": a.to_dict(), "classic": b.to_dict()} for a, b in zip(ld, classic)]
    else:
        ledgers = [replace(cost_ledger(model, k, cfg.freeze_boundary),
                           buffer_bytes=projected_buffer_bytes(model, k, cfg.cl.buffer_capacity, cfg.freeze_boundary))
                   for k in StrategyKind]
        rows = [[lg.strategy, lg.total_params, lg.trainable_params, lg.cl_overhead_params, lg.forward_macs_update,
                 lg.forward_flops, lg.backward_macs_update, lg.buffer_bytes] for lg in ledgers]
        print(tabulate(rows, headers=["strategy", "total", "trainable", "overhead", "fwd_macs", "fwd_flops",
                                      "bwd_macs", "buffer"], tablefmt="fancy_grid"))
        ratios = distill_ratios(model, cfg.freeze_boundary)
        print(tabulate([[k, f"{v:.4f}"] for k, v in ratios.items()], headers=["latent vs classic", "value"],
                       tablefmt="fancy_grid"))
        payload["ledgers"] = [lg.to_dict() for lg in ledgers]
        payload["ratios"] = ratios

    ref = nanodet_reference()
    own = distill_ratios(model, cfg.freeze_boundary)["update_ratio"]
    print(f"NanoDet split: parameter overhead reduction {ref['param_overhead_reduction']:.1%}, "
          f"reported FLOPs overhead {ref['reported_flops_overhead']:.0%} (this net: {own:.1%}), "
          f"250-image replay buffer {ref['replay_buffer_bytes_250x320'] / 1e6:.1f} MB")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")
        print('Wrote', args.out)
    return 0


def _read_results(run_dir: Path) -> List[Dict[str, str]]:
    path = run_dir / "results.csv"
    if not path.exists():
        print('Missing', path)
        raise SystemExit(1)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["run"] = run_dir.name
    return rows


def cmd_report(args) -> int:
    rows = [r for d in args.runs for r in _read_results(Path(d))]
    out = Path(args.out)
    write_csv(out / "comparison.csv", ["run"] + CSV_FIELDS, rows)

    # mAP after each task, and final All mAP against stored parameters
    per_task = [{"run": r["run"], "strategy": r["strategy"], "task": r["task"], "old_map": r["old_map"],
                 "new_map": r["new_map"], "all_map": r["all_map"]} for r in rows]
    write_csv(out / "map_per_task.csv", ["run", "strategy", "task", "old_map", "new_map", "all_map"], per_task)
    last: Dict[str, Dict[str, str]] = {}
    for r in rows:
        last[r["run"]] = r
    vs_params = [{"run": run, "strategy": r["strategy"],
                  "stored_params": str(int(r["total_params"]) + int(r["overhead_params"])),
                  "buffer_bytes": r["buffer_bytes"], "all_map": r["all_map"]} for run, r in last.items()]
    write_csv(out / "map_vs_params.csv", ["run", "strategy", "stored_params", "buffer_bytes", "all_map"], vs_params)

    table = [[r["run"], r["strategy"], r["task"], _map(r["old_map"]), _map(r["new_map"]), _map(r["all_map"])]
             for r in rows]
    print(tabulate(table, headers=["run", "strategy", "task", "old", "new", "all"], tablefmt="fancy_grid"))
    print(f"Wrote {len(rows)} rows to {out / 'comparison.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description="Class-incremental detection with latent distillation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and export a synthetic dataset")
    g.add_argument("--images", type=int, default=1000)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=str(ROOT / "data" / "train"))
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run a full experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--resume", default=None, help="task checkpoint to continue from")
    r.add_argument("--sweep-freeze", action="store_true", help="repeat the run for every freeze boundary")
    r.add_argument("--full-scale", action="store_true", help="warmup 500, 100 epochs, t_max 100")
    r.add_argument("--output-dir", default=None)
    r.add_argument("--progress", action="store_true", help="show tqdm progress bars")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an exported dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--score-thr", type=float, default=0.05)
    e.add_argument("--nms-iou", type=float, default=0.6)
    e.add_argument("--out", default=None, help="write the report as YAML")
    e.set_defaults(func=cmd_eval)

    lg = sub.add_parser("ledger", help="parameter / MAC / memory accounting, no training")
    lg.add_argument("--config", required=True)
    lg.add_argument("--sweep-freeze", action="store_true")
    lg.add_argument("--out", default=None)
    lg.set_defaults(func=cmd_ledger)

    rp = sub.add_parser("report", help="merge results.csv files of several runs")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", default=str(ROOT / "runs" / "report"))
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
