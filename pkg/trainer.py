"""trainer.py

AdamW, the warmup + cosine schedule, the per-task training loop and the
experiment runner.

run_experiment(cfg) writes into cfg.output_dir:
  results.csv              one row per task (schema in CSV_FIELDS)
  curves.csv               per-step lr and loss terms
  epoch_curves.csv         per-epoch mean losses
  reports/task_<n>.yaml    EvalReport + CostLedger of task n
  checkpoints/task_<n>.ckpt  model and strategy state after task n (resume point)

Every random draw is seeded from (seed, task, epoch, step), so a run and a
run resumed from any task checkpoint produce identical files.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

import checkpoint
from autodiff import Tape, Tensor
from cl_strategies import (NonFiniteLossError, StrategyKind, StrategyState, compose_batch, finalize_task,
                           initial_state, strategy_loss)
from config import ExperimentConfig, Hyperparams, config_from_dict
from detector import Detector, build_detector, replace_params
from eval_metrics import EvalReport, cost_ledger, evaluate, write_report
from scenario_data import TaskDataset, batch_iter, generate_dataset, joint_task, split_tasks

logger = logging.getLogger(__name__)

CSV_FIELDS = ["task", "strategy", "old_map", "new_map", "all_map", "trainable_params", "total_params",
              "overhead_params", "fwd_macs", "bwd_macs", "buffer_bytes"]
CURVE_FIELDS = ["task", "epoch", "step", "lr", "total", "model", "distill", "intermediate"]
EPOCH_FIELDS = ["task", "epoch", "total", "model", "distill", "intermediate"]


class TrainingError(RuntimeError):
    pass


class NonFiniteError(TrainingError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0


def new_adam_state(model: Detector) -> AdamState:
    """Fresh moments, for trainable parameters only."""
    names = model.trainable_names()
    return AdamState({n: np.zeros(model.params[n].shape) for n in names},
                     {n: np.zeros(model.params[n].shape) for n in names})


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
               hp: Hyperparams) -> Tuple[Dict[str, Tensor], AdamState]:
    """Decoupled weight decay: p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p."""
    if set(grads) != set(state.m):
        raise TrainingError(f"gradients for {sorted(set(grads) ^ set(state.m))} do not match the optimizer state")
    b1, b2 = hp.betas
    t = state.step + 1
    new_params: Dict[str, Tensor] = {}
    m_out: Dict[str, np.ndarray] = {}
    v_out: Dict[str, np.ndarray] = {}
    for name in sorted(grads):
        p, g = params[name], np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise TrainingError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"{name}: {bad} non-finite gradient entries at optimizer step {t}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        data = p.data - lr * (m_hat / (np.sqrt(v_hat) + hp.eps)) - lr * hp.weight_decay * p.data
        new_params[name] = Tensor(data, requires_grad=True)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


def lr_at(step: int, epoch: int, hp: Hyperparams) -> float:
    """Linear warmup over the first warmup_steps, then cosine over epochs."""
    if step < 0:
        raise TrainingError(f"step must be >= 0, got {step}")
    if step < hp.warmup_steps:
        return hp.base_lr * (step + 1) / hp.warmup_steps
    return hp.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / hp.t_max))


# ---------------------------------------------------------------- training loop

@dataclass
class TaskCurves:
    steps: List[Dict[str, Any]] = field(default_factory=list)
    epochs: List[Dict[str, Any]] = field(default_factory=list)


def _dump(path: Optional[Path], model: Detector, state: StrategyState, reason: str) -> None:
    if path is None:
        return
    checkpoint.save(path, model, state, {"reason": reason})
    logger.error("dumped diverged model to %s", path)


def train_task(model: Detector, state: StrategyState, task: TaskDataset, hp: Hyperparams, seed: int,
               dump_path: Optional[Path] = None, progress: bool = False) -> Tuple[Detector, TaskCurves]:
    """epochs_per_task epochs of compose_batch -> strategy_loss -> backward -> adamw_step."""
    curves = TaskCurves()
    adam = new_adam_state(model)
    trainable = model.trainable_names()
    steps_per_epoch = math.ceil(len(task) / hp.batch_size)
    if hp.epochs_per_task and hp.warmup_steps >= steps_per_epoch * hp.epochs_per_task:
        logger.warning("warmup of %d steps covers the whole task (%d steps)", hp.warmup_steps,
                       steps_per_epoch * hp.epochs_per_task)
    warned: set = set()
    step = 0
    epochs = tqdm(range(hp.epochs_per_task), desc=f"task {task.index}", unit="epoch", disable=not progress)
    for epoch in epochs:
        sums = {"total": 0.0, "model": 0.0, "distill": 0.0, "intermediate": 0.0}
        n_batches = 0
        for samples in batch_iter(task, hp.batch_size, derive_seed(seed, task.index, epoch)):
            lr = lr_at(step, epoch, hp)
            batch = compose_batch(state, samples, derive_seed(seed, task.index, epoch, step))
            try:
                with Tape() as tape:
                    losses = strategy_loss(state, model, batch)
                grads = tape.gradients(losses.total, model.params)
                for name in trainable:
                    if name not in grads:
                        if name not in warned:
                            logger.warning("%s is trainable but unreachable from the loss; using zero gradient", name)
                            warned.add(name)
                        grads[name] = np.zeros(model.params[name].shape)
                updated, adam = adamw_step(model.params, grads, adam, lr, hp)
            except (NonFiniteLossError, NonFiniteError) as exc:
                _dump(dump_path, model, state, str(exc))
                raise NonFiniteError(f"task {task.index} epoch {epoch} step {step}: {exc}") from exc
            model = replace_params(model, updated)

            values = losses.values()
            curves.steps.append({"task": task.index, "epoch": epoch, "step": step, "lr": lr, **values})
            for k in sums:
                sums[k] += values[k]
            n_batches += 1
            step += 1
        means = {k: v / n_batches for k, v in sums.items()}
        curves.epochs.append({"task": task.index, "epoch": epoch, **means})
        epochs.set_postfix(loss=f"{means['total']:.4f}")
        logger.info("task %d epoch %d/%d: loss %.5f (model %.5f distill %.5f intermediate %.5f)", task.index,
                    epoch + 1, hp.epochs_per_task, means["total"], means["model"], means["distill"],
                    means["intermediate"])
    return model, curves


# ---------------------------------------------------------------- experiment runner

@dataclass
class RunArtifacts:
    output_dir: Path
    rows: List[Dict[str, str]]
    csv_path: Path
    curves_path: Path
    epoch_curves_path: Path
    checkpoints: List[Path] = field(default_factory=list)
    reports: List[Path] = field(default_factory=list)


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def _fmt_curve(row: Dict[str, Any]) -> Dict[str, str]:
    return {k: (f"{v:.8g}" if isinstance(v, float) else str(v)) for k, v in row.items()}


def result_row(task: int, kind: StrategyKind, report: EvalReport, ledger) -> Dict[str, str]:
    return {
        "task": str(task),
        "strategy": kind.value,
        "old_map": _fmt(report.old_map),
        "new_map": _fmt(report.new_map),
        "all_map": _fmt(report.all_map),
        "trainable_params": str(ledger.trainable_params),
        "total_params": str(ledger.total_params),
        "overhead_params": str(ledger.cl_overhead_params),
        "fwd_macs": str(ledger.forward_macs_update),
        "bwd_macs": str(ledger.backward_macs_update),
        "buffer_bytes": str(ledger.buffer_bytes),
    }


def write_csv(path: Path, fields: List[str], rows: List[Dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def config_changes(old: ExperimentConfig, new: ExperimentConfig) -> List[str]:
    """Dotted names of the fields that differ, e.g. ['hp.batch_size']."""
    a, b = old.to_dict(), new.to_dict()
    changed = []
    for key in b:
        if isinstance(b[key], dict):
            changed.extend(f"{key}.{k}" for k in b[key] if a[key].get(k) != b[key][k])
        elif a[key] != b[key]:
            changed.append(key)
    return changed


def run_experiment(cfg: ExperimentConfig, resume: Optional[Path] = None, progress: bool = False) -> RunArtifacts:
    kind = cfg.kind
    scenario = cfg.scenario_spec
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_ds = generate_dataset(cfg.data.train_images, cfg.data.num_classes, cfg.data.seed)
    test_ds = generate_dataset(cfg.data.test_images, cfg.data.num_classes, cfg.data.test_seed)
    tasks = split_tasks(train_ds, scenario)

    rows: List[Dict[str, str]] = []
    step_rows: List[Dict[str, str]] = []
    epoch_rows: List[Dict[str, str]] = []
    start = 0
    if resume is not None:
        ckpt = checkpoint.load(resume)
        meta = ckpt.metadata
        try:
            stored = config_from_dict(meta["config"])
        except (KeyError, TypeError) as exc:
            raise TrainingError(f"{resume} carries no usable run config ({exc})") from None
        if stored.digest() != cfg.digest():
            raise TrainingError(f"{resume} was written by a different config; changed: "
                                f"{', '.join(config_changes(stored, cfg))}")
        model, state = ckpt.model, ckpt.state
        rows, step_rows, epoch_rows = meta["rows"], meta["curves"], meta["epoch_curves"]
        start = meta["task"] + 1
        logger.info("resuming %s after task %d", cfg.output_dir, meta["task"])
    else:
        model = build_detector(cfg.detector_spec(), seed=derive_seed(cfg.seed, 0))
        state = initial_state(kind, scenario.counts[0], cfg.cl.alpha, cfg.cl.buffer_capacity)

    artifacts = RunArtifacts(out, rows, out / "results.csv", out / "curves.csv", out / "epoch_curves.csv")
    for n in range(start, len(tasks)):
        if n > 0:
            model, state = finalize_task(state, model, tasks[n - 1], scenario.counts[n],
                                         seed=derive_seed(cfg.seed, n, 1), freeze_boundary=cfg.freeze_boundary)
        task = joint_task(tasks, n) if kind is StrategyKind.JOINT else tasks[n]
        logger.info("task %d: %s on classes %s, %d images", n, kind.value, task.visible, len(task))
        model, curves = train_task(model, state, task, cfg.hp, seed=derive_seed(cfg.seed, n, 2),
                                   dump_path=out / "diverged.ckpt", progress=progress)

        report = evaluate(model, test_ds.samples, state.old_range, state.new_range, cfg.eval.score_thr,
                          cfg.eval.nms_iou)
        ledger = cost_ledger(model, kind, model.frozen_boundary, n, state.buffer)
        rows.append(result_row(n, kind, report, ledger))
        step_rows.extend(_fmt_curve(r) for r in curves.steps)
        epoch_rows.extend(_fmt_curve(r) for r in curves.epochs)

        write_csv(artifacts.csv_path, CSV_FIELDS, rows)
        write_csv(artifacts.curves_path, CURVE_FIELDS, step_rows)
        write_csv(artifacts.epoch_curves_path, EPOCH_FIELDS, epoch_rows)
        artifacts.reports.append(write_report(out / "reports" / f"task_{n}.yaml", report, ledger, task=n,
                                              strategy=kind.value, classes=[state.old_range.last + 1,
                                                                            state.new_range.last]))
        meta = {"task": n, "class_count": model.num_classes, "config": cfg.to_dict(), "config_digest": cfg.digest(),
                "rows": rows, "curves": step_rows, "epoch_curves": epoch_rows}
        artifacts.checkpoints.append(checkpoint.save(out / "checkpoints" / f"task_{n}.ckpt", model, state, meta))
        logger.info("task %d done: old %s new %s all %s", n, rows[-1]["old_map"] or "-", rows[-1]["new_map"],
                    rows[-1]["all_map"])
    return artifacts


def run_freeze_sweep(cfg: ExperimentConfig, progress: bool = False) -> List[Tuple[str, RunArtifacts]]:
    """The same experiment once per freeze boundary, each in <output_dir>/freeze_<boundary>."""
    results = []
    sweep_rows = []
    for boundary in cfg.detector_spec().boundaries:
        sub = cfg.with_boundary(boundary, str(Path(cfg.output_dir) / f"freeze_{boundary}"))
        art = run_experiment(sub, progress=progress)
        results.append((boundary, art))
        sweep_rows.extend({"boundary": boundary, **row} for row in art.rows)
    write_csv(Path(cfg.output_dir) / "sweep.csv", ["boundary"] + CSV_FIELDS, sweep_rows)
    return results
