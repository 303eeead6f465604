"""cl_strategies.py

Continual-learning strategies for class-incremental detection.

    finetune        model loss on the new task only
    joint           model loss on every task seen so far (upper bound)
    replay          50/50 batches of task images and stored raw images
    latent_replay   same, but the buffer stores activations at the split point
    lwf             + alpha * MSE(student, full teacher) on logits and boxes
    sid             + alpha * (masked logit MSE + trunk MSE), full teacher
    latent_distill  sid's losses, but teacher and student share one frozen
                    lower-layer pass z = f(x); the teacher stores upper layers only

Class ids are 1-based and contiguous: old_range = [1..c], new_range = [c+1..c+k].
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import (Tensor, add, concat, mse, mul, scale, sigmoid, smooth_l1, softplus, square, sub,
                      sum_, take_channels)
from detector import (Detector, HeadOutputs, Latent, count_params, expand_head, forward, latent_forward,
                      set_freeze, set_split, snapshot_teacher, upper_forward)
from scenario_data import Annotation, ClassRange, Sample, TaskDataset, to_tensor

logger = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
DEFAULT_ALPHA = 1.0
DEFAULT_CAPACITY = 50


class StrategyError(RuntimeError):
    pass


class LossError(StrategyError, ValueError):
    pass


class NonFiniteLossError(LossError, ArithmeticError):
    pass


class StrategyKind(str, Enum):
    FINETUNE = "finetune"
    JOINT = "joint"
    REPLAY = "replay"
    LATENT_REPLAY = "latent_replay"
    LWF = "lwf"
    SID = "sid"
    LATENT_DISTILL = "latent_distill"

    @classmethod
    def parse(cls, name: str) -> "StrategyKind":
        try:
            return cls(str(name).lower())
        except ValueError:
            raise StrategyError(f"unknown strategy {name!r}; expected one of {[k.value for k in cls]}") from None

    @property
    def distills(self) -> bool:
        return self in (StrategyKind.LWF, StrategyKind.SID, StrategyKind.LATENT_DISTILL)

    @property
    def replays(self) -> bool:
        return self in (StrategyKind.REPLAY, StrategyKind.LATENT_REPLAY)

    @property
    def latent(self) -> bool:
        return self in (StrategyKind.LATENT_REPLAY, StrategyKind.LATENT_DISTILL)


# ---------------------------------------------------------------- state

class BufferEntry(NamedTuple):
    task: int
    image_id: int
    class_range: ClassRange
    annotations: Tuple[Annotation, ...]
    image: Optional[np.ndarray] = None   # uint8 [H,W,3]
    latent: Optional[np.ndarray] = None  # float64 [Cz,Hz,Wz]
    split_point: Optional[str] = None


@dataclass
class ReplayBuffer:
    capacity: int = DEFAULT_CAPACITY
    latent: bool = False
    entries: List[BufferEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise StrategyError(f"buffer capacity must be >= 1, got {self.capacity}")
        splits = {e.split_point for e in self.entries if e.latent is not None}
        if len(splits) > 1:
            raise StrategyError(f"latent buffer entries span several split points: {sorted(splits)}")
        if len(self.entries) > self.capacity:
            raise StrategyError(f"{len(self.entries)} entries exceed capacity {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def byte_size(self) -> int:
        return int(sum((e.latent if self.latent else e.image).nbytes for e in self.entries))

    @property
    def split_point(self) -> Optional[str]:
        return self.entries[0].split_point if self.latent and self.entries else None

    def provenance(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for e in self.entries:
            counts[e.task] = counts.get(e.task, 0) + 1
        return dict(sorted(counts.items()))


@dataclass
class StrategyState:
    kind: StrategyKind
    alpha: float
    old_range: ClassRange
    new_range: ClassRange
    teacher: Optional[Detector] = None
    buffer: Optional[ReplayBuffer] = None
    task_index: int = 0

    @property
    def seen_range(self) -> ClassRange:
        return ClassRange(1, self.new_range.last)


def initial_state(kind: Union[str, StrategyKind], first_k: int, alpha: float = DEFAULT_ALPHA,
                  capacity: int = DEFAULT_CAPACITY) -> StrategyState:
    kind = StrategyKind.parse(kind)
    if first_k < 1:
        raise StrategyError(f"first task needs >= 1 class, got {first_k}")
    if not alpha >= 0:
        raise StrategyError(f"alpha must be >= 0, got {alpha}")
    buffer = ReplayBuffer(capacity, latent=kind is StrategyKind.LATENT_REPLAY) if kind.replays else None
    return StrategyState(kind, float(alpha), ClassRange(1, 0), ClassRange(1, first_k), buffer=buffer)


# ---------------------------------------------------------------- losses

class LossBreakdown(NamedTuple):
    model_loss: Tensor
    distill_loss: Tensor
    intermediate_loss: Tensor
    total: Tensor
    alpha: float

    def values(self) -> Dict[str, float]:
        return {
            "total": self.total.item(),
            "model": self.model_loss.item(),
            "distill": self.distill_loss.item(),
            "intermediate": self.intermediate_loss.item(),
        }


def _zero() -> Tensor:
    return Tensor(0.0)


def breakdown(model_loss: Tensor, distill_loss: Optional[Tensor] = None,
              intermediate_loss: Optional[Tensor] = None, alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    distill_loss = distill_loss if distill_loss is not None else _zero()
    intermediate_loss = intermediate_loss if intermediate_loss is not None else _zero()
    total = add(model_loss, scale(add(distill_loss, intermediate_loss), alpha))
    values = (model_loss.item(), distill_loss.item(), intermediate_loss.item(), total.item())
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteLossError(f"non-finite loss terms (model, distill, intermediate, total) = {values}")
    return LossBreakdown(model_loss, distill_loss, intermediate_loss, total, float(alpha))


def assign_targets(targets: Sequence[Sequence[Annotation]], num_classes: int, grid: int,
                   stride: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell class targets [B,C,S,S], box distances [B,4,S,S] and positive mask [B,S,S].

    A cell is positive for a box when its center lies strictly inside it; the
    smallest box wins ties. A box covering no center claims the cell holding
    its own center.
    """
    batch = len(targets)
    cls_t = np.zeros((batch, num_classes, grid, grid))
    box_t = np.zeros((batch, 4, grid, grid))
    pos = np.zeros((batch, grid, grid), dtype=bool)
    centers = (np.arange(grid) + 0.5) * stride
    cx = np.broadcast_to(centers[None, :], (grid, grid))
    cy = np.broadcast_to(centers[:, None], (grid, grid))

    for b, annotations in enumerate(targets):
        best_area = np.full((grid, grid), np.inf)
        owner = np.full((grid, grid), -1)
        for idx, a in enumerate(annotations):
            x1, y1, x2, y2 = a.box
            inside = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
            if not inside.any():
                i = min(grid - 1, max(0, int(((y1 + y2) / 2) // stride)))
                j = min(grid - 1, max(0, int(((x1 + x2) / 2) // stride)))
                inside = np.zeros((grid, grid), dtype=bool)
                inside[i, j] = True
            area = (x2 - x1) * (y2 - y1)
            take = inside & (area < best_area)
            best_area[take] = area
            owner[take] = idx
        for i, j in zip(*np.nonzero(owner >= 0)):
            a = annotations[owner[i, j]]
            x1, y1, x2, y2 = a.box
            cls_t[b, a.class_id - 1, i, j] = 1.0
            box_t[b, :, i, j] = (cx[i, j] - x1, cy[i, j] - y1, x2 - cx[i, j], y2 - cy[i, j])
            pos[b, i, j] = True
    return cls_t, box_t, pos


def _range_mask(ranges: Sequence[ClassRange], num_classes: int, grid: int) -> np.ndarray:
    mask = np.zeros((len(ranges), num_classes, grid, grid))
    for b, r in enumerate(ranges):
        if not r.empty:
            mask[b, r.first - 1:r.last] = 1.0
    return mask


def detection_loss(out: HeadOutputs, targets: Sequence[Sequence[Annotation]],
                   class_range: Union[ClassRange, Sequence[ClassRange]]) -> Tensor:
    """Sigmoid focal loss on in-range class channels plus smooth-L1 box loss on positive cells.

    ``class_range`` is one range for the whole batch or one per image. Both
    terms are summed and divided by max(1, number of positive cells).
    """
    batch, num_classes, grid, _ = out.class_logits.shape
    if len(targets) != batch:
        raise LossError(f"{len(targets)} target lists for a batch of {batch}")
    ranges = [class_range] * batch if isinstance(class_range, ClassRange) else list(class_range)
    if len(ranges) != batch:
        raise LossError(f"{len(ranges)} class ranges for a batch of {batch}")
    for b, (r, annotations) in enumerate(zip(ranges, targets)):
        if r.last > num_classes:
            raise LossError(f"class range {r} exceeds the head's {num_classes} channels")
        for a in annotations:
            if a.class_id not in r:
                raise LossError(f"image {b}: target class {a.class_id} outside supervised range {r}")

    cls_t, box_t, pos = assign_targets(targets, num_classes, grid, out.stride)
    mask = _range_mask(ranges, num_classes, grid)
    npos = max(1, int(pos.sum()))

    x = out.class_logits
    neg_x = -x
    pos_term = mul(square(sigmoid(neg_x)), softplus(neg_x))  # (1-p)^2 * -log p
    neg_term = mul(square(sigmoid(x)), softplus(x))          # p^2 * -log(1-p)
    w_pos = Tensor(FOCAL_ALPHA * cls_t * mask)
    w_neg = Tensor((1.0 - FOCAL_ALPHA) * (1.0 - cls_t) * mask)
    focal = sum_(add(mul(pos_term, w_pos), mul(neg_term, w_neg)))

    stride = float(out.stride)
    pos4 = Tensor(np.repeat(pos[:, None].astype(np.float64), 4, axis=1))
    diff = sub(scale(out.box_regress, 1.0 / stride), Tensor(box_t / stride))
    box = sum_(mul(smooth_l1(diff), pos4))
    return scale(add(focal, box), 1.0 / npos)


def masked_distill_loss(student: HeadOutputs, teacher: HeadOutputs, old_range: ClassRange) -> Tensor:
    """MSE between class logits on the old classes only; boxes and new channels are ignored."""
    t_classes = teacher.class_logits.shape[1]
    if old_range.empty or old_range.last > t_classes:
        raise LossError(f"old range {old_range} must be non-empty and within the teacher's {t_classes} channels")
    if student.class_logits.shape[1] < t_classes:
        raise LossError(f"student has {student.class_logits.shape[1]} class channels, teacher {t_classes}")
    lo, hi = old_range.first - 1, old_range.last
    return mse(take_channels(student.class_logits, lo, hi), take_channels(teacher.class_logits, lo, hi))


def lwf_distill_loss(student: HeadOutputs, teacher: HeadOutputs) -> Tensor:
    """MSE over the teacher's class logits plus MSE over box distances in stride units."""
    t_classes = teacher.class_logits.shape[1]
    if student.class_logits.shape[1] < t_classes or student.box_regress.shape != teacher.box_regress.shape:
        raise LossError(f"student outputs {student.class_logits.shape}/{student.box_regress.shape} do not cover "
                        f"teacher outputs {teacher.class_logits.shape}/{teacher.box_regress.shape}")
    logits = mse(take_channels(student.class_logits, 0, t_classes), teacher.class_logits)
    inv = 1.0 / float(student.stride)
    boxes = mse(scale(student.box_regress, inv), scale(teacher.box_regress, inv))
    return add(logits, boxes)


def intermediate_distill_loss(student_trunk: Tensor, teacher_trunk: Tensor) -> Tensor:
    if student_trunk.shape != teacher_trunk.shape:
        raise LossError(f"trunk shapes differ: {student_trunk.shape} vs {teacher_trunk.shape}")
    return mse(student_trunk, teacher_trunk)


# ---------------------------------------------------------------- batches

class BatchItem(NamedTuple):
    annotations: Tuple[Annotation, ...]
    class_range: ClassRange
    image: Optional[np.ndarray] = None
    latent: Optional[np.ndarray] = None
    from_buffer: bool = False
    split_point: Optional[str] = None


class TrainBatch(NamedTuple):
    items: List[BatchItem]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def buffer_count(self) -> int:
        return sum(1 for it in self.items if it.from_buffer)


def supervised_range(state: StrategyState) -> ClassRange:
    """Classes the model loss covers on current-task images."""
    return state.new_range if state.kind.distills else state.seen_range


def compose_batch(state: StrategyState, task_batch: Sequence[Sample], seed: int) -> TrainBatch:
    """Task samples, then as many buffer samples (replay kinds, once the buffer holds anything)."""
    rng_range = supervised_range(state)
    items = [BatchItem(s.annotations, rng_range, image=s.image) for s in task_batch]
    if not state.kind.replays:
        return TrainBatch(items)
    buffer = state.buffer
    if buffer is None or not buffer.entries:
        if state.task_index > 0:
            raise StrategyError(f"{state.kind.value} needs a non-empty buffer at task {state.task_index}")
        return TrainBatch(items)

    n = len(items)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(buffer.entries), size=n, replace=n > len(buffer.entries))
    for i in picks:
        e = buffer.entries[int(i)]
        items.append(BatchItem(e.annotations, e.class_range, image=e.image, latent=e.latent,
                               from_buffer=True, split_point=e.split_point))
    return TrainBatch(items)


# ---------------------------------------------------------------- strategy loss

def _heads(state: StrategyState, student: Detector, batch: TrainBatch) -> Tuple[HeadOutputs, Optional[HeadOutputs]]:
    kind = state.kind
    if kind.distills and state.task_index > 0 and state.teacher is None:
        raise StrategyError(f"{kind.value} has no teacher at task {state.task_index}")
    teacher = state.teacher if kind.distills else None

    raw = [it for it in batch.items if it.latent is None]
    stored = [it for it in batch.items if it.latent is not None]
    if stored:
        flags = [it.latent is not None for it in batch.items]
        if flags != sorted(flags):
            raise StrategyError("latent entries must follow the image entries in a batch")
        for it in stored:
            if it.split_point != student.split_point:
                raise StrategyError(f"buffer latent from split {it.split_point!r}, model splits at {student.split_point!r}")
        parts = []
        if raw:
            parts.append(latent_forward(student, to_tensor([it.image for it in raw])).features)
        parts.append(Tensor(np.stack([it.latent for it in stored])))
        z = Latent(concat(parts, axis=0) if len(parts) > 1 else parts[0], student.split_point)
        return upper_forward(student, z), None

    x = to_tensor([it.image for it in raw])
    if kind is StrategyKind.LATENT_DISTILL and teacher is not None:
        z = latent_forward(student, x)
        return upper_forward(student, z), upper_forward(teacher, z)
    out = forward(student, x)
    return out, (forward(teacher, x) if teacher is not None else None)


def strategy_loss(state: StrategyState, student: Detector, batch: TrainBatch) -> LossBreakdown:
    if not batch.items:
        raise StrategyError("empty training batch")
    out, t_out = _heads(state, student, batch)
    model_loss = detection_loss(out, [it.annotations for it in batch.items], [it.class_range for it in batch.items])
    if t_out is None:
        return breakdown(model_loss, alpha=state.alpha)
    if state.kind is StrategyKind.LWF:
        return breakdown(model_loss, lwf_distill_loss(out, t_out), alpha=state.alpha)
    return breakdown(model_loss,
                     masked_distill_loss(out, t_out, state.old_range),
                     intermediate_distill_loss(out.trunk_features, t_out.trunk_features),
                     alpha=state.alpha)


# ---------------------------------------------------------------- task transitions

def _latents(model: Detector, samples: Sequence[Sample], chunk: int = 64) -> List[np.ndarray]:
    out: List[np.ndarray] = []
    for start in range(0, len(samples), chunk):
        z = latent_forward(model, to_tensor([s.image for s in samples[start:start + chunk]]))
        out.extend(np.array(f) for f in z.features.data)
    return out


def update_buffer(state: StrategyState, task: TaskDataset, seed: int,
                  model: Optional[Detector] = None) -> StrategyState:
    """Fill the buffer after task 0; afterwards replace ceil(capacity/2) entries with new-task samples."""
    if not state.kind.replays or state.buffer is None:
        return state
    buffer = state.buffer
    if buffer.latent and model is None:
        raise StrategyError("latent replay needs the model to compute buffer activations")
    rng = np.random.default_rng(seed)
    entries = list(buffer.entries)
    want = buffer.capacity if not entries else math.ceil(buffer.capacity / 2)
    want = min(want, len(task.samples))
    chosen = [task.samples[int(i)] for i in sorted(rng.choice(len(task.samples), size=want, replace=False))]

    latents = _latents(model, chosen) if buffer.latent else [None] * len(chosen)
    split = model.split_point if buffer.latent else None
    new = [BufferEntry(task.index, s.image_id, task.visible, s.annotations,
                       image=None if buffer.latent else s.image, latent=z, split_point=split)
           for s, z in zip(chosen, latents)]

    # overflow replaces entries from earlier tasks only, never ones added here
    kept = len(entries)
    room = buffer.capacity - kept
    entries.extend(new[:room])
    rest = new[room:]
    if rest:
        slots = sorted(int(i) for i in rng.choice(kept, size=len(rest), replace=False))
        for slot, e in zip(slots, rest):
            entries[slot] = e
    refreshed = ReplayBuffer(buffer.capacity, buffer.latent, entries)
    logger.info("buffer after task %d: %d/%d entries, %d bytes, provenance %s", task.index, len(refreshed),
                refreshed.capacity, refreshed.byte_size, refreshed.provenance())
    return replace(state, buffer=refreshed)


def finalize_task(state: StrategyState, model: Detector, finished_task: TaskDataset, next_k: int, seed: int,
                  freeze_boundary: Optional[str] = None) -> Tuple[Detector, StrategyState]:
    """Close the finished task and prepare the model and state for the next one.

    Latent kinds split and freeze at ``freeze_boundary`` (default: backbone
    top); other kinds keep the whole model trainable.
    """
    if int(next_k) != next_k or next_k < 1:
        raise StrategyError(f"next task needs >= 1 new class, got {next_k}")
    kind = state.kind
    boundary = freeze_boundary or model.spec.top
    if kind.latent:
        model = set_split(model, boundary)

    teacher = state.teacher
    if kind.distills:
        teacher = snapshot_teacher(model, upper_only=kind is StrategyKind.LATENT_DISTILL)
    state = update_buffer(state, finished_task, seed, model)

    model = expand_head(model, next_k, seed + 1)
    model = set_freeze(model, boundary if kind.latent else "none")
    last = state.new_range.last
    state = replace(state, teacher=teacher, old_range=ClassRange(1, last),
                    new_range=ClassRange(last + 1, last + next_k), task_index=state.task_index + 1)
    logger.info("finalized task %d (%s): old %s new %s, trainable %d/%d params", finished_task.index, kind.value,
                state.old_range, state.new_range, count_params(model.params, model.trainable_names()),
                count_params(model.params))
    return model, state
