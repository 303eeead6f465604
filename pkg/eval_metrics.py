"""eval_metrics.py

Detection metrics and the training-cost ledger.

mAP follows the COCO protocol: per class, AP at IoU 0.50:0.05:0.95 with
101-point interpolated precision, averaged over thresholds; classes without
ground truth in the evaluation set are left out of every mean. Old/New/All
are means over the previous-task, current-task and all seen classes.

The ledger counts exact parameters and multiply-accumulates from layer
shapes. With F the MACs of the frozen lower layers and H those above:

    classic distillation (lwf, sid)   forward 2(F+H)   extra params |f|+|h|
    latent distillation               forward F+2H     extra params |h|
    replay                            forward 2(F+H)   (a buffer image per task image)
    latent replay                     forward F+2H     (buffer latents skip f)

Backward cost is modelled as twice the forward MACs of trainable layers.
FLOPs are reported as 2 * MACs.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from cl_strategies import ReplayBuffer, StrategyKind
from detector import ConvLayer, Detection, Detector, decode_detections, forward, latent_shape, layer_geometry
from detector import count_params as detector_params
from scenario_data import ClassRange, Sample, to_tensor

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

# reported NanoDet split: 1.2M total parameters, 309K above the backbone.
# The FLOPs figure is a published measurement, not derived here; the ledger
# computes the same ratio for the configured net (distill_ratios update_ratio).
NANODET_TOTAL_PARAMS = 1_200_000
NANODET_UPPER_PARAMS = 309_000
NANODET_REPORTED_FLOPS_OVERHEAD = 0.44


class MetricsError(ValueError):
    pass


Box = Tuple[float, float, float, float]


def _check_box(box: Sequence[float]) -> None:
    if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
        raise MetricsError(f"degenerate box {tuple(box)}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    _check_box(a)
    _check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


class ScoredBox(NamedTuple):
    image_id: int
    box: Box
    score: float


class GroundTruth(NamedTuple):
    image_id: int
    box: Box


def match_detections(dets: Sequence[ScoredBox], gts: Sequence[GroundTruth], iou_thr: float) -> np.ndarray:
    """True-positive flags for ``dets`` in descending-score order (stable on ties)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_image: Dict[int, List[int]] = {}
    for g, gt in enumerate(gts):
        by_image.setdefault(gt.image_id, []).append(g)
    used = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_g = -1.0, -1
        for g in by_image.get(d.image_id, ()):
            if used[g]:
                continue
            v = iou(d.box, gts[g].box)
            if v > best:
                best, best_g = v, g
        if best_g >= 0 and best >= iou_thr:
            used[best_g] = True
            tp[rank] = True
    return tp


def average_precision(dets: Sequence[ScoredBox], gts: Sequence[GroundTruth], iou_thr: float) -> float:
    """101-point interpolated AP at one IoU threshold; 0.0 when there is no ground truth."""
    if not gts or not dets:
        return 0.0
    tp = match_detections(dets, gts, iou_thr)
    tp_cum = np.cumsum(tp)
    recall = tp_cum / len(gts)
    precision = tp_cum / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = [float(envelope[i]) if i < len(envelope) else 0.0 for i in idx]
    return math.fsum(interp) / len(RECALL_POINTS)


@dataclass
class EvalReport:
    per_class_ap: Dict[int, float]
    old_map: Optional[float]
    new_map: Optional[float]
    all_map: Optional[float]
    num_images: int
    per_class_ap50: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "old_map": self.old_map,
            "new_map": self.new_map,
            "all_map": self.all_map,
            "num_images": self.num_images,
            "per_class_ap": {int(k): float(v) for k, v in self.per_class_ap.items()},
            "per_class_ap50": {int(k): float(v) for k, v in self.per_class_ap50.items()},
        }


def _mean_over(per_class: Dict[int, float], r: ClassRange) -> Optional[float]:
    vals = [per_class[c] for c in r.ids() if c in per_class]
    return math.fsum(vals) / len(vals) if vals else None


def evaluate_detections(detections: Sequence[Sequence[Detection]], samples: Sequence[Sample],
                        old_range: ClassRange, new_range: ClassRange) -> EvalReport:
    """Score per-image detections against the samples' full annotations."""
    if not samples:
        raise MetricsError("cannot evaluate on an empty dataset")
    if len(detections) != len(samples):
        raise MetricsError(f"{len(detections)} detection lists for {len(samples)} images")
    seen = ClassRange(1, new_range.last)

    per_class: Dict[int, float] = {}
    per_class50: Dict[int, float] = {}
    for c in seen.ids():
        gts = [GroundTruth(s.image_id, a.box) for s in samples for a in s.annotations if a.class_id == c]
        if not gts:
            continue
        dets = [ScoredBox(s.image_id, d.box, d.score)
                for s, per_image in zip(samples, detections) for d in per_image if d.class_id == c]
        aps = [average_precision(dets, gts, t) for t in IOU_THRESHOLDS]
        per_class[c] = math.fsum(aps) / len(aps)
        per_class50[c] = aps[0]

    report = EvalReport(per_class, _mean_over(per_class, old_range) if not old_range.empty else None,
                        _mean_over(per_class, new_range), _mean_over(per_class, seen), len(samples), per_class50)
    logger.debug("evaluated %d images: %s", len(samples), report.to_dict())
    return report


def predict(model: Detector, samples: Sequence[Sample], score_thr: float = 0.05, nms_iou: float = 0.6,
            batch_size: int = 64) -> List[List[Detection]]:
    out: List[List[Detection]] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out.extend(decode_detections(forward(model, to_tensor([s.image for s in chunk])), score_thr, nms_iou))
    return out


def evaluate(model: Detector, samples: Sequence[Sample], old_range: ClassRange, new_range: ClassRange,
             score_thr: float = 0.05, nms_iou: float = 0.6) -> EvalReport:
    """mAP of ``model`` on fully annotated samples, split by the current class ranges."""
    if not samples:
        raise MetricsError("cannot evaluate on an empty dataset")
    if new_range.last > model.num_classes:
        raise MetricsError(f"class range {new_range} exceeds the model's {model.num_classes} classes")
    return evaluate_detections(predict(model, samples, score_thr, nms_iou), samples, old_range, new_range)


# ---------------------------------------------------------------- cost ledger

def conv_macs(layer: ConvLayer, out_h: int, out_w: int, batch: int = 1) -> int:
    return batch * layer.cout * out_h * out_w * layer.cin * layer.kernel * layer.kernel


def layer_macs(d: Detector) -> List[Tuple[ConvLayer, int]]:
    return [(layer, conv_macs(layer, h, w)) for layer, h, w in layer_geometry(d.spec)]


@dataclass
class CostLedger:
    strategy: str
    boundary: str
    total_params: int
    trainable_params: int
    cl_overhead_params: int
    lower_params: int
    upper_params: int
    lower_macs: int
    upper_macs: int
    forward_macs_update: int
    backward_macs_update: int
    buffer_bytes: int = 0

    @property
    def forward_flops(self) -> int:
        return 2 * self.forward_macs_update

    @property
    def backward_flops(self) -> int:
        return 2 * self.backward_macs_update

    @property
    def update_macs(self) -> int:
        return self.forward_macs_update + self.backward_macs_update

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(forward_flops=self.forward_flops, backward_flops=self.backward_flops)
        return d


def _split_counts(d: Detector, boundary: str) -> Tuple[int, int]:
    return (detector_params(d.params, d.names_at_or_below(boundary)),
            detector_params(d.params, d.names_above(boundary)))


def count_params(d: Detector, kind: Union[str, StrategyKind], boundary: Optional[str] = None,
                 task_index: int = 1) -> Dict[str, int]:
    """Parameter fields of the ledger for an update with everything at or below ``boundary`` frozen."""
    kind = StrategyKind.parse(kind)
    boundary = boundary or d.spec.top
    lower, upper = _split_counts(d, boundary)
    total = lower + upper
    overhead = 0
    if kind.distills and task_index > 0:
        overhead = upper if kind is StrategyKind.LATENT_DISTILL else total
    return {"total_params": total, "trainable_params": upper, "cl_overhead_params": overhead,
            "lower_params": lower, "upper_params": upper}


def count_macs(d: Detector, kind: Union[str, StrategyKind], boundary: Optional[str] = None,
               task_index: int = 1) -> Dict[str, int]:
    """Per-training-example MACs of one model update."""
    kind = StrategyKind.parse(kind)
    boundary = boundary or d.spec.top
    level = d.spec.level(boundary)
    f = sum(m for layer, m in layer_macs(d) if layer.level <= level)
    h = sum(m for layer, m in layer_macs(d) if layer.level > level)

    student_passes = 1
    forward_macs = f + h
    if task_index > 0:
        if kind in (StrategyKind.LWF, StrategyKind.SID, StrategyKind.REPLAY):
            forward_macs = 2 * (f + h)
        elif kind in (StrategyKind.LATENT_DISTILL, StrategyKind.LATENT_REPLAY):
            forward_macs = f + 2 * h
        if kind.replays:
            student_passes = 2
    return {"lower_macs": f, "upper_macs": h, "forward_macs_update": forward_macs,
            "backward_macs_update": 2 * h * student_passes}


def buffer_memory(buffer: Optional[ReplayBuffer]) -> int:
    return 0 if buffer is None else buffer.byte_size


def raw_buffer_bytes(num_images: int, height: int, width: int, channels: int = 3) -> int:
    return num_images * height * width * channels


def latent_buffer_bytes(num_entries: int, shapes: Iterable[Sequence[int]], bytes_per_element: int = 8) -> int:
    return num_entries * sum(int(np.prod(s)) for s in shapes) * bytes_per_element


def projected_buffer_bytes(d: Detector, kind: Union[str, StrategyKind], capacity: int,
                           boundary: Optional[str] = None) -> int:
    """Bytes of a full buffer: uint8 images for replay, float64 split-point activations for latent replay."""
    kind = StrategyKind.parse(kind)
    if not kind.replays:
        return 0
    if kind.latent:
        return latent_buffer_bytes(capacity, [latent_shape(d.spec, boundary or d.spec.top)])
    return raw_buffer_bytes(capacity, d.spec.input_size, d.spec.input_size, d.spec.in_channels)


def cost_ledger(d: Detector, kind: Union[str, StrategyKind], boundary: Optional[str] = None, task_index: int = 1,
                buffer: Optional[ReplayBuffer] = None) -> CostLedger:
    kind = StrategyKind.parse(kind)
    boundary = boundary or d.spec.top
    return CostLedger(kind.value, boundary, **count_params(d, kind, boundary, task_index),
                      **count_macs(d, kind, boundary, task_index), buffer_bytes=buffer_memory(buffer))


def overhead_reduction(lower_params: int, total_params: int) -> float:
    """Fraction of the classic teacher copy that latent distillation does not store: |f| / (|f|+|h|)."""
    if total_params <= 0:
        raise MetricsError(f"total_params must be positive, got {total_params}")
    return lower_params / total_params


def distill_ratios(d: Detector, boundary: Optional[str] = None) -> Dict[str, float]:
    """Latent vs classic distillation cost at one boundary, forward-only and forward+backward."""
    ld = cost_ledger(d, StrategyKind.LATENT_DISTILL, boundary)
    classic = cost_ledger(d, StrategyKind.SID, boundary)
    return {
        "param_overhead_ratio": ld.cl_overhead_params / classic.cl_overhead_params,
        "param_overhead_reduction": overhead_reduction(ld.lower_params, ld.total_params),
        "forward_ratio": ld.forward_macs_update / classic.forward_macs_update,
        "update_ratio": ld.update_macs / classic.update_macs,
    }


def freeze_sweep(d: Detector, kind: Union[str, StrategyKind] = StrategyKind.LATENT_DISTILL) -> List[CostLedger]:
    return [cost_ledger(d, kind, b) for b in d.spec.boundaries]


def nanodet_reference() -> Dict[str, float]:
    """Parameter-overhead formula on the reported NanoDet split, next to its reported FLOPs overhead."""
    lower = NANODET_TOTAL_PARAMS - NANODET_UPPER_PARAMS
    return {
        "total_params": NANODET_TOTAL_PARAMS,
        "upper_params": NANODET_UPPER_PARAMS,
        "param_overhead_reduction": overhead_reduction(lower, NANODET_TOTAL_PARAMS),
        "reported_flops_overhead": NANODET_REPORTED_FLOPS_OVERHEAD,
        "replay_buffer_bytes_250x320": raw_buffer_bytes(250, 320, 320),
    }


def write_report(path: Path, report: Optional[EvalReport], ledger: Optional[CostLedger], **extra) -> Path:
    payload = dict(extra)
    if report is not None:
        payload["eval"] = report.to_dict()
    if ledger is not None:
        payload["ledger"] = ledger.to_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")
    return path
