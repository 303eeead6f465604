"""detector.py

Tiny FCOS-style anchor-free detector.

    images [B,3,64,64]
      -> stage1 .. stageN   (conv3x3 stride 2, then conv3x3; relu)   lower layers f
      -> head trunk         (conv3x3; relu)                          upper layers h
      -> head.cls  1x1 conv -> class logits [B,C,S,S]
      -> head.reg  1x1 conv -> relu * stride -> box distances [B,4,S,S]

Boundaries sit between layer groups and are named "input" (alias "none")
followed by the stage names. A freeze boundary makes every parameter at or
below it non-trainable; the split point separates what latent_forward runs
from what upper_forward runs. Class channel i always predicts global class
id i + 1, and channels are only ever appended.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tensor, concat, conv2d, detach, relu, scale, sigmoid

logger = logging.getLogger(__name__)

HEAD_BIAS_INIT = -4.0
RESERVED_NAMES = ("input", "none", "trunk", "head")


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    name: str
    channels: Tuple[int, ...]


DEFAULT_STAGES = (
    StageSpec("stage1", (8, 8)),
    StageSpec("stage2", (16, 16)),
    StageSpec("stage3", (32, 32)),
)


@dataclass(frozen=True)
class DetectorSpec:
    num_classes: int
    stages: Tuple[StageSpec, ...] = DEFAULT_STAGES
    head_trunk: Tuple[int, ...] = (32, 32)
    input_size: int = 64
    in_channels: int = 3
    grid: int = 8

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DetectorError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.stages:
            raise DetectorError("detector needs at least one stage")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise DetectorError(f"stage names must be unique: {names}")
        for s in self.stages:
            if s.name in RESERVED_NAMES or "." in s.name:
                raise DetectorError(f"invalid stage name {s.name!r}")
            if not s.channels or min(s.channels) < 1:
                raise DetectorError(f"stage {s.name!r} needs positive channel counts, got {s.channels}")
        if self.head_trunk and min(self.head_trunk) < 1:
            raise DetectorError(f"head trunk channels must be positive, got {self.head_trunk}")
        if self.input_size // 2 ** len(self.stages) != self.grid or self.input_size % 2 ** len(self.stages):
            raise DetectorError(
                f"{len(self.stages)} stride-2 stages map {self.input_size}px to "
                f"{self.input_size / 2 ** len(self.stages)} cells, not grid {self.grid}")

    @property
    def stride(self) -> int:
        return self.input_size // self.grid

    @property
    def boundaries(self) -> Tuple[str, ...]:
        return ("input",) + tuple(s.name for s in self.stages)

    @property
    def top(self) -> str:
        return self.stages[-1].name

    def level(self, boundary: str) -> int:
        if boundary == "none":
            return 0
        try:
            return self.boundaries.index(boundary)
        except ValueError:
            raise DetectorError(f"unknown boundary {boundary!r}; expected one of {('none',) + self.boundaries}") from None

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "stages": [[s.name, list(s.channels)] for s in self.stages],
            "head_trunk": list(self.head_trunk),
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "grid": self.grid,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorSpec":
        return cls(
            num_classes=int(d["num_classes"]),
            stages=tuple(StageSpec(name, tuple(int(c) for c in ch)) for name, ch in d["stages"]),
            head_trunk=tuple(int(c) for c in d["head_trunk"]),
            input_size=int(d["input_size"]),
            in_channels=int(d["in_channels"]),
            grid=int(d["grid"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


class ConvLayer(NamedTuple):
    name: str
    level: int  # boundary level that owns it; trunk and head sit above every boundary
    cin: int
    cout: int
    kernel: int
    stride: int
    pad: int


def layers(spec: DetectorSpec) -> List[ConvLayer]:
    out = []
    cin = spec.in_channels
    for lvl, stage in enumerate(spec.stages, start=1):
        for i, cout in enumerate(stage.channels):
            out.append(ConvLayer(f"{stage.name}.conv{i}", lvl, cin, cout, 3, 2 if i == 0 else 1, 1))
            cin = cout
    top = len(spec.stages) + 1
    for i, cout in enumerate(spec.head_trunk):
        out.append(ConvLayer(f"trunk.conv{i}", top, cin, cout, 3, 1, 1))
        cin = cout
    out.append(ConvLayer("head.cls", top, cin, spec.num_classes, 1, 1, 0))
    out.append(ConvLayer("head.reg", top, cin, 4, 1, 1, 0))
    return out


def layer_geometry(spec: DetectorSpec) -> List[Tuple[ConvLayer, int, int]]:
    """Each layer with its output height and width for one input image."""
    out = []
    h = w = spec.input_size
    for layer in layers(spec):
        if layer.name.startswith("head."):
            out.append((layer, spec.grid, spec.grid))
            continue
        h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        out.append((layer, h, w))
    return out


def latent_shape(spec: DetectorSpec, split_point: str) -> Tuple[int, int, int]:
    lvl = spec.level(split_point)
    shape = (spec.in_channels, spec.input_size, spec.input_size)
    for layer, h, w in layer_geometry(spec):
        if layer.level <= lvl:
            shape = (layer.cout, h, w)
    return shape


def param_level(spec: DetectorSpec, name: str) -> int:
    layer = name.rsplit(".", 1)[0]
    for lay in layers(spec):
        if lay.name == layer:
            return lay.level
    raise DetectorError(f"parameter {name!r} does not belong to any layer")


@dataclass(frozen=True)
class Detector:
    spec: DetectorSpec
    params: Dict[str, Tensor] = field(repr=False)
    frozen_boundary: str = "none"
    split_point: str = "input"
    upper_only: bool = False

    @property
    def num_classes(self) -> int:
        return self.params["head.cls.weight"].shape[0]

    def trainable_names(self) -> List[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def names_at_or_below(self, boundary: str) -> List[str]:
        lvl = self.spec.level(boundary)
        return [n for n in self.params if param_level(self.spec, n) <= lvl]

    def names_above(self, boundary: str) -> List[str]:
        lvl = self.spec.level(boundary)
        return [n for n in self.params if param_level(self.spec, n) > lvl]


class HeadOutputs(NamedTuple):
    class_logits: Tensor   # [B,C,S,S], pre-sigmoid
    box_regress: Tensor    # [B,4,S,S], left/top/right/bottom in pixels
    trunk_features: Tensor  # [B,F,S,S], before the cls/reg split
    stride: int


class Latent(NamedTuple):
    features: Tensor
    split_point: str


class Detection(NamedTuple):
    class_id: int
    box: Tuple[float, float, float, float]
    score: float


def build_detector(spec: DetectorSpec, seed: int, frozen_boundary: str = "none",
                   split_point: Optional[str] = None) -> Detector:
    """Kaiming-uniform weights from one seeded generator, zero biases, class bias -4."""
    spec.validate()
    split_point = split_point or spec.top
    spec.level(frozen_boundary)
    spec.level(split_point)

    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for layer in layers(spec):
        fan_in = layer.cin * layer.kernel * layer.kernel
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(layer.cout, layer.cin, layer.kernel, layer.kernel))
        b = np.full(layer.cout, HEAD_BIAS_INIT if layer.name == "head.cls" else 0.0)
        params[f"{layer.name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{layer.name}.bias"] = Tensor(b, requires_grad=True)

    d = Detector(spec=spec, params=params, split_point=_canonical_split(split_point))
    return set_freeze(d, frozen_boundary)


def _canonical_split(name: str) -> str:
    return "input" if name == "none" else name


def _check_images(spec: DetectorSpec, images: Tensor) -> None:
    expected = (spec.in_channels, spec.input_size, spec.input_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DetectorError(f"expected images of shape [B,{expected[0]},{expected[1]},{expected[2]}], got {images.shape}")


def _conv(d: Detector, layer: ConvLayer, h: Tensor) -> Tensor:
    return conv2d(h, d.params[f"{layer.name}.weight"], layer.stride, layer.pad, d.params[f"{layer.name}.bias"])


def latent_forward(d: Detector, images: Tensor) -> Latent:
    """Run the layers at or below the split point: z = f(x)."""
    if d.upper_only:
        raise DetectorError("this snapshot stores upper layers only; feed it a shared latent")
    _check_images(d.spec, images)
    split = d.spec.level(d.split_point)
    h = images
    for layer in layers(d.spec):
        if layer.level <= split:
            h = relu(_conv(d, layer, h))
    if d.spec.level(d.frozen_boundary) >= split:
        h = detach(h)
    return Latent(h, d.split_point)


def upper_forward(d: Detector, z: Latent) -> HeadOutputs:
    """Run the layers above the split point on a latent produced at the same split."""
    if z.split_point != d.split_point:
        raise DetectorError(f"latent was produced at {z.split_point!r}, detector splits at {d.split_point!r}")
    expected = latent_shape(d.spec, d.split_point)
    if z.features.ndim != 4 or z.features.shape[1:] != expected:
        raise DetectorError(f"latent shape {z.features.shape} does not match [B,{','.join(map(str, expected))}]")
    split = d.spec.level(d.split_point)
    h = z.features
    logits = box = None
    for layer in layers(d.spec):
        if layer.level <= split:
            continue
        if layer.name == "head.cls":
            logits = _conv(d, layer, h)
        elif layer.name == "head.reg":
            box = scale(relu(_conv(d, layer, h)), float(d.spec.stride))
        else:
            h = relu(_conv(d, layer, h))
    return HeadOutputs(logits, box, h, d.spec.stride)


def forward(d: Detector, images: Tensor) -> HeadOutputs:
    return upper_forward(d, latent_forward(d, images))


def expand_head(d: Detector, k: int, seed: int) -> Detector:
    """Append k class channels; existing channels are kept bit-for-bit."""
    if int(k) != k or k < 1:
        raise DetectorError(f"head can only grow by a positive class count, got {k}")
    w = d.params["head.cls.weight"]
    b = d.params["head.cls.bias"]
    fan_in = w.shape[1]
    bound = math.sqrt(6.0 / fan_in)
    rng = np.random.default_rng(seed)
    new_w = rng.uniform(-bound, bound, size=(k,) + w.shape[1:])
    params = dict(d.params)
    params["head.cls.weight"] = Tensor(np.concatenate([w.data, new_w]), requires_grad=w.requires_grad)
    params["head.cls.bias"] = Tensor(np.concatenate([b.data, np.full(k, HEAD_BIAS_INIT)]), requires_grad=b.requires_grad)
    spec = replace(d.spec, num_classes=d.spec.num_classes + k)
    logger.debug("expanded class head %d -> %d channels", d.spec.num_classes, spec.num_classes)
    return replace(d, spec=spec, params=params)


def set_freeze(d: Detector, boundary: str) -> Detector:
    lvl = d.spec.level(boundary)
    params = {n: p.with_grad(param_level(d.spec, n) > lvl) for n, p in d.params.items()}
    return replace(d, params=params, frozen_boundary="none" if lvl == 0 else boundary)


def set_split(d: Detector, boundary: str) -> Detector:
    d.spec.level(boundary)
    if d.upper_only:
        raise DetectorError("cannot move the split point of an upper-layer snapshot")
    return replace(d, split_point=_canonical_split(boundary))


def snapshot_teacher(d: Detector, upper_only: bool = False) -> Detector:
    """Frozen copy of the model. With upper_only, only layers above the split are kept."""
    names = d.names_above(d.split_point) if upper_only else list(d.params)
    params = {n: d.params[n].with_grad(False) for n in names}
    return replace(d, params=params, frozen_boundary=d.spec.top, upper_only=upper_only)


def replace_params(d: Detector, updates: Dict[str, Tensor]) -> Detector:
    params = dict(d.params)
    for name, t in updates.items():
        if name not in params:
            raise DetectorError(f"unknown parameter {name!r}")
        if t.shape != params[name].shape:
            raise DetectorError(f"parameter {name!r}: shape {t.shape} != {params[name].shape}")
        params[name] = t.with_grad(params[name].requires_grad)
    return replace(d, params=params)


def _pairwise_iou(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(box[0], others[:, 0])
    iy1 = np.maximum(box[1], others[:, 1])
    ix2 = np.minimum(box[2], others[:, 2])
    iy2 = np.minimum(box[3], others[:, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def _nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> List[int]:
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    for idx in order:
        if keep and np.any(_pairwise_iou(boxes[idx], boxes[keep]) > iou_thr):
            continue
        keep.append(int(idx))
    return keep


def decode_detections(out: HeadOutputs, score_thr: float = 0.05, nms_iou: float = 0.6,
                      max_dets: int = 100) -> List[List[Detection]]:
    """Per-image detections: cell (i, j) anchors ((j+0.5)s, (i+0.5)s); greedy per-class NMS."""
    if not (0 < score_thr < 1 and 0 < nms_iou < 1):
        raise DetectorError(f"thresholds must lie in (0,1), got score_thr={score_thr} nms_iou={nms_iou}")
    scores = sigmoid(detach(out.class_logits)).data
    dist = out.box_regress.data
    batch, num_classes, s_h, s_w = scores.shape
    s = out.stride
    limit = float(s * s_w)

    results: List[List[Detection]] = []
    for b in range(batch):
        dets: List[Detection] = []
        for c in range(num_classes):
            ii, jj = np.nonzero(scores[b, c] > score_thr)
            if ii.size == 0:
                continue
            cx = (jj + 0.5) * s
            cy = (ii + 0.5) * s
            l, t, r, bt = (dist[b, k, ii, jj] for k in range(4))
            boxes = np.stack([
                np.clip(cx - l, 0.0, limit), np.clip(cy - t, 0.0, limit),
                np.clip(cx + r, 0.0, limit), np.clip(cy + bt, 0.0, limit),
            ], axis=1)
            sc = scores[b, c, ii, jj]
            valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            boxes, sc = boxes[valid], sc[valid]
            for idx in _nms(boxes, sc, nms_iou):
                dets.append(Detection(c + 1, tuple(float(v) for v in boxes[idx]), float(sc[idx])))
        dets.sort(key=lambda det: -det.score)
        results.append(dets[:max_dets])
    return results


def count_params(params: Dict[str, Tensor], names: Optional[Sequence[str]] = None) -> int:
    names = params.keys() if names is None else names
    return int(sum(params[n].size for n in names))
