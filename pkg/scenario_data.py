"""scenario_data.py

Synthetic shapes dataset and class-incremental task splits.

Every image is a 64x64 RGB canvas holding 1-3 shapes, one class per shape
kind. Image i is rendered from its own generator, numpy PCG64 seeded with
``seed ^ i``, so any image can be regenerated on its own and the dataset
does not depend on generation order.

A scenario string lists class counts per task: "8" (one task), "4p4",
"7p1", "4p1x4" (4 then four tasks of 1) or chains like "2p2p2p2". Task n
holds every image with at least one instance of its visible classes and
keeps only those annotations; objects of other classes stay in the pixels
as unlabeled background.

Export format (one directory):
    manifest.txt      # header lines, then "image_id class_id x1 y1 x2 y2" per object
    images/000042.u8  # raw uint8 HxWx3 bytes, row-major
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from autodiff import Tensor

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar", "diamond", "plus")
IMAGE_SIZE = 64
MAX_OBJECTS = 3
MAX_PLACEMENT_IOU = 0.3
PLACEMENT_TRIES = 50
MIN_SIDE, MAX_SIDE = 14, 28


class ScenarioError(ValueError):
    pass


class ClassRange(NamedTuple):
    """Inclusive range of 1-based global class ids; empty when last < first."""
    first: int
    last: int

    def __contains__(self, class_id) -> bool:
        return self.first <= class_id <= self.last

    def __len__(self) -> int:
        return max(0, self.last - self.first + 1)

    @property
    def empty(self) -> bool:
        return self.last < self.first

    def ids(self) -> List[int]:
        return list(range(self.first, self.last + 1))

    def __str__(self) -> str:
        return "[]" if self.empty else f"[{self.first}..{self.last}]"


class Annotation(NamedTuple):
    class_id: int
    box: Tuple[float, float, float, float]


class Sample(NamedTuple):
    image_id: int
    image: np.ndarray  # uint8 [H,W,3]
    annotations: Tuple[Annotation, ...]


@dataclass
class SceneDataset:
    samples: List[Sample]
    num_classes: int
    seed: int
    image_size: int = IMAGE_SIZE

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TaskDataset:
    index: int
    visible: ClassRange
    samples: List[Sample]
    full_annotations: List[Tuple[Annotation, ...]] = field(repr=False)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TaskSequence:
    tasks: List[TaskDataset]
    num_classes: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, n: int) -> TaskDataset:
        return self.tasks[n]

    @property
    def ranges(self) -> List[ClassRange]:
        return [t.visible for t in self.tasks]


@dataclass(frozen=True)
class ScenarioSpec:
    counts: Tuple[int, ...]
    text: str = ""

    @property
    def total(self) -> int:
        return sum(self.counts)

    def ranges(self) -> List[ClassRange]:
        out, first = [], 1
        for k in self.counts:
            out.append(ClassRange(first, first + k - 1))
            first += k
        return out

    def validate(self, num_classes: int) -> None:
        if self.total > num_classes:
            raise ScenarioError(f"scenario {self.text!r} needs {self.total} classes, dataset has {num_classes}")


_TERM = re.compile(r"^(\d+)(?:x(\d+))?$")


def parse_scenario(text: str) -> ScenarioSpec:
    """'4p4' -> (4, 4); '4p1x4' -> (4, 1, 1, 1, 1); '8' -> (8,)."""
    counts: List[int] = []
    for pos, term in enumerate(str(text).strip().lower().split("p")):
        m = _TERM.match(term)
        if not m or (pos == 0 and m.group(2)):
            raise ScenarioError(f"cannot parse scenario {text!r} at {term!r}")
        k = int(m.group(1))
        reps = int(m.group(2) or 1)
        if k < 1 or reps < 1:
            raise ScenarioError(f"scenario {text!r}: class counts and repeats must be >= 1")
        counts.extend([k] * reps)
    return ScenarioSpec(tuple(counts), str(text))


# ---------------------------------------------------------------- rendering

def _box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, box: Tuple[int, int, int, int], color: Tuple[int, int, int]) -> None:
    x1, y1, x2, y2 = box
    xe, ye = x2 - 1, y2 - 1
    cx, cy = (x1 + xe) / 2, (y1 + ye) / 2
    side = min(x2 - x1, y2 - y1)
    stroke = max(2, side // 5)
    if shape == "circle":
        draw.ellipse([x1, y1, xe, ye], fill=color)
    elif shape in ("square", "bar"):
        draw.rectangle([x1, y1, xe, ye], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, y1), (xe, ye), (x1, ye)], fill=color)
    elif shape == "cross":
        draw.line([(x1, y1), (xe, ye)], fill=color, width=stroke)
        draw.line([(x1, ye), (xe, y1)], fill=color, width=stroke)
    elif shape == "ring":
        draw.ellipse([x1, y1, xe, ye], outline=color, width=stroke)
    elif shape == "diamond":
        draw.polygon([(cx, y1), (xe, cy), (cx, ye), (x1, cy)], fill=color)
    elif shape == "plus":
        half = max(1, side // 6)
        draw.rectangle([cx - half, y1, cx + half, ye], fill=color)
        draw.rectangle([x1, cy - half, xe, cy + half], fill=color)
    else:
        raise ScenarioError(f"unknown shape {shape!r}")


def render_scene(index: int, num_classes: int, seed: int, image_size: int = IMAGE_SIZE) -> Sample:
    rng = np.random.default_rng(seed ^ index)
    img = Image.new("RGB", (image_size, image_size), color=(0, 0, 0))
    draw = ImageDraw.Draw(img)

    annotations: List[Annotation] = []
    for _ in range(int(rng.integers(1, MAX_OBJECTS + 1))):
        class_id = int(rng.integers(1, num_classes + 1))
        color = tuple(int(c) for c in rng.integers(80, 256, size=3))
        for _try in range(PLACEMENT_TRIES):
            side = int(rng.integers(MIN_SIDE, MAX_SIDE + 1))
            w, h = (side, max(9, side // 2)) if SHAPES[class_id - 1] == "bar" else (side, side)
            x1 = int(rng.integers(0, image_size - w + 1))
            y1 = int(rng.integers(0, image_size - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if all(_box_iou(box, a.box) <= MAX_PLACEMENT_IOU for a in annotations):
                break
        else:
            logger.warning("image %d: no placement for a class-%d object after %d tries, dropped",
                           index, class_id, PLACEMENT_TRIES)
            continue
        _draw_shape(draw, SHAPES[class_id - 1], box, color)
        annotations.append(Annotation(class_id, tuple(float(v) for v in box)))

    image = np.asarray(img, dtype=np.uint8).copy()
    image.setflags(write=False)
    return Sample(index, image, tuple(annotations))


def generate_dataset(num_images: int, num_classes: int, seed: int, first_id: int = 0) -> SceneDataset:
    if not 1 <= num_classes <= len(SHAPES):
        raise ScenarioError(f"num_classes must be in [1, {len(SHAPES)}], got {num_classes}")
    if num_images < 1:
        raise ScenarioError(f"num_images must be >= 1, got {num_images}")
    samples = [render_scene(first_id + i, num_classes, seed) for i in range(num_images)]
    logger.info("generated %d images, %d classes, seed %d", num_images, num_classes, seed)
    return SceneDataset(samples, num_classes, seed)


def class_histogram(samples: Sequence[Sample]) -> Dict[int, int]:
    counts: Dict[int, int] = {}
    for s in samples:
        for a in s.annotations:
            counts[a.class_id] = counts.get(a.class_id, 0) + 1
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------- task splits

def _task_view(samples: Sequence[Sample], index: int, visible: ClassRange) -> TaskDataset:
    kept, full = [], []
    for s in samples:
        labeled = tuple(a for a in s.annotations if a.class_id in visible)
        if labeled:
            kept.append(Sample(s.image_id, s.image, labeled))
            full.append(s.annotations)
    return TaskDataset(index, visible, kept, full)


def split_tasks(dataset: SceneDataset, scenario: ScenarioSpec) -> TaskSequence:
    scenario.validate(dataset.num_classes)
    tasks = [_task_view(dataset.samples, n, r) for n, r in enumerate(scenario.ranges())]
    for t in tasks:
        if not t.samples:
            raise ScenarioError(f"task {t.index} (classes {t.visible}) has no images")
        logger.debug("task %d: classes %s, %d images", t.index, t.visible, len(t.samples))
    return TaskSequence(tasks, dataset.num_classes)


def joint_task(sequence: TaskSequence, n: int) -> TaskDataset:
    """Tasks 0..n merged, every seen class labeled, images deduplicated by id."""
    if not 0 <= n < len(sequence):
        raise ScenarioError(f"task index {n} out of range for {len(sequence)} tasks")
    seen = ClassRange(1, sequence[n].visible.last)
    by_id: Dict[int, Sample] = {}
    for task in sequence.tasks[:n + 1]:
        for s, full in zip(task.samples, task.full_annotations):
            by_id.setdefault(s.image_id, Sample(s.image_id, s.image, full))
    return _task_view([by_id[k] for k in sorted(by_id)], n, seen)


def batch_iter(task: TaskDataset, batch_size: int, epoch_seed: int) -> Iterator[List[Sample]]:
    if batch_size < 1:
        raise ScenarioError(f"batch_size must be >= 1, got {batch_size}")
    if not task.samples:
        raise ScenarioError(f"task {task.index} is empty")
    order = np.random.default_rng(epoch_seed).permutation(len(task.samples))
    for start in range(0, len(order), batch_size):
        yield [task.samples[i] for i in order[start:start + batch_size]]


def to_tensor(images: Sequence[np.ndarray]) -> Tensor:
    """uint8 HWC images -> float64 Tensor [B,3,H,W] in [0,1]."""
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images]) / 255.0
    return Tensor(stack.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------- export / import

MANIFEST = "manifest.txt"


def export_dataset(dataset: SceneDataset, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = [
        f"# num_classes {dataset.num_classes} seed {dataset.seed} image_size {dataset.image_size} images {len(dataset)}",
        "# image_id class_id x1 y1 x2 y2",
    ]
    for s in dataset.samples:
        (out_dir / "images" / f"{s.image_id:06d}.u8").write_bytes(np.ascontiguousarray(s.image).tobytes())
        for a in s.annotations:
            lines.append(f"{s.image_id} {a.class_id} " + " ".join(f"{v:g}" for v in a.box))
    path = out_dir / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(data_dir: Path) -> SceneDataset:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    if not manifest.exists():
        raise ScenarioError(f"no {MANIFEST} in {data_dir}")

    meta: Dict[str, int] = {}
    boxes: Dict[int, List[Annotation]] = {}
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            words = line[1:].split()
            if words and words[0] == "num_classes":
                try:
                    meta = {k: int(v) for k, v in zip(words[::2], words[1::2])}
                except ValueError:
                    raise ScenarioError(f"{manifest}:{lineno}: malformed header {line!r}") from None
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ScenarioError(f"{manifest}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            image_id, class_id = int(parts[0]), int(parts[1])
            box = tuple(float(v) for v in parts[2:])
        except ValueError:
            raise ScenarioError(f"{manifest}:{lineno}: non-numeric field in {line!r}") from None
        boxes.setdefault(image_id, []).append(Annotation(class_id, box))

    if "num_classes" not in meta:
        raise ScenarioError(f"{manifest}: missing '# num_classes ...' header")
    size = meta.get("image_size", IMAGE_SIZE)
    samples = []
    for image_id in sorted(boxes):
        img_path = data_dir / "images" / f"{image_id:06d}.u8"
        if not img_path.exists():
            raise ScenarioError(f"missing image file {img_path}")
        raw = img_path.read_bytes()
        if len(raw) != size * size * 3:
            raise ScenarioError(f"{img_path}: {len(raw)} bytes, expected {size * size * 3}")
        image = np.frombuffer(raw, dtype=np.uint8).reshape(size, size, 3)
        samples.append(Sample(image_id, image, tuple(boxes[image_id])))
    return SceneDataset(samples, meta["num_classes"], meta.get("seed", 0), size)
