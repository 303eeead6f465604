"""config.py

Experiment configuration: YAML file -> ExperimentConfig.

    experiment:
      scenario: 4p4             # class counts per task
      strategy: latent_distill  # finetune | joint | replay | latent_replay | lwf | sid | latent_distill
      freeze_boundary: stage3   # input | stage1 | stage2 | stage3 (latent kinds, from task 1 on)
      output_dir: runs/4p4_latent_distill
      seed: 0
    data:   {train_images: 1000, test_images: 300, num_classes: 8, seed: 0, test_seed: 1}
    model:  {stages: [[8, 8], [16, 16], [32, 32]], trunk: [32, 32]}
    optim:  {base_lr: 0.001, weight_decay: 0.05, betas: [0.9, 0.999], eps: 1.0e-8}
    train:  {epochs_per_task: 30, warmup_steps: 50, t_max: 30, batch_size: 16}
    strategy: {alpha: 1.0, buffer_capacity: 50}
    eval:   {score_thr: 0.05, nms_iou: 0.6}

Every key is optional. Unknown keys and bad values raise ConfigError with
the line number they appear on.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from cl_strategies import StrategyError, StrategyKind
from detector import DetectorError, DetectorSpec, StageSpec
from scenario_data import ScenarioError, ScenarioSpec, parse_scenario


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class Hyperparams:
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 50
    epochs_per_task: int = 30
    t_max: int = 30
    batch_size: int = 16

    def problems(self) -> Dict[str, str]:
        out = {}
        if not self.base_lr > 0:
            out["base_lr"] = "must be > 0"
        if not self.weight_decay >= 0:
            out["weight_decay"] = "must be >= 0"
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            out["betas"] = "must be two values in [0, 1)"
        if not self.eps > 0:
            out["eps"] = "must be > 0"
        if self.warmup_steps < 0:
            out["warmup_steps"] = "must be >= 0"
        if self.epochs_per_task < 0:
            out["epochs_per_task"] = "must be >= 0"
        if self.t_max < 1:
            out["t_max"] = "must be >= 1"
        if self.batch_size < 1:
            out["batch_size"] = "must be >= 1"
        return out


FULL_SCALE = {"warmup_steps": 500, "epochs_per_task": 100, "t_max": 100}


@dataclass(frozen=True)
class DataConfig:
    train_images: int = 1000
    test_images: int = 300
    num_classes: int = 8
    seed: int = 0
    test_seed: int = 1


@dataclass(frozen=True)
class ModelConfig:
    stages: Tuple[Tuple[int, ...], ...] = ((8, 8), (16, 16), (32, 32))
    trunk: Tuple[int, ...] = (32, 32)

    def detector_spec(self, num_classes: int) -> DetectorSpec:
        stages = tuple(StageSpec(f"stage{i}", tuple(ch)) for i, ch in enumerate(self.stages, start=1))
        return DetectorSpec(num_classes=num_classes, stages=stages, head_trunk=tuple(self.trunk),
                            grid=64 // 2 ** len(stages))


@dataclass(frozen=True)
class StrategyConfig:
    alpha: float = 1.0
    buffer_capacity: int = 50


@dataclass(frozen=True)
class EvalConfig:
    score_thr: float = 0.05
    nms_iou: float = 0.6


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "4p4"
    strategy: str = "latent_distill"
    freeze_boundary: str = "stage3"
    output_dir: str = "runs/default"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hp: Hyperparams = field(default_factory=Hyperparams)
    cl: StrategyConfig = field(default_factory=StrategyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def kind(self) -> StrategyKind:
        return StrategyKind.parse(self.strategy)

    @property
    def scenario_spec(self) -> ScenarioSpec:
        return parse_scenario(self.scenario)

    def detector_spec(self) -> DetectorSpec:
        return self.model.detector_spec(self.scenario_spec.counts[0])

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_full_scale(self) -> "ExperimentConfig":
        return replace(self, hp=replace(self.hp, **FULL_SCALE))

    def with_boundary(self, boundary: str, output_dir: str) -> "ExperimentConfig":
        return replace(self, freeze_boundary=boundary, output_dir=output_dir)


# (yaml section, key) -> (target, attribute, type); target "" is the top-level config
_SCHEMA: Dict[str, Dict[str, Tuple[str, str, str]]] = {
    "experiment": {
        "scenario": ("", "scenario", "str"),
        "strategy": ("", "strategy", "str"),
        "freeze_boundary": ("", "freeze_boundary", "str"),
        "output_dir": ("", "output_dir", "str"),
        "seed": ("", "seed", "int"),
    },
    "data": {k: ("data", k, "int") for k in ("train_images", "test_images", "num_classes", "seed", "test_seed")},
    "model": {"stages": ("model", "stages", "int_lists"), "trunk": ("model", "trunk", "ints")},
    "optim": {
        "base_lr": ("hp", "base_lr", "float"),
        "weight_decay": ("hp", "weight_decay", "float"),
        "betas": ("hp", "betas", "floats"),
        "eps": ("hp", "eps", "float"),
    },
    "train": {k: ("hp", k, "int") for k in ("epochs_per_task", "warmup_steps", "t_max", "batch_size")},
    "strategy": {"alpha": ("cl", "alpha", "float"), "buffer_capacity": ("cl", "buffer_capacity", "int")},
    "eval": {"score_thr": ("eval", "score_thr", "float"), "nms_iou": ("eval", "nms_iou", "float")},
}


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(value: Any, kind: str, name: str, line: int, source: str):
    bad = ConfigError(f"{name}: expected {kind.replace('_', ' ')}, got {value!r}", line, source)
    if kind == "str":
        if not isinstance(value, (str, int)) or isinstance(value, bool):
            raise bad
        return str(value)
    if kind == "int":
        if not _is_int(value):
            raise bad
        return value
    if kind == "float":
        if not (_is_int(value) or isinstance(value, float)):
            raise bad
        return float(value)
    if kind in ("ints", "floats"):
        if not isinstance(value, list) or not value:
            raise bad
        check = _is_int if kind == "ints" else (lambda v: _is_int(v) or isinstance(v, float))
        if not all(check(v) for v in value):
            raise bad
        return tuple(value) if kind == "ints" else tuple(float(v) for v in value)
    if kind == "int_lists":
        if not isinstance(value, list) or not value or not all(isinstance(v, list) and v for v in value):
            raise bad
        if not all(_is_int(c) for v in value for c in v):
            raise bad
        return tuple(tuple(v) for v in value)
    raise AssertionError(kind)


def _compose(text: str, source: str) -> Tuple[Dict[str, Dict[str, Any]], Dict[Tuple[str, ...], int]]:
    try:
        loader = yaml.SafeLoader(text)
        try:
            root = loader.get_single_node()
            data = loader.construct_document(root) if root is not None else {}
        finally:
            loader.dispose()
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise ConfigError(f"YAML syntax error: {exc.problem}", line, source) from None

    if data in (None, {}):
        return {}, {}
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping of sections", root.start_mark.line + 1, source)

    lines: Dict[Tuple[str, ...], int] = {}
    for key_node, value_node in root.value:
        section = str(key_node.value)
        lines[(section,)] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for k_node, _ in value_node.value:
                lines[(section, str(k_node.value))] = k_node.start_mark.line + 1
    return data, lines


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    data, lines = _compose(text, source)
    groups: Dict[str, Dict[str, Any]] = {"": {}, "data": {}, "model": {}, "hp": {}, "cl": {}, "eval": {}}
    where: Dict[Tuple[str, str], int] = {}

    for section, body in data.items():
        section = str(section)
        line = lines.get((section,))
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section {section!r}; expected one of {sorted(_SCHEMA)}", line, source)
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping", line, source)
        for key, value in body.items():
            key = str(key)
            kline = lines.get((section, key), line)
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}; expected one of {sorted(_SCHEMA[section])}",
                                  kline, source)
            target, attr, kind = _SCHEMA[section][key]
            groups[target][attr] = _coerce(value, kind, f"{section}.{key}", kline, source)
            where[(target, attr)] = kline

    cfg = ExperimentConfig(
        **groups[""],
        data=DataConfig(**groups["data"]),
        model=ModelConfig(**groups["model"]),
        hp=Hyperparams(**groups["hp"]),
        cl=StrategyConfig(**groups["cl"]),
        eval=EvalConfig(**groups["eval"]),
    )
    validate(cfg, where, source)
    return cfg


def validate(cfg: ExperimentConfig, where: Optional[Dict[Tuple[str, str], int]] = None,
             source: str = "<config>") -> None:
    where = where or {}

    def fail(target: str, attr: str, message: str):
        raise ConfigError(message, where.get((target, attr)), source)

    try:
        cfg.kind
    except StrategyError as exc:
        fail("", "strategy", str(exc))
    try:
        scenario = cfg.scenario_spec
        scenario.validate(cfg.data.num_classes)
    except ScenarioError as exc:
        fail("", "scenario", str(exc))
    try:
        spec = cfg.detector_spec()
        spec.validate()
        spec.level(cfg.freeze_boundary)
    except DetectorError as exc:
        fail("", "freeze_boundary" if "boundary" in str(exc) else "stages", str(exc))
    for attr, problem in cfg.hp.problems().items():
        fail("hp", attr, f"{attr} {problem}")
    if cfg.data.train_images < 1 or cfg.data.test_images < 1:
        fail("data", "train_images" if cfg.data.train_images < 1 else "test_images", "image counts must be >= 1")
    if not 1 <= cfg.data.num_classes <= 8:
        fail("data", "num_classes", f"num_classes must be in [1, 8], got {cfg.data.num_classes}")
    if cfg.cl.alpha < 0:
        fail("cl", "alpha", f"alpha must be >= 0, got {cfg.cl.alpha}")
    if cfg.cl.buffer_capacity < 1:
        fail("cl", "buffer_capacity", f"buffer_capacity must be >= 1, got {cfg.cl.buffer_capacity}")
    for attr in ("score_thr", "nms_iou"):
        if not 0 < getattr(cfg.eval, attr) < 1:
            fail("eval", attr, f"{attr} must lie in (0, 1)")


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("file not found", None, str(path))
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def config_from_dict(d: dict) -> ExperimentConfig:
    """Inverse of ExperimentConfig.to_dict (checkpoint metadata)."""
    return ExperimentConfig(
        scenario=d["scenario"], strategy=d["strategy"], freeze_boundary=d["freeze_boundary"],
        output_dir=d["output_dir"], seed=d["seed"],
        data=DataConfig(**d["data"]),
        model=ModelConfig(stages=tuple(tuple(s) for s in d["model"]["stages"]), trunk=tuple(d["model"]["trunk"])),
        hp=Hyperparams(**{**d["hp"], "betas": tuple(d["hp"]["betas"])}),
        cl=StrategyConfig(**d["cl"]),
        eval=EvalConfig(**d["eval"]),
    )


def describe(cfg: ExperimentConfig) -> List[List[str]]:
    """Rows for a tabulate preview."""
    return [
        ["scenario", cfg.scenario], ["strategy", cfg.strategy], ["freeze_boundary", cfg.freeze_boundary],
        ["images (train/test)", f"{cfg.data.train_images}/{cfg.data.test_images}"],
        ["epochs_per_task", str(cfg.hp.epochs_per_task)], ["warmup_steps", str(cfg.hp.warmup_steps)],
        ["batch_size", str(cfg.hp.batch_size)], ["alpha", str(cfg.cl.alpha)], ["output_dir", cfg.output_dir],
    ]
