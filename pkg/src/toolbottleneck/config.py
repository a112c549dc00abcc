"""Experiment configuration: YAML in, validated dataclasses out.

Every section is checked before any work starts and all violations are
reported together. The fingerprint is a sha256 over the canonical (fully
defaulted, key-sorted) JSON form, so two documents that differ only in
formatting or in spelling out defaults share a fingerprint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .analysis import DEFAULT_P_MASK_GRID, DEFAULT_SIZES
from .selection import DEFAULT_ALPHA, DEFAULT_K
from .synthdata import DiscreteTaskSpec, ImageTaskSpec, discrete_toolbox, image_toolbox
from .tbm import TrainConfig
from .toolbox import Toolbox

SCHEMA_VERSION = 1
TASK_KINDS = ("discrete", "image")
SELECTOR_MODES = ("all", "scripted", "vlm")
ENV_ENDPOINT = "TBF_SELECTOR_URL"
ENV_TIMEOUT = "TBF_SELECTOR_TIMEOUT"


class ConfigError(ValueError):
    """Carries every validation problem found, one string per violated field."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class TaskConfig:
    kind: str = "discrete"
    spec: dict[str, Any] = field(default_factory=dict)


@dataclass
class ToolboxConfig:
    tools: list[str] | None = None  # subset / order of the task's tools; None keeps all
    blob_radius: float = 2.0


@dataclass
class SelectorConfig:
    mode: str = "all"
    k: int = DEFAULT_K
    alpha: float = DEFAULT_ALPHA
    relevance: dict[str, float] = field(default_factory=dict)  # scripted: per-tool base score
    default_relevance: float = 0.5
    noise: float = 0.0
    endpoint: str | None = None
    timeout: float = 30.0
    task: str = ""
    modality: str = "synthetic"


@dataclass
class ModelConfig:
    conv_block_widths: list[int] = field(default_factory=lambda: [16, 16, 32, 32])


@dataclass
class AnalysisConfig:
    metric: str = "accuracy"
    split: str = "val"
    p_mask_grid: list[float] = field(default_factory=lambda: list(DEFAULT_P_MASK_GRID))
    sizes: list[int] = field(default_factory=lambda: list(DEFAULT_SIZES))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    steps: int = 300
    min_prob: float = 0.01


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    task: TaskConfig = field(default_factory=TaskConfig)
    toolbox: ToolboxConfig = field(default_factory=ToolboxConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict[str, Any] = field(default_factory=dict)  # TrainConfig fields except alpha, k, seed
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    # ---- derived objects

    def task_spec(self) -> DiscreteTaskSpec | ImageTaskSpec:
        spec = {"seed": self.seed, **self.task.spec}
        return DiscreteTaskSpec(**spec) if self.task.kind == "discrete" else ImageTaskSpec(**spec)

    def full_toolbox(self) -> Toolbox:
        spec = self.task_spec()
        if isinstance(spec, DiscreteTaskSpec):
            return discrete_toolbox(spec.n_tools, spec.resolution)
        return image_toolbox(spec, self.toolbox.blob_radius)

    def build_toolbox(self) -> Toolbox:
        full = self.full_toolbox()
        if self.toolbox.tools is None:
            return full
        return Toolbox(full[full.index(t)] for t in self.toolbox.tools)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "alpha": self.selector.alpha, "k": self.selector.k, "seed": self.seed})

    def selector_endpoint(self) -> str | None:
        return os.environ.get(ENV_ENDPOINT) or self.selector.endpoint

    def selector_timeout(self) -> float:
        env = os.environ.get(ENV_TIMEOUT)
        return float(env) if env else self.selector.timeout

    # ---- serialization

    def canonical(self) -> dict[str, Any]:
        out = asdict(self)
        out["task"]["spec"] = _jsonable(asdict(self.task_spec()))
        out["train"] = {k: v for k, v in asdict(self.train_config()).items() if k not in ("alpha", "k", "seed")}
        return _jsonable(out)

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True)


def _jsonable(x):
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


# --------------------------------------------------------------------------
# parsing


_SECTIONS = {
    "task": TaskConfig,
    "toolbox": ToolboxConfig,
    "selector": SelectorConfig,
    "model": ModelConfig,
    "analysis": AnalysisConfig,
}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _unknown(section: Mapping[str, Any], allowed: set[str], where: str, errors: list[str]) -> None:
    for key in sorted(set(section) - allowed):
        errors.append(f"{where}{key}: unknown key")


def _build_section(name: str, raw: Any, errors: list[str]):
    cls = _SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        errors.append(f"{name}: expected a mapping")
        return cls()
    _unknown(raw, _field_names(cls), f"{name}.", errors)
    return cls(**{k: v for k, v in raw.items() if k in _field_names(cls)})


def parse_config(doc: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a parsed document; raises ``ConfigError`` listing every problem."""
    errors: list[str] = []
    if not isinstance(doc, Mapping):
        raise ConfigError(["top level: expected a mapping"])
    _unknown(doc, _field_names(ExperimentConfig), "", errors)
    version = doc.get("schema_version", None)
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")

    sections = {name: _build_section(name, doc.get(name), errors) for name in _SECTIONS}
    train = doc.get("train") or {}
    if not isinstance(train, Mapping):
        errors.append("train: expected a mapping")
        train = {}
    train_fields = _field_names(TrainConfig) - {"alpha", "k", "seed"}
    for key in sorted(set(train) - train_fields):
        hint = " (set it under selector / top level)" if key in ("alpha", "k", "seed") else ""
        errors.append(f"train.{key}: unknown key{hint}")

    top = {k: doc[k] for k in ("name", "seed", "output_dir") if k in doc}
    cfg = ExperimentConfig(
        schema_version=SCHEMA_VERSION,
        train={k: v for k, v in train.items() if k in train_fields},
        **top,
        **sections,
    )
    errors += _semantic_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def _semantic_errors(cfg: ExperimentConfig) -> list[str]:
    errs: list[str] = []
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        errs.append("seed: must be a non-negative integer")
    if not isinstance(cfg.output_dir, str) or not cfg.output_dir:
        errs.append("output_dir: must be a nonempty path")

    full = None
    if cfg.task.kind not in TASK_KINDS:
        errs.append(f"task.kind: must be one of {TASK_KINDS}")
    else:
        spec_cls = DiscreteTaskSpec if cfg.task.kind == "discrete" else ImageTaskSpec
        bad = sorted(set(cfg.task.spec) - _field_names(spec_cls))
        errs += [f"task.spec.{k}: unknown key" for k in bad]
        if not bad:
            try:
                full = cfg.full_toolbox()
            except (TypeError, ValueError) as exc:
                errs.append(f"task.spec: {exc}")

    if cfg.toolbox.tools is not None:
        if not isinstance(cfg.toolbox.tools, list) or not cfg.toolbox.tools:
            errs.append("toolbox.tools: must be a nonempty list of tool ids")
        elif full is not None:
            for t in cfg.toolbox.tools:
                if t not in full.tool_ids:
                    errs.append(f"toolbox.tools: unknown tool id {t!r} (known: {', '.join(full.tool_ids)})")
            if len(set(cfg.toolbox.tools)) != len(cfg.toolbox.tools):
                errs.append("toolbox.tools: duplicate tool ids")

    sel = cfg.selector
    if sel.mode not in SELECTOR_MODES:
        errs.append(f"selector.mode: must be one of {SELECTOR_MODES}")
    if not isinstance(sel.k, int) or sel.k < 1:
        errs.append("selector.k: must be an integer >= 1")
    if not isinstance(sel.alpha, (int, float)) or not 0.0 <= sel.alpha <= 1.0:
        errs.append("selector.alpha: must lie in [0, 1]")
    if not isinstance(sel.noise, (int, float)) or sel.noise < 0:
        errs.append("selector.noise: must be >= 0")
    if not isinstance(sel.relevance, Mapping):
        errs.append("selector.relevance: expected a mapping tool_id -> score")
    elif full is not None:
        for t in sel.relevance:
            if t not in full.tool_ids:
                errs.append(f"selector.relevance: unknown tool id {t!r}")
    if sel.mode == "vlm" and not (sel.endpoint or os.environ.get(ENV_ENDPOINT)):
        errs.append(f"selector.endpoint: required for mode 'vlm' (or set {ENV_ENDPOINT})")

    widths = cfg.model.conv_block_widths
    if not isinstance(widths, list) or not widths or any(not isinstance(w, int) or w < 1 for w in widths):
        errs.append("model.conv_block_widths: must be a nonempty list of positive integers")

    try:
        cfg.train_config()
    except ValueError as exc:
        errs += [f"train: {m}" for m in str(exc).split("; ") if not m.startswith(("alpha", "k "))]
    except TypeError as exc:
        errs.append(f"train: {exc}")

    an = cfg.analysis
    if an.metric not in ("accuracy", "auc"):
        errs.append("analysis.metric: must be 'accuracy' or 'auc'")
    if an.split not in ("train", "val"):
        errs.append("analysis.split: must be 'train' or 'val'")
    if any(not 0.0 <= p <= 1.0 for p in an.p_mask_grid):
        errs.append("analysis.p_mask_grid: values must lie in [0, 1]")
    if sorted(set(an.sizes)) != list(an.sizes) or any(n < 2 or n % 2 for n in an.sizes):
        errs.append("analysis.sizes: must be strictly increasing positive even integers")
    if not an.seeds:
        errs.append("analysis.seeds: need at least one seed")
    if an.steps < 1:
        errs.append("analysis.steps: must be >= 1")
    return errs


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read ({exc.strerror})"]) from exc
    return parse_config(doc if doc is not None else {})


def loads_config(text: str) -> ExperimentConfig:
    return parse_config(yaml.safe_load(text) or {})
