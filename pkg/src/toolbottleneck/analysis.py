"""Post-hoc analyses over trained fusion models."""

from __future__ import annotations

import json
import math
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from ._rng import rng_stream
from .knockout import DiscreteJointTable, enumerate_masks, marginal_conditional_oracle
from .selection import SelectionVector
from .synthdata import balanced_subsample, restack
from .tbm import (
    FusionModelConfig,
    LabeledDataset,
    TrainConfig,
    UndefinedAUCError,
    build_fusion_model,
    evaluate,
    predict,
    train,
)
from .toolbox import InstanceRecord, Toolbox

DEFAULT_P_MASK_GRID = (0.0, 0.2, 0.4, 0.6, 0.8)
DEFAULT_SIZES = (4, 8, 16, 32, 64, 128, 256)


@dataclass(frozen=True)
class MetricSpec:
    name: str = "accuracy"
    direction: str = "higher"

    def __post_init__(self):
        if self.name not in ("accuracy", "auc"):
            raise ValueError(f"unsupported metric {self.name!r}")


@dataclass
class ImportanceReport:
    rows: list[dict[str, Any]]  # tool_id, importance, baseline, ablated
    metric: str
    split: str
    n: int

    def importances(self) -> dict[str, float]:
        return {r["tool_id"]: r["importance"] for r in self.rows}

    def consistent(self, tol: float = 1e-12) -> bool:
        return all(abs(r["importance"] - (r["baseline"] - r["ablated"])) <= tol for r in self.rows)

    def to_json(self) -> dict[str, Any]:
        return {"rows": self.rows, "metadata": {"metric": self.metric, "split": self.split, "n": self.n}}

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "ImportanceReport":
        meta = d["metadata"]
        return cls(list(d["rows"]), meta["metric"], meta["split"], meta["n"])


def _metric(model, dataset, channels_per_tool, mask, metric: MetricSpec, placeholder) -> float:
    value = evaluate(model, dataset, channels_per_tool, mask, placeholder)[metric.name]
    if value is None:
        raise UndefinedAUCError("AUC undefined on a single-class validation set")
    return float(value)


def tool_importance(
    model,
    val_set: LabeledDataset,
    toolbox: Toolbox,
    metric: MetricSpec = MetricSpec(),
    placeholder: float = -1.0,
) -> ImportanceReport:
    """Leave-one-tool-out drop in ``metric`` with every other tool live.

    Accuracy is an item average, so the per-item and set-level readings of
    the definition agree; AUC is computed at set level on both sides.
    """
    layout = toolbox.channels_per_tool
    n_tools = len(toolbox)
    baseline = _metric(model, val_set, layout, np.zeros(n_tools, np.int8), metric, placeholder)
    rows = []
    for i, tool_id in enumerate(toolbox.tool_ids):
        mask = np.zeros(n_tools, np.int8)
        mask[i] = 1
        ablated = _metric(model, val_set, layout, mask, metric, placeholder)
        rows.append({"tool_id": tool_id, "importance": baseline - ablated, "baseline": baseline, "ablated": ablated})
    return ImportanceReport(rows, metric.name, val_set.split, len(val_set))


def knockout_verification(
    model_fn: Callable[[np.ndarray], np.ndarray],
    joint: DiscreteJointTable,
    min_prob: float = 0.01,
    placeholder: float = -1.0,
) -> list[dict[str, Any]]:
    """Compare P(y=1) under every mask with the exact marginal conditional.

    ``model_fn`` maps knocked-out tool values ``(B, N)`` to P(y=1). One row
    per (mask, observed configuration) whose marginal probability is at
    least ``min_prob``.
    """
    rows = []
    for mask in enumerate_masks(joint.n_tools):
        keep = mask.array == 0
        configs = joint.observed_configurations(mask, min_prob)
        if not configs:
            continue
        values = np.full((len(configs), joint.n_tools), placeholder, dtype=np.float64)
        values[:, keep] = np.array([c for c, _ in configs]).reshape(len(configs), -1)
        preds = model_fn(values)
        for (obs, prob), pred in zip(configs, preds):
            oracle = marginal_conditional_oracle(joint, mask, obs).get(1, 0.0)
            rows.append({"mask": list(mask.bits), "observed": list(obs), "p_config": prob,
                         "oracle": oracle, "model": float(pred), "abs_err": abs(float(pred) - oracle)})
    return rows


def max_error_per_mask(rows: Sequence[Mapping[str, Any]]) -> dict[tuple[int, ...], float]:
    out: dict[tuple[int, ...], float] = {}
    for r in rows:
        key = tuple(r["mask"])
        out[key] = max(out.get(key, 0.0), r["abs_err"])
    return out


# --------------------------------------------------------------------------
# interventions


def instance_dropout(instances: Sequence[InstanceRecord], p_mask: float, rng: np.random.Generator) -> list[InstanceRecord]:
    """Keep each instance independently with probability ``1 - p_mask``."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask={p_mask} outside [0, 1]")
    return _survivors(instances, p_mask, rng.random(len(instances)))


def _survivors(instances, p_mask, uniforms) -> list[InstanceRecord]:
    return [inst for inst, u in zip(instances, uniforms) if u >= p_mask]


def intervention_sweep(
    model,
    val_set: LabeledDataset,
    toolbox: Toolbox,
    p_mask_grid: Sequence[float] = DEFAULT_P_MASK_GRID,
    rng_seed: int = 0,
    mask_policy="none",
    placeholder: float = -1.0,
) -> dict[float, float]:
    """Fraction of items predicted negative after dropping instances at each p_mask.

    One uniform per instance is drawn once and reused across the grid, so the
    surviving sets are nested as p_mask grows. Maps are re-rasterized from the
    survivors.
    """
    if val_set.instances is None:
        raise ValueError("intervention needs instance annotations")
    uniforms = [rng_stream(rng_seed, "instance-dropout", iid).random(len(inst))
                for iid, inst in zip(val_set.image_ids, val_set.instances)]
    n_tools = len(toolbox)
    if isinstance(mask_policy, str) and mask_policy == "selection":
        masks = 1 - val_set.selections
    elif isinstance(mask_policy, str):
        masks = np.zeros((len(val_set), n_tools), np.int8)
    else:
        masks = np.broadcast_to(np.asarray(mask_policy, np.int8), (len(val_set), n_tools))
    out = {}
    for p in p_mask_grid:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p_mask={p} outside [0, 1]")
        kept = [_survivors(inst, p, u) for inst, u in zip(val_set.instances, uniforms)]
        stacks = restack(val_set, toolbox, kept)
        probs = predict(model, stacks, masks, toolbox.channels_per_tool, placeholder)
        out[float(p)] = float(np.mean(probs < 0.5))
    return out


# --------------------------------------------------------------------------
# selection statistics


@dataclass
class SelectionStats:
    frequency: np.ndarray
    combinations: Counter
    n: int

    def to_json(self, tool_ids: Sequence[str] | None = None) -> dict[str, Any]:
        ids = list(tool_ids) if tool_ids is not None else [str(i) for i in range(len(self.frequency))]
        return {
            "n": self.n,
            "frequency": dict(zip(ids, self.frequency.tolist())),
            "combinations": [
                {"bits": list(bits), "tools": [t for t, b in zip(ids, bits) if b], "count": c}
                for bits, c in self.combinations.most_common()
            ],
        }


def selection_frequency(selections: Sequence[SelectionVector] | np.ndarray) -> SelectionStats:
    """Per-tool normalized selection frequency and exact-pattern histogram."""
    rows = np.array([s.bits if isinstance(s, SelectionVector) else tuple(s) for s in selections], dtype=np.int64)
    if rows.size == 0:
        raise ValueError("no selections given")
    return SelectionStats(rows.mean(axis=0), Counter(map(tuple, rows.tolist())), len(rows))


# --------------------------------------------------------------------------
# data efficiency


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float | None]:
    """Mean and t-distribution CI half-width (``None`` with fewer than 2 values)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if len(v) < 2:
        return mean, None
    half = stats.t.ppf(0.5 + level / 2, df=len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v))
    return mean, float(half)


@dataclass
class DataEfficiencyCurve:
    trainer: str
    points: list[dict[str, Any]] = field(default_factory=list)  # n, values, mean, ci95

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def means(self) -> dict[int, float]:
        return {p["n"]: p["mean"] for p in self.points}


Trainer = Callable[[LabeledDataset, LabeledDataset, int], float]


def data_efficiency_run(
    train_set: LabeledDataset,
    val_set: LabeledDataset,
    sizes: Sequence[int],
    seeds: Sequence[int],
    trainers: Mapping[str, Trainer],
) -> dict[str, DataEfficiencyCurve]:
    """Train every trainer on balanced subsets of each size; score on the full val split."""
    sizes = list(sizes)
    if sorted(set(sizes)) != sizes:
        raise ValueError("sizes must be strictly increasing")
    curves = {}
    for name, fit in trainers.items():
        curve = DataEfficiencyCurve(name)
        for n in sizes:
            values = []
            for seed in seeds:
                subset = train_set if n == len(train_set) else balanced_subsample(train_set, n, seed)
                try:
                    values.append(float(fit(subset, val_set, seed)))
                except Exception as exc:
                    raise RuntimeError(f"trainer {name!r} failed at size {n}, seed {seed}: {exc}") from exc
            mean, half = mean_ci(values)
            curve.points.append({"n": n, "values": values, "mean": mean, "ci95": half})
        curves[name] = curve
    return curves


def _budget_epochs(n: int, batch_size: int, steps: int, min_epochs: int) -> int:
    return max(min_epochs, math.ceil(steps / math.ceil(n / batch_size)))


def tbm_trainer(
    channels_per_tool: Sequence[int],
    widths: Sequence[int],
    config: TrainConfig,
    metric: str = "accuracy",
    steps: int = 300,
    min_epochs: int = 5,
) -> Trainer:
    """Knockout-trained fusion model on the tool stack, fixed optimizer-step budget."""

    def fit(train_set: LabeledDataset, val_set: LabeledDataset, seed: int) -> float:
        h, w = train_set.stacks.shape[-2:]
        model = build_fusion_model(FusionModelConfig(sum(channels_per_tool), tuple(widths), (h, w)), seed)
        epochs = _budget_epochs(len(train_set), config.batch_size, steps, min_epochs)
        cfg = TrainConfig(**{**asdict(config), "seed": seed, "epochs": epochs})
        train(model, train_set, val_set, channels_per_tool, cfg)
        return evaluate(model, val_set, channels_per_tool, "selection" if val_set.selections is not None else "none",
                        cfg.placeholder)[metric]

    return fit


def pixel_trainer(
    widths: Sequence[int],
    config: TrainConfig,
    metric: str = "accuracy",
    steps: int = 300,
    min_epochs: int = 5,
) -> Trainer:
    """Same CNN and budget on raw RGB pixels, no tools and no knockout."""

    def fit(train_set: LabeledDataset, val_set: LabeledDataset, seed: int) -> float:
        tr, va = train_set.pixel_view(), val_set.pixel_view()
        h, w = tr.stacks.shape[-2:]
        model = build_fusion_model(FusionModelConfig(tr.stacks.shape[1], tuple(widths), (h, w)), seed)
        epochs = _budget_epochs(len(tr), config.batch_size, steps, min_epochs)
        cfg = TrainConfig(**{**asdict(config), "seed": seed, "epochs": epochs, "alpha": 1.0, "sampling": "perturb"})
        train(model, tr, va, (tr.stacks.shape[1],), cfg)
        return evaluate(model, va, (tr.stacks.shape[1],), "none")[metric]

    return fit


# --------------------------------------------------------------------------
# persistence and plots


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_importance(report: ImportanceReport, path: str | Path, frequency: Mapping[str, float] | None = None) -> Path:
    plt = _pyplot()
    ids = [r["tool_id"] for r in report.rows]
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(ids) + 2), 3.5))
    ax.bar(x - 0.2 if frequency else x, [r["importance"] for r in report.rows], width=0.4, label="importance")
    ax.set_ylabel(f"importance (delta {report.metric})")
    if frequency:
        ax2 = ax.twinx()
        ax2.bar(x + 0.2, [frequency.get(t, 0.0) for t in ids], width=0.4, color="tab:orange", label="selection freq.")
        ax2.set_ylabel("selection frequency")
    ax.set_xticks(x, ids, rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_curves(curves: Mapping[str, DataEfficiencyCurve], path: str | Path, metric: str = "accuracy") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in curves.items():
        n = np.array([p["n"] for p in curve.points])
        mean = np.array([p["mean"] for p in curve.points])
        half = np.array([p["ci95"] if p["ci95"] is not None else 0.0 for p in curve.points])
        ax.plot(n, mean, marker="o", label=name)
        ax.fill_between(n, mean - half, mean + half, alpha=0.2)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("training images")
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_sweep(sweep: Mapping[float, float], path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    ps = sorted(sweep)
    ax.plot(ps, [sweep[p] for p in ps], marker="o")
    ax.set_xlabel("p_mask")
    ax.set_ylabel("fraction predicted negative")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_combinations(stats_: SelectionStats, tool_ids: Sequence[str], path: str | Path, top: int = 15) -> Path:
    plt = _pyplot()
    common = stats_.combinations.most_common(top)
    labels = ["+".join(t for t, b in zip(tool_ids, bits) if b) or "(none)" for bits, _ in common]
    fig, ax = plt.subplots(figsize=(6, 0.35 * len(common) + 1.5))
    ax.barh(np.arange(len(common)), [c / stats_.n for _, c in common])
    ax.set_yticks(np.arange(len(common)), labels)
    ax.invert_yaxis()
    ax.set_xlabel("fraction of images")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
