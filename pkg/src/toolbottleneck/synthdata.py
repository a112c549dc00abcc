"""Synthetic tasks with known ground truth.

Discrete tasks render each tool value as a constant one-channel map, so a
knockout-trained model can be compared against exact conditionals. Image
tasks draw polygonal "nuclei" with HoverNet-style records that the toolbox
rasterizers consume; labels are deterministic functions of the records.
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ._rng import rng_stream
from .knockout import DiscreteJointTable
from .tbm import LabeledDataset, _param_dtype
from .toolbox import InstanceRecord, Toolbox, ToolSpec, compute_tool_stack, histopathology_toolbox

DISCRETE_RULES = ("copy", "xor", "and", "or", "table")
IMAGE_RULES = ("count", "planted")


# --------------------------------------------------------------------------
# discrete tasks


@dataclass
class DiscreteTaskSpec:
    n_tools: int = 3
    cardinalities: tuple[int, ...] = (2, 2, 2)
    tool_marginals: tuple[tuple[float, ...], ...] | None = None  # None: uniform per tool
    label_rule: str = "copy"
    label_table: tuple[float, ...] | None = None  # P(y=1|z), z in lexicographic symbol order
    n_train: int = 8192
    n_val: int = 2048
    resolution: int = 4
    seed: int = 0

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        if len(self.cardinalities) != self.n_tools or min(self.cardinalities) < 2:
            raise ValueError("need one cardinality >= 2 per tool")
        if self.tool_marginals is not None:
            self.tool_marginals = tuple(tuple(float(v) for v in m) for m in self.tool_marginals)
            for m, c in zip(self.tool_marginals, self.cardinalities):
                if len(m) != c or min(m) < 0 or abs(sum(m) - 1) > 1e-9:
                    raise ValueError(f"bad tool marginal {m}")
        if self.label_rule not in DISCRETE_RULES:
            raise ValueError(f"label_rule must be one of {DISCRETE_RULES}")
        if self.label_rule == "table":
            n_cells = math.prod(self.cardinalities)
            if self.label_table is None or len(self.label_table) != n_cells:
                raise ValueError(f"label_table needs {n_cells} entries")
        elif self.label_rule != "copy" and (self.n_tools < 2 or max(self.cardinalities) > 2):
            raise ValueError(f"rule {self.label_rule!r} needs >= 2 binary tools")

    def marginals(self) -> list[np.ndarray]:
        if self.tool_marginals is None:
            return [np.full(c, 1.0 / c) for c in self.cardinalities]
        return [np.asarray(m) for m in self.tool_marginals]

    def symbol_values(self, symbols: np.ndarray) -> np.ndarray:
        """Map symbol s of a card-c tool to s / (c - 1) in [0, 1]."""
        card = np.asarray(self.cardinalities, dtype=np.float64)
        return np.asarray(symbols, dtype=np.float64) / (card - 1)

    def p_label(self, symbols: Sequence[int]) -> float:
        z = tuple(int(s) for s in symbols)
        if self.label_rule == "copy":
            return z[0] / (self.cardinalities[0] - 1)
        if self.label_rule == "xor":
            return float(z[0] ^ z[1])
        if self.label_rule == "and":
            return float(z[0] & z[1])
        if self.label_rule == "or":
            return float(z[0] | z[1])
        cells = list(itertools.product(*[range(c) for c in self.cardinalities]))
        return float(self.label_table[cells.index(z)])


def discrete_joint(spec: DiscreteTaskSpec) -> DiscreteJointTable:
    """Exact joint of (rendered tool values, y) for the generating process."""
    margs = spec.marginals()
    zs, ys, ps = [], [], []
    for sym in itertools.product(*[range(c) for c in spec.cardinalities]):
        pz = math.prod(m[s] for m, s in zip(margs, sym))
        p1 = spec.p_label(sym)
        vals = spec.symbol_values(np.array(sym))
        for y, py in ((0, 1.0 - p1), (1, p1)):
            zs.append(vals)
            ys.append(y)
            ps.append(pz * py)
    p = np.array(ps)
    return DiscreteJointTable(np.array(zs), np.array(ys), p / p.sum())


def render_constant_stacks(values: np.ndarray, resolution: int) -> np.ndarray:
    """(n, N) tool values -> (n, N, R, R) constant maps."""
    values = np.asarray(values, dtype=np.float32)
    return np.ascontiguousarray(np.broadcast_to(values[:, :, None, None], values.shape + (resolution, resolution)))


def _sample_discrete(spec: DiscreteTaskSpec, n: int, split: str) -> LabeledDataset:
    rng = rng_stream(spec.seed, "discrete", split)
    syms = np.stack([rng.choice(c, size=n, p=m) for c, m in zip(spec.cardinalities, spec.marginals())], axis=1)
    p1 = np.array([spec.p_label(row) for row in syms]) if n else np.zeros(0)
    labels = (rng.random(n) < p1).astype(np.int64)
    values = spec.symbol_values(syms)
    return LabeledDataset(
        image_ids=[f"{split}-{i:06d}" for i in range(n)],
        stacks=render_constant_stacks(values, spec.resolution),
        labels=labels,
        selections=np.ones((n, spec.n_tools), dtype=np.int8),
        split=split,
        meta={"values": values},
    )


def generate_discrete_task(spec: DiscreteTaskSpec) -> tuple[dict[str, LabeledDataset], DiscreteJointTable]:
    splits = {"train": _sample_discrete(spec, spec.n_train, "train"), "val": _sample_discrete(spec, spec.n_val, "val")}
    return splits, discrete_joint(spec)


def discrete_toolbox(n_tools: int, resolution: int = 4) -> Toolbox:
    """One constant-map tool per discrete variable, ids ``z1..zN``.

    Each tool reads ``annotations["values"][i]``; it exists so discrete tasks
    share the registry plumbing with image tasks.
    """

    def make(i):
        def fn(img, ann):
            return np.full((1, resolution, resolution), ann["values"][i], dtype=np.float32)

        return ToolSpec(f"z{i + 1}", "synthetic", 1, f"Discrete synthetic variable {i + 1} as a constant map.", fn)

    return Toolbox(make(i) for i in range(n_tools))


def discrete_model_fn(model: torch.nn.Module, resolution: int) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a fusion model as ``(B, N) tool values -> P(y=1)`` (placeholders already applied)."""

    @torch.no_grad()
    def fn(values: np.ndarray) -> np.ndarray:
        model.eval()
        values = np.asarray(values, dtype=np.float64)
        uniq, inverse = np.unique(values, axis=0, return_inverse=True)
        x = torch.from_numpy(render_constant_stacks(uniq, resolution)).to(_param_dtype(model))
        probs = torch.sigmoid(model(x)).double().numpy()
        return probs[np.asarray(inverse).ravel()]

    return fn


# --------------------------------------------------------------------------
# image tasks


@dataclass
class ImageTaskSpec:
    canvas: tuple[int, int] = (64, 64)
    out_size: tuple[int, int] = (32, 32)
    count_range: tuple[int, int] = (0, 10)  # inclusive; crowded draws may place fewer
    min_separation: float = 3.0  # gap between instance disks, source pixels
    radius_range: tuple[float, float] = (2.5, 4.5)
    n_vertices: int = 8
    num_types: int = 6
    prob_range: tuple[float, float] = (0.5, 1.0)
    label_rule: str = "count"
    count_threshold: int = 5  # label 1 iff count > threshold
    planted_type: int = 3
    planted_rate: float = 0.5
    planted_prob_range: tuple[float, float] | None = None
    color_shift: float = 0.06  # raw-image hue offset of the planted type
    pixel_noise: float = 0.08
    shortcut_box_pad: int = 0  # train split only: boxes of positive images padded (site artefact)
    n_train: int = 1024
    n_val: int = 256
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.out_size = tuple(int(v) for v in self.out_size)
        self.count_range = tuple(int(v) for v in self.count_range)
        if self.label_rule not in IMAGE_RULES:
            raise ValueError(f"label_rule must be one of {IMAGE_RULES}")
        if not 0 <= self.planted_type < self.num_types:
            raise ValueError("planted_type out of range")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError("bad count_range")
        if self.label_rule == "planted" and hi < 1:
            raise ValueError("planted rule needs room for at least one instance")
        if self.shortcut_box_pad < 0:
            raise ValueError("shortcut_box_pad must be >= 0")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def label_from_instances(spec: ImageTaskSpec, instances: Sequence[InstanceRecord]) -> int:
    if spec.label_rule == "count":
        return int(len(instances) > spec.count_threshold)
    return int(any(inst.type_label == spec.planted_type for inst in instances))


def _random_polygon(rng: np.random.Generator, spec: ImageTaskSpec, centers: list[tuple[float, float]]) -> np.ndarray | None:
    """Random star-shaped polygon whose center keeps ``min_separation`` from ``centers``."""
    h0, w0 = spec.canvas
    r = rng.uniform(*spec.radius_range)
    margin = int(math.ceil(r * 1.15)) + 1
    reach = 2 * spec.radius_range[1] * 1.15 + spec.min_separation
    for _ in range(100):
        cx = rng.uniform(margin, w0 - 1 - margin)
        cy = rng.uniform(margin, h0 - 1 - margin)
        if all((cx - x) ** 2 + (cy - y) ** 2 >= reach**2 for x, y in centers):
            break
    else:
        return None
    centers.append((cx, cy))
    angles = np.sort((np.arange(spec.n_vertices) + rng.uniform(-0.3, 0.3, spec.n_vertices)) * 2 * math.pi / spec.n_vertices)
    radii = r * rng.uniform(0.75, 1.15, spec.n_vertices)
    xs = np.clip(np.floor(cx + radii * np.cos(angles) + 0.5), 0, w0 - 1)
    ys = np.clip(np.floor(cy + radii * np.sin(angles) + 0.5), 0, h0 - 1)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def make_instance(pts: np.ndarray, type_label: int, type_prob: float) -> InstanceRecord:
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return InstanceRecord(
        box=(float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1)),
        centroid=(float(pts[:, 0].mean()), float(pts[:, 1].mean())),
        contour=tuple(map(tuple, pts.tolist())),
        type_label=type_label,
        type_prob=type_prob,
    )


def _draw_instances(spec: ImageTaskSpec, rng: np.random.Generator) -> list[InstanceRecord]:
    lo, hi = spec.count_range
    other_types = [t for t in range(1, spec.num_types) if t != spec.planted_type] or [0]
    if spec.label_rule == "planted":
        planted = rng.random() < spec.planted_rate
        count = int(rng.integers(max(lo, 1 if planted else 0), hi + 1))
    else:
        planted = False
        count = int(rng.integers(lo, hi + 1))
    types = [int(rng.choice(other_types)) for _ in range(count)]
    if planted:
        types[int(rng.integers(count))] = spec.planted_type
    out: list[InstanceRecord] = []
    centers: list[tuple[float, float]] = []
    # planted instance goes first so crowding never drops it
    for t in sorted(types, key=lambda t: t != spec.planted_type):
        pts = _random_polygon(rng, spec, centers)
        if pts is None:
            continue
        prob_range = spec.planted_prob_range if (t == spec.planted_type and spec.planted_prob_range) else spec.prob_range
        out.append(make_instance(pts, t, float(rng.uniform(*prob_range))))
    return out


_BACKGROUND = np.array([0.92, 0.78, 0.86])
_NUCLEUS = np.array([0.45, 0.25, 0.6])


def render_image(spec: ImageTaskSpec, instances: Sequence[InstanceRecord], rng: np.random.Generator) -> np.ndarray:
    """H&E-flavoured RGB rendering (3 x out_size) of the instances, for pixel baselines."""
    from .toolbox import polygon_interior

    h0, w0 = spec.canvas
    img = np.broadcast_to(_BACKGROUND[:, None, None], (3, h0, w0)).copy()
    for inst in instances:
        color = _NUCLEUS + rng.normal(0.0, 0.04, 3)
        if inst.type_label == spec.planted_type:
            color = color + np.array([spec.color_shift, -spec.color_shift, 0.0])
        pts = np.array(inst.contour, dtype=np.int64)
        inner = polygon_interior(pts, (h0, w0))
        img[:, inner] = color[:, None]
    img += rng.normal(0.0, spec.pixel_noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    oh, ow = spec.out_size
    if (oh, ow) != (h0, w0):
        if h0 % oh or w0 % ow:
            raise ValueError("raw rendering needs integer downsampling factors")
        img = img.reshape(3, oh, h0 // oh, ow, w0 // ow).mean(axis=(2, 4))
    return img.astype(np.float32)


def _pad_box(inst: InstanceRecord, pad: int, canvas: tuple[int, int]) -> InstanceRecord:
    h0, w0 = canvas
    x, y, bw, bh = inst.box
    x0, y0 = max(0.0, x - pad), max(0.0, y - pad)
    x1, y1 = min(float(w0), x + bw + pad), min(float(h0), y + bh + pad)
    return InstanceRecord((x0, y0, x1 - x0, y1 - y0), inst.centroid, inst.contour, inst.type_label, inst.type_prob)


def _generate_split(spec: ImageTaskSpec, toolbox: Toolbox, n: int, split: str) -> LabeledDataset:
    ids, stacks, labels, insts, images = [], [], [], [], []
    for i in range(n):
        rng = rng_stream(spec.seed, "image-task", split, i)
        instances = _draw_instances(spec, rng)
        label = label_from_instances(spec, instances)
        if split == "train" and label == 1 and spec.shortcut_box_pad:
            instances = [_pad_box(inst, spec.shortcut_box_pad, spec.canvas) for inst in instances]
        ids.append(f"{split}-{i:05d}")
        insts.append(instances)
        labels.append(label)
        stacks.append(compute_tool_stack(None, {"instances": instances}, toolbox))
        images.append(render_image(spec, instances, rng))
    c = toolbox.total_channels
    return LabeledDataset(
        image_ids=ids,
        stacks=np.stack(stacks) if stacks else np.zeros((0, c) + spec.out_size, np.float32),
        labels=np.array(labels, dtype=np.int64),
        selections=None,
        split=split,
        instances=insts,
        images=np.stack(images) if images else np.zeros((0, 3) + spec.out_size, np.float32),
    )


def image_toolbox(spec: ImageTaskSpec, blob_radius: float = 2) -> Toolbox:
    return histopathology_toolbox(spec.canvas, spec.out_size, spec.num_types, blob_radius)


def generate_image_task(spec: ImageTaskSpec, toolbox: Toolbox | None = None) -> dict[str, LabeledDataset]:
    toolbox = toolbox or image_toolbox(spec)
    return {
        "train": _generate_split(spec, toolbox, spec.n_train, "train"),
        "val": _generate_split(spec, toolbox, spec.n_val, "val"),
    }


def restack(dataset: LabeledDataset, toolbox: Toolbox, instances: Sequence[Sequence[InstanceRecord]]) -> np.ndarray:
    """Re-rasterize every item from (possibly edited) instance lists."""
    return np.stack([compute_tool_stack(None, {"instances": inst}, toolbox) for inst in instances])


def oracle_label_from_stack(spec: ImageTaskSpec, stack: np.ndarray, toolbox: Toolbox) -> int:
    """Re-derive the label from rasterized maps alone (no access to records)."""
    from scipy import ndimage

    if spec.label_rule == "planted":
        type_block = stack[toolbox.channel_slice(toolbox.index("histo_nuc_type"))]
        return int(type_block[spec.planted_type].any())
    centroid = stack[toolbox.channel_slice(toolbox.index("histo_nuc_centroid"))][0] > 0.5
    _, count = ndimage.label(centroid)
    return int(count > spec.count_threshold)


# --------------------------------------------------------------------------
# subsampling and persistence


def balanced_subsample(dataset: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """``n/2`` items of each class, uniformly without replacement."""
    if n < 2 or n % 2:
        raise ValueError(f"n={n} must be a positive even number")
    half = n // 2
    pos = np.flatnonzero(dataset.labels == 1)
    neg = np.flatnonzero(dataset.labels == 0)
    if len(pos) < half or len(neg) < half:
        raise ValueError(f"need {half} items per class, have {len(pos)} positive / {len(neg)} negative")
    rng = rng_stream(seed, "balanced-subsample", n)
    chosen = np.sort(np.concatenate([rng.choice(pos, half, replace=False), rng.choice(neg, half, replace=False)]))
    return dataset.subset(chosen)


def save_dataset(directory: str | Path, dataset: LabeledDataset, task_spec: dict[str, Any] | None = None) -> Path:
    """One ``.npz`` per item plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "items").mkdir(parents=True, exist_ok=True)
    for i, image_id in enumerate(dataset.image_ids):
        arrays: dict[str, Any] = {"stack": dataset.stacks[i], "label": dataset.labels[i]}
        if dataset.selections is not None:
            arrays["selection"] = dataset.selections[i]
        if dataset.images is not None:
            arrays["image"] = dataset.images[i]
        np.savez_compressed(directory / "items" / f"{image_id}.npz", **arrays)
        if dataset.instances is not None:
            doc = {str(j): inst.to_json() for j, inst in enumerate(dataset.instances[i])}
            (directory / "items" / f"{image_id}.instances.json").write_text(json.dumps(doc))
    manifest = {
        "task_spec": task_spec or {},
        "seed": (task_spec or {}).get("seed"),
        "split": dataset.split,
        "split_sizes": {dataset.split: len(dataset)},
        "image_ids": dataset.image_ids,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory: str | Path) -> LabeledDataset:
    from .toolbox import load_instances

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    stacks, labels, sels, images, insts = [], [], [], [], []
    for image_id in manifest["image_ids"]:
        with np.load(directory / "items" / f"{image_id}.npz") as z:
            stacks.append(z["stack"])
            labels.append(int(z["label"]))
            sels.append(z["selection"] if "selection" in z else None)
            images.append(z["image"] if "image" in z else None)
        inst_path = directory / "items" / f"{image_id}.instances.json"
        insts.append(load_instances(inst_path) if inst_path.exists() else None)
    return LabeledDataset(
        image_ids=manifest["image_ids"],
        stacks=np.stack(stacks),
        labels=np.array(labels),
        selections=None if any(s is None for s in sels) else np.stack(sels),
        split=manifest["split"],
        instances=None if any(i is None for i in insts) else insts,
        images=None if any(i is None for i in images) else np.stack(images),
        meta={"task_spec": manifest["task_spec"]},
    )
