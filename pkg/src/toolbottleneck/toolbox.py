"""Tool registry and rasterization of tool outputs into aligned feature maps.

Every rasterizer paints on a binary (or [0, 1]) source canvas of size
``(H0, W0)`` and then block-max downsamples to the experiment resolution.
Maps are float32 arrays of shape ``(C, H, W)``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

MODALITIES = ("histopathology", "dermatology", "synthetic")
DEFAULT_NUM_TYPES = 6
DEFAULT_BLOB_RADIUS = 2
DEFAULT_MIN_AREA = 10
DEFAULT_MINKOWSKI_P = 6.0

# Keyed by tool id; used verbatim in selector prompts.
TOOL_DESCRIPTIONS = {
    "histo_nuc_centroid": "Returns each nucleus centroid in [x_center, y_center]",
    "histo_nuc_bbox": "Returns each nucleus bounding box in [x_top_left, y_top_left, width, height]",
    "histo_nuc_contour": "Returns the polygon points tracing each nucleus boundary",
    "histo_nuc_type": (
        "Returns the predicted nucleus type label (0-5; e.g., epithelial, inflammatory, "
        "connective, dead, non-neoplastic epithelial)"
    ),
    "histo_nuc_type_prob": "Returns class-probability scores for the predicted nucleus type",
    "derm_lesion_segmenter": "Segments lesion ROI",
    "derm_pigment_network": "Detects reticular pigment network",
    "derm_negative_network": "Detects negative network (white lines)",
    "derm_streaks_detector": "Detects radial streaks or pseudopods at edges",
    "derm_milia_like_cyst_detector": "Detects milia-like cysts (often SK)",
    "derm_marker_malignant_union": "Union of malignancy chromatic markers",
    "derm_marker_browns": "Detects brown pigment regions",
}


class RasterizationError(ValueError):
    """Invalid instance input; ``index`` points at the offending record when known."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"instance {index}: {message}")
        self.index = index


class ToolError(RuntimeError):
    def __init__(self, tool_id: str, cause: BaseException):
        super().__init__(f"tool {tool_id!r} failed: {cause}")
        self.tool_id = tool_id
        self.__cause__ = cause


@dataclass(frozen=True)
class InstanceRecord:
    """One detected instance, in source-canvas pixel coordinates."""

    box: tuple[float, float, float, float]  # x_top_left, y_top_left, width, height
    centroid: tuple[float, float]  # x_center, y_center
    contour: tuple[tuple[float, float], ...]  # (x, y) vertices
    type_label: int = 0
    type_prob: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        object.__setattr__(self, "centroid", tuple(float(v) for v in self.centroid))
        object.__setattr__(self, "contour", tuple((float(x), float(y)) for x, y in self.contour))
        object.__setattr__(self, "type_label", int(self.type_label))
        object.__setattr__(self, "type_prob", float(self.type_prob))

    def to_json(self) -> dict[str, Any]:
        return {
            "box": list(self.box),
            "centroid": list(self.centroid),
            "contour": [list(p) for p in self.contour],
            "prob": self.type_prob,
            "type": self.type_label,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "InstanceRecord":
        return cls(
            box=tuple(d["box"]),
            centroid=tuple(d["centroid"]),
            contour=tuple(tuple(p) for p in d["contour"]),
            type_label=d.get("type", 0) if d.get("type") is not None else 0,
            type_prob=d.get("prob", 1.0) if d.get("prob") is not None else 1.0,
        )


def load_instances(source: str | Path | Mapping[str, Any]) -> list[InstanceRecord]:
    """Read a ``{nuc_id: {box, centroid, contour, prob, type}}`` document."""
    if isinstance(source, (str, Path)):
        source = json.loads(Path(source).read_text())

    def _order(key: str):
        return (0, int(key), "") if str(key).lstrip("-").isdigit() else (1, 0, str(key))

    return [InstanceRecord.from_json(source[k]) for k in sorted(source, key=_order)]


def dump_instances(instances: Sequence[InstanceRecord], path: str | Path | None = None) -> dict:
    doc = {str(i): inst.to_json() for i, inst in enumerate(instances)}
    if path is not None:
        Path(path).write_text(json.dumps(doc))
    return doc


# --------------------------------------------------------------------------
# canvas helpers


def _block_starts(n_src: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_src) // n_out


def block_bounds(n_src: int, n_out: int) -> list[tuple[int, int]]:
    """Source index range ``[start, stop)`` that feeds each output index."""
    starts = _block_starts(n_src, n_out)
    bounds = []
    for i, s in enumerate(starts):
        nxt = ((i + 1) * n_src) // n_out
        bounds.append((int(s), int(max(s + 1, nxt))))
    return bounds


def downsample_max(canvas: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Block-max pooling of a ``(C, H0, W0)`` or ``(H0, W0)`` canvas to ``out_size``.

    Non-integer ratios assign each output pixel the nearest whole block of
    source pixels, so thin structures are never lost.
    """
    squeeze = canvas.ndim == 2
    if squeeze:
        canvas = canvas[None]
    h0, w0 = canvas.shape[-2:]
    h, w = out_size
    if (h0, w0) == (h, w):
        out = canvas.copy()
    else:
        out = np.maximum.reduceat(canvas, _block_starts(h0, h), axis=1)
        out = np.maximum.reduceat(out, _block_starts(w0, w), axis=2)
    return out[0] if squeeze else out


def _check_sizes(source_size, out_size):
    h0, w0 = (int(v) for v in source_size)
    h, w = (int(v) for v in out_size)
    if min(h0, w0, h, w) < 1:
        raise ValueError(f"invalid canvas sizes {source_size} -> {out_size}")
    return (h0, w0), (h, w)


def _check_box(inst: InstanceRecord, idx: int, h0: int, w0: int):
    x, y, bw, bh = inst.box
    if bw < 0 or bh < 0 or x < 0 or y < 0 or x + bw > w0 or y + bh > h0:
        raise RasterizationError(f"box {list(inst.box)} outside {h0}x{w0} canvas", idx)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _vertices(inst: InstanceRecord, idx: int, h0: int, w0: int) -> np.ndarray:
    if len(inst.contour) < 3:
        raise RasterizationError(f"contour has {len(inst.contour)} vertices, need >= 3", idx)
    pts = np.array([[_round_half_up(x), _round_half_up(y)] for x, y in inst.contour], dtype=np.int64)
    if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() >= w0 or pts[:, 1].max() >= h0:
        raise RasterizationError(f"contour leaves the {h0}x{w0} canvas", idx)
    return pts


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer line from (x0, y0) to (x1, y1) inclusive, as (x, y) pairs."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pts = []
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _trace_polygon(canvas: np.ndarray, pts: np.ndarray, value: float = 1.0) -> None:
    n = len(pts)
    for i in range(n):
        (xa, ya), (xb, yb) = pts[i], pts[(i + 1) % n]
        line = np.array(bresenham(int(xa), int(ya), int(xb), int(yb)))
        canvas[line[:, 1], line[:, 0]] = np.maximum(canvas[line[:, 1], line[:, 0]], value)


def polygon_interior(pts: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of lattice points inside the polygon (even-odd) or on its traced boundary."""
    h0, w0 = shape
    mask = np.zeros(shape, dtype=bool)
    x_lo, y_lo = pts.min(axis=0)
    x_hi, y_hi = pts.max(axis=0)
    py, px = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1].astype(np.float64)
    inside = np.zeros(py.shape, dtype=bool)
    n = len(pts)
    for i in range(n):
        x1, y1 = (float(v) for v in pts[i])
        x2, y2 = (float(v) for v in pts[(i + 1) % n])
        straddles = (y1 > py) != (y2 > py)
        if not straddles.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (px < x_cross)
    mask[y_lo : y_hi + 1, x_lo : x_hi + 1] = inside
    trace = np.zeros(shape, dtype=np.float32)
    _trace_polygon(trace, pts)
    return mask | (trace > 0)


def _finish(canvas: np.ndarray, out_size) -> np.ndarray:
    return downsample_max(canvas, out_size).astype(np.float32)[None]


# --------------------------------------------------------------------------
# instance rasterizers


def rasterize_bboxes(instances: Sequence[InstanceRecord], source_size, out_size) -> np.ndarray:
    (h0, w0), out_size = _check_sizes(source_size, out_size)
    canvas = np.zeros((h0, w0), dtype=np.float32)
    for idx, inst in enumerate(instances):
        _check_box(inst, idx, h0, w0)
        x, y, bw, bh = inst.box
        # pixel (r, c) is covered iff x <= c < x + w and y <= r < y + h
        canvas[math.ceil(y) : math.ceil(y + bh), math.ceil(x) : math.ceil(x + bw)] = 1.0
    return _finish(canvas, out_size)


def rasterize_centroids(
    instances: Sequence[InstanceRecord],
    blob_radius: float = DEFAULT_BLOB_RADIUS,
    source_size=(96, 96),
    out_size=(96, 96),
) -> np.ndarray:
    (h0, w0), out_size = _check_sizes(source_size, out_size)
    if blob_radius < 0:
        raise ValueError("blob_radius must be >= 0")
    canvas = np.zeros((h0, w0), dtype=np.float32)
    r = int(math.floor(blob_radius))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disc = dx * dx + dy * dy <= blob_radius * blob_radius
    for idx, inst in enumerate(instances):
        cx, cy = inst.centroid
        if not (0 <= cx < w0 and 0 <= cy < h0):
            raise RasterizationError(f"centroid {list(inst.centroid)} outside {h0}x{w0} canvas", idx)
        cx, cy = min(_round_half_up(cx), w0 - 1), min(_round_half_up(cy), h0 - 1)
        ys, xs = dy[disc] + cy, dx[disc] + cx
        keep = (ys >= 0) & (ys < h0) & (xs >= 0) & (xs < w0)
        canvas[ys[keep], xs[keep]] = 1.0
    return _finish(canvas, out_size)


def rasterize_contours(instances: Sequence[InstanceRecord], source_size, out_size) -> np.ndarray:
    (h0, w0), out_size = _check_sizes(source_size, out_size)
    canvas = np.zeros((h0, w0), dtype=np.float32)
    for idx, inst in enumerate(instances):
        _trace_polygon(canvas, _vertices(inst, idx, h0, w0))
    return _finish(canvas, out_size)


def rasterize_type_onehot(
    instances: Sequence[InstanceRecord],
    num_types: int = DEFAULT_NUM_TYPES,
    source_size=(96, 96),
    out_size=(96, 96),
) -> np.ndarray:
    (h0, w0), out_size = _check_sizes(source_size, out_size)
    canvas = np.zeros((num_types, h0, w0), dtype=np.float32)
    for idx, inst in enumerate(instances):
        if not 0 <= inst.type_label < num_types:
            raise RasterizationError(f"type label {inst.type_label} not in [0, {num_types})", idx)
        canvas[inst.type_label][polygon_interior(_vertices(inst, idx, h0, w0), (h0, w0))] = 1.0
    return downsample_max(canvas, out_size).astype(np.float32)


def rasterize_type_prob(instances: Sequence[InstanceRecord], source_size, out_size) -> np.ndarray:
    (h0, w0), out_size = _check_sizes(source_size, out_size)
    canvas = np.zeros((h0, w0), dtype=np.float32)
    for idx, inst in enumerate(instances):
        if not 0.0 <= inst.type_prob <= 1.0:
            raise RasterizationError(f"type_prob {inst.type_prob} not in [0, 1]", idx)
        inner = polygon_interior(_vertices(inst, idx, h0, w0), (h0, w0))
        canvas[inner] = np.maximum(canvas[inner], np.float32(inst.type_prob))
    return _finish(canvas, out_size)


# --------------------------------------------------------------------------
# image-level tools


def shades_of_gray_normalize(rgb: np.ndarray, minkowski_p: float = DEFAULT_MINKOWSKI_P) -> np.ndarray:
    """Divide each channel of a ``3xHxW`` image by its Minkowski-p mean.

    The result is rescaled by its global maximum whenever that exceeds 1.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected 3xHxW image, got shape {rgb.shape}")
    if minkowski_p < 1:
        raise ValueError("minkowski_p must be >= 1")
    if rgb.min() < 0 or rgb.max() > 1:
        raise ValueError("rgb values must lie in [0, 1]")
    flat = rgb.reshape(3, -1)
    peak = flat.max(axis=1)
    if np.any(peak <= 0):
        raise ValueError("degenerate illuminant estimate")
    # factor out the channel max so large p cannot underflow
    illum = peak * np.mean((flat / peak[:, None]) ** minkowski_p, axis=1) ** (1.0 / minkowski_p)
    out = rgb / illum[:, None, None]
    top = out.max()
    if top > 1:
        out = out / top
    return out


@dataclass(frozen=True)
class ColorRule:
    """Conjunction of ``lo <= channel < hi`` bounds over normalized R, G, B."""

    name: str = ""
    r: tuple[float, float] = (-math.inf, math.inf)
    g: tuple[float, float] = (-math.inf, math.inf)
    b: tuple[float, float] = (-math.inf, math.inf)

    def __call__(self, rgb: np.ndarray) -> np.ndarray:
        out = np.ones(rgb.shape[1:], dtype=bool)
        for ch, (lo, hi) in enumerate((self.r, self.g, self.b)):
            out &= (rgb[ch] >= lo) & (rgb[ch] < hi)
        return out


# Threshold constants are design choices; only the color families are fixed.
MALIGNANT_COLOR_RULES = (
    ColorRule("black", r=(0.0, 0.2), g=(0.0, 0.2), b=(0.0, 0.2)),
    ColorRule("blue_gray", r=(0.2, 0.55), g=(0.3, 0.65), b=(0.45, 0.8)),
    ColorRule("white", r=(0.8, math.inf), g=(0.8, math.inf), b=(0.8, math.inf)),
)
BROWN_COLOR_RULES = (
    ColorRule("light_brown", r=(0.55, 0.85), g=(0.35, 0.6), b=(0.15, 0.4)),
    ColorRule("dark_brown", r=(0.25, 0.55), g=(0.12, 0.35), b=(0.0, 0.25)),
)


def _remove_small(mask: np.ndarray, min_area: int) -> np.ndarray:
    lab, n = ndimage.label(mask)  # default structure is 4-connected
    if n == 0:
        return mask
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[lab]


def _fill_small_holes(mask: np.ndarray, min_area: int) -> np.ndarray:
    lab, n = ndimage.label(~mask)
    if n == 0:
        return mask
    sizes = np.bincount(lab.ravel())
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    fill = sizes < min_area
    fill[0] = False
    fill[border] = False
    return mask | fill[lab]


def color_marker_map(
    rgb_normalized: np.ndarray,
    rules: Iterable[Callable[[np.ndarray], np.ndarray]],
    lesion_mask: np.ndarray,
    min_area: int = DEFAULT_MIN_AREA,
) -> np.ndarray:
    rgb_normalized = np.asarray(rgb_normalized)
    lesion = np.asarray(lesion_mask)
    if lesion.ndim == 3:
        lesion = lesion[0]
    if lesion.shape != rgb_normalized.shape[1:]:
        raise ValueError(f"lesion mask {lesion.shape} does not match image {rgb_normalized.shape[1:]}")
    lesion = lesion > 0.5
    hit = np.zeros(lesion.shape, dtype=bool)
    for rule in rules:
        hit |= rule(rgb_normalized)
    hit &= lesion
    hit = _remove_small(hit, min_area)
    hit = _fill_small_holes(hit, min_area) & lesion
    return hit.astype(np.float32)[None]


def decode_superpixel_rgb(rgb: np.ndarray) -> np.ndarray:
    """ISIC-style superpixel PNG (``HxWx3`` uint8) to an integer index map."""
    rgb = np.asarray(rgb).astype(np.int64)
    return rgb[..., 0] + (rgb[..., 1] << 8) + (rgb[..., 2] << 16)


def decode_superpixel_labels(
    superpixel_index_map: np.ndarray,
    positive_indices_per_structure: Mapping[str, Iterable[int]],
    out_size,
) -> dict[str, np.ndarray]:
    index_map = np.asarray(superpixel_index_map)
    _check_sizes(index_map.shape, out_size)
    present = set(np.unique(index_map).tolist())
    out = {}
    for name, positives in positive_indices_per_structure.items():
        positives = sorted(int(p) for p in positives)
        unknown = [p for p in positives if p not in present]
        if unknown:
            raise RasterizationError(f"structure {name!r}: unknown superpixel indices {unknown}")
        canvas = np.isin(index_map, positives).astype(np.float32)
        out[name] = _finish(canvas, out_size)
    return out


# --------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class ToolSpec:
    tool_id: str
    modality: str
    channels: int
    description: str
    compute: Callable[[Any, Mapping[str, Any]], np.ndarray] = field(compare=False, repr=False)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.channels < 1:
            raise ValueError(f"tool {self.tool_id!r}: channels must be >= 1")

    def __call__(self, image, annotations: Mapping[str, Any]) -> np.ndarray:
        fmap = np.asarray(self.compute(image, annotations), dtype=np.float32)
        if fmap.ndim != 3 or fmap.shape[0] != self.channels:
            raise ValueError(f"emitted shape {fmap.shape}, expected {self.channels} channels")
        if fmap.size and (fmap.min() < 0 or fmap.max() > 1):
            raise ValueError("feature map values outside [0, 1]")
        return fmap


class Toolbox:
    """Ordered, immutable collection of tools; order fixes the channel layout."""

    def __init__(self, tools: Iterable[ToolSpec]):
        self._tools = tuple(tools)
        ids = [t.tool_id for t in self._tools]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate tool ids: {dupes}")
        if not self._tools:
            raise ValueError("toolbox is empty")
        self._index = {t.tool_id: i for i, t in enumerate(self._tools)}

    def __len__(self) -> int:
        return len(self._tools)

    def __iter__(self) -> Iterator[ToolSpec]:
        return iter(self._tools)

    def __getitem__(self, i: int) -> ToolSpec:
        return self._tools[i]

    def __repr__(self) -> str:
        return f"Toolbox({list(self.tool_ids)})"

    @property
    def tools(self) -> tuple[ToolSpec, ...]:
        return self._tools

    @property
    def tool_ids(self) -> tuple[str, ...]:
        return tuple(t.tool_id for t in self._tools)

    @property
    def channels_per_tool(self) -> tuple[int, ...]:
        return tuple(t.channels for t in self._tools)

    @property
    def total_channels(self) -> int:
        return sum(self.channels_per_tool)

    def index(self, tool_id: str) -> int:
        try:
            return self._index[tool_id]
        except KeyError:
            raise KeyError(f"unknown tool id {tool_id!r}") from None

    def channel_slice(self, i: int) -> slice:
        start = sum(self.channels_per_tool[:i])
        return slice(start, start + self._tools[i].channels)

    def reordered(self, tool_ids: Sequence[str]) -> "Toolbox":
        if sorted(tool_ids) != sorted(self.tool_ids):
            raise ValueError("reordering must be a permutation of the tool ids")
        return Toolbox(self._tools[self.index(t)] for t in tool_ids)

    def modality_mask(self, modality: str) -> np.ndarray:
        return np.array([t.modality == modality for t in self._tools], dtype=np.int8)


def compute_tool_stack(image, annotations: Mapping[str, Any], toolbox: Toolbox) -> np.ndarray:
    maps = []
    for tool in toolbox:
        try:
            maps.append(tool(image, annotations))
        except Exception as exc:
            raise ToolError(tool.tool_id, exc) from exc
    shapes = {m.shape[1:] for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"tools disagree on resolution: {sorted(shapes)}")
    return np.concatenate(maps, axis=0)


def histopathology_toolbox(
    source_size=(96, 96),
    out_size=(96, 96),
    num_types: int = DEFAULT_NUM_TYPES,
    blob_radius: float = DEFAULT_BLOB_RADIUS,
) -> Toolbox:
    """The five nucleus-instance tools, reading ``annotations["instances"]``."""

    def inst(ann):
        return ann["instances"]

    def make(tool_id, channels, fn):
        return ToolSpec(tool_id, "histopathology", channels, TOOL_DESCRIPTIONS[tool_id], fn)

    return Toolbox(
        [
            make(
                "histo_nuc_centroid",
                1,
                lambda img, ann: rasterize_centroids(inst(ann), blob_radius, source_size, out_size),
            ),
            make("histo_nuc_bbox", 1, lambda img, ann: rasterize_bboxes(inst(ann), source_size, out_size)),
            make("histo_nuc_contour", 1, lambda img, ann: rasterize_contours(inst(ann), source_size, out_size)),
            make(
                "histo_nuc_type",
                num_types,
                lambda img, ann: rasterize_type_onehot(inst(ann), num_types, source_size, out_size),
            ),
            make("histo_nuc_type_prob", 1, lambda img, ann: rasterize_type_prob(inst(ann), source_size, out_size)),
        ]
    )


def dermatology_toolbox(
    out_size=(224, 224),
    minkowski_p: float = DEFAULT_MINKOWSKI_P,
    min_area: int = DEFAULT_MIN_AREA,
    malignant_rules=MALIGNANT_COLOR_RULES,
    brown_rules=BROWN_COLOR_RULES,
) -> Toolbox:
    """Seven dermoscopy tools.

    Annotations carry ``lesion_mask`` (HxW, stands in for the segmenter),
    ``superpixels`` (index map) and ``superpixel_positives`` (structure ->
    indices). The image is ``3xHxW`` RGB in [0, 1].
    """
    structures = {
        "derm_pigment_network": "pigment_network",
        "derm_negative_network": "negative_network",
        "derm_milia_like_cyst_detector": "milia_like_cyst",
        "derm_streaks_detector": "streaks",
    }

    def lesion(img, ann):
        return downsample_max(np.asarray(ann["lesion_mask"], dtype=np.float32), out_size)[None]

    def structure(name):
        def fn(img, ann):
            positives = ann.get("superpixel_positives", {}).get(name, ())
            return decode_superpixel_labels(ann["superpixels"], {name: positives}, out_size)[name]

        return fn

    def marker(rules):
        def fn(img, ann):
            norm = shades_of_gray_normalize(img, minkowski_p)
            hit = color_marker_map(norm, rules, np.asarray(ann["lesion_mask"]), min_area)
            return downsample_max(hit, out_size)

        return fn

    def make(tool_id, fn):
        return ToolSpec(tool_id, "dermatology", 1, TOOL_DESCRIPTIONS[tool_id], fn)

    tools = [make("derm_lesion_segmenter", lesion)]
    tools += [make(tid, structure(name)) for tid, name in structures.items()]
    tools += [
        make("derm_marker_malignant_union", marker(malignant_rules)),
        make("derm_marker_browns", marker(brown_rules)),
    ]
    return Toolbox(tools)


# --------------------------------------------------------------------------
# persistence


def save_stack(path: str | Path, stack: np.ndarray, toolbox: Toolbox) -> Path:
    """Write ``<path>.npy`` plus a ``<path>.json`` layout header."""
    path = Path(path)
    stack = np.asarray(stack)
    if stack.shape[-3] != toolbox.total_channels:
        raise ValueError(f"stack has {stack.shape[-3]} channels, toolbox expects {toolbox.total_channels}")
    np.save(path.with_suffix(".npy"), stack)
    header = {
        "tool_ids": list(toolbox.tool_ids),
        "channels_per_tool": list(toolbox.channels_per_tool),
        "H": int(stack.shape[-2]),
        "W": int(stack.shape[-1]),
        "dtype": str(stack.dtype),
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))
    return path.with_suffix(".npy")


def load_stack(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    stack = np.load(path.with_suffix(".npy"))
    if stack.shape[-3] != sum(header["channels_per_tool"]) or stack.shape[-2:] != (header["H"], header["W"]):
        raise ValueError(f"{path}: array shape {stack.shape} disagrees with header")
    return stack, header
