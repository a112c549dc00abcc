"""Fusion model over the tool stack, knockout-augmented training, metrics."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from ._rng import derive_seed, rng_stream
from .knockout import apply_knockout
from .selection import SelectionVector, perturb_from_uniforms

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine")
LOSSES = ("cross_entropy", "class_weighted_bce")
SAMPLINGS = ("perturb", "random_topk")
METRICS = ("accuracy", "auc", "log_loss")


class UndefinedAUCError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        where = "" if epoch is None else f" (epoch {epoch}, batch {batch})"
        super().__init__(message + where)
        self.epoch, self.batch = epoch, batch


# --------------------------------------------------------------------------
# data


@dataclass
class LabeledDataset:
    """Column-oriented dataset. ``stacks`` is ``(n, C, H, W)`` in tool order."""

    image_ids: list[str]
    stacks: np.ndarray
    labels: np.ndarray
    selections: np.ndarray | None = None  # (n, N) 0/1
    split: str = "train"
    instances: list | None = None
    images: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.image_ids = [str(i) for i in self.image_ids]
        self.labels = np.asarray(self.labels).astype(np.int64)
        n = len(self.image_ids)
        if len(self.labels) != n or len(self.stacks) != n:
            raise ValueError("image_ids, stacks and labels must have equal length")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be binary")
        if self.selections is not None:
            self.selections = np.asarray(self.selections, dtype=np.int8)
            if len(self.selections) != n:
                raise ValueError("selections must have one row per item")

    def __len__(self) -> int:
        return len(self.image_ids)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            image_ids=[self.image_ids[i] for i in idx],
            stacks=self.stacks[idx],
            labels=self.labels[idx],
            selections=None if self.selections is None else self.selections[idx],
            split=self.split,
            instances=None if self.instances is None else [self.instances[i] for i in idx],
            images=None if self.images is None else self.images[idx],
            meta=dict(self.meta),
        )

    def with_selections(self, selections) -> "LabeledDataset":
        out = copy.copy(self)
        out.selections = np.asarray(selections, dtype=np.int8).reshape(len(self), -1)
        return out

    def pixel_view(self) -> "LabeledDataset":
        """The raw images as a single always-selected 'tool' (for pixel baselines)."""
        if self.images is None:
            raise ValueError("dataset carries no raw images")
        out = copy.copy(self)
        out.stacks = self.images
        out.selections = np.ones((len(self), 1), dtype=np.int8)
        return out


# --------------------------------------------------------------------------
# model


@dataclass
class FusionModelConfig:
    input_channels: int
    conv_block_widths: tuple[int, ...] = (32, 32, 64, 128)
    input_resolution: tuple[int, int] = (96, 96)
    num_outputs: int = 1

    def __post_init__(self):
        self.conv_block_widths = tuple(int(w) for w in self.conv_block_widths)
        self.input_resolution = tuple(int(v) for v in self.input_resolution)


class FusionCNN(nn.Module):
    """Conv(3x3)-ReLU-MaxPool blocks, global average pool, linear logit head.

    No normalization layers: constant tool maps must survive the feature
    extractor, and inference never divides by batch statistics. Convolutions
    use He-normal weights and zero biases so activations keep their scale
    through the ReLU stack without normalization.
    """

    def __init__(self, config: FusionModelConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        prev = config.input_channels
        for width in config.conv_block_widths:
            conv = nn.Conv2d(prev, width, 3, padding=1)
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            layers += [conv, nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            prev = width
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(prev, config.num_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected (B, {self.config.input_channels}, H, W) input, got {tuple(x.shape)}")
        h = self.features(x)
        logits = self.classifier(h.mean(dim=(2, 3)))
        return logits.squeeze(-1) if self.config.num_outputs == 1 else logits


def build_fusion_model(config: FusionModelConfig, init_seed: int = 0) -> FusionCNN:
    if config.input_channels < 1 or not config.conv_block_widths:
        raise ValueError("need >= 1 input channel and >= 1 conv block")
    h, w = config.input_resolution
    scale = 2 ** len(config.conv_block_widths)
    if h < scale or w < scale:
        raise ValueError(
            f"resolution {h}x{w} too small for {len(config.conv_block_widths)} pooling blocks (need >= {scale})"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = FusionCNN(config)
    return model


# --------------------------------------------------------------------------
# loss and metrics


def pos_weight_from_labels(labels) -> float:
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return 1.0
    return n_neg / n_pos


def class_weighted_loss(logits: torch.Tensor, labels: torch.Tensor, pos_weight: float = 1.0) -> torch.Tensor:
    """Mean BCE with the positive-class term scaled by ``pos_weight``.

    With ``pos_weight=1`` this equals two-class softmax cross-entropy on
    logits ``(0, l)``, so one binary head covers both loss settings.
    """
    labels = labels.to(logits.dtype)
    weight = torch.as_tensor(pos_weight, dtype=logits.dtype, device=logits.device)
    return F.binary_cross_entropy_with_logits(logits, labels, pos_weight=weight)


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC undefined: only one class present")
    ranks = rankdata(scores)  # average ranks, so ties count half
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def log_loss(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1 - 1e-12)
    y = np.asarray(labels)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    probs = np.asarray(probs)
    return float(np.mean((probs >= threshold).astype(np.int64) == np.asarray(labels)))


# --------------------------------------------------------------------------
# inference


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def predict(
    model: nn.Module,
    stack,
    mask,
    channels_per_tool: Sequence[int],
    placeholder: float = -1.0,
    batch_size: int = 512,
) -> np.ndarray:
    """P(y=1) after knocking out ``mask`` (1 = absent); stack is (C,H,W) or (B,C,H,W)."""
    model.eval()
    x = _as_tensor(stack)
    single = x.dim() == 3
    if single:
        x = x[None]
    bits = np.asarray(mask.bits if hasattr(mask, "bits") else mask, dtype=np.int8)
    if bits.ndim == 1:
        bits = np.broadcast_to(bits, (len(x), bits.shape[0]))
    out = []
    for start in range(0, len(x), batch_size):
        xb = apply_knockout(x[start : start + batch_size], bits[start : start + batch_size], channels_per_tool, placeholder)
        out.append(torch.sigmoid(model(xb.to(_param_dtype(model)))).double().numpy())
    probs = np.concatenate(out) if out else np.zeros(0)
    return probs[0] if single else probs


def _policy_masks(dataset: LabeledDataset, n_tools: int, mask_policy) -> np.ndarray:
    if isinstance(mask_policy, str):
        if mask_policy == "none":
            return np.zeros((len(dataset), n_tools), dtype=np.int8)
        if mask_policy == "selection":
            if dataset.selections is None:
                raise ValueError("mask_policy='selection' needs stored selections")
            return (1 - dataset.selections).astype(np.int8)
        raise ValueError(f"unknown mask policy {mask_policy!r}")
    bits = np.asarray(getattr(mask_policy, "bits", mask_policy), dtype=np.int8)
    return np.broadcast_to(bits, (len(dataset), n_tools))


def evaluate(
    model: nn.Module,
    dataset: LabeledDataset,
    channels_per_tool: Sequence[int],
    mask_policy="none",
    placeholder: float = -1.0,
    threshold: float = 0.5,
) -> dict[str, Any]:
    """Accuracy at ``threshold`` and AUC (``None`` when only one class is present)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    masks = _policy_masks(dataset, len(channels_per_tool), mask_policy)
    probs = predict(model, dataset.stacks, masks, channels_per_tool, placeholder)
    try:
        auc = compute_auc(probs, dataset.labels)
    except UndefinedAUCError:
        auc = None
    return {
        "accuracy": accuracy(probs, dataset.labels, threshold),
        "auc": auc,
        "log_loss": log_loss(probs, dataset.labels),
        "n": len(dataset),
        "probs": probs,
    }


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    schedule: str = "cosine"
    loss: str = "class_weighted_bce"
    pos_weight: float | None = None  # None: n_neg / n_pos of the training split
    alpha: float = 0.9
    k: int = 3
    seed: int = 0
    checkpoint_metric: str = "auc"
    sampling: str = "perturb"
    placeholder: float = -1.0

    def __post_init__(self):
        errors = self.validation_errors()
        if errors:
            raise ValueError("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errs = []
        if not self.learning_rate >= 0:
            errs.append("learning_rate must be >= 0")
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.pos_weight is not None and not self.pos_weight > 0:
            errs.append("pos_weight must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            errs.append("alpha must lie in [0, 1]")
        if self.k < 1:
            errs.append("k must be >= 1")
        if self.schedule not in SCHEDULES:
            errs.append(f"schedule must be one of {SCHEDULES}")
        if self.loss not in LOSSES:
            errs.append(f"loss must be one of {LOSSES}")
        if self.checkpoint_metric not in METRICS:
            errs.append(f"checkpoint_metric must be one of {METRICS}")
        if self.sampling not in SAMPLINGS:
            errs.append(f"sampling must be one of {SAMPLINGS}")
        if 0.0 <= self.placeholder <= 1.0:
            errs.append("placeholder must lie outside [0, 1]")
        return errs

    @classmethod
    def camelyon_style(cls, **kw) -> "TrainConfig":
        base = dict(learning_rate=1e-4, weight_decay=1e-4, epochs=40, schedule="constant", loss="cross_entropy",
                    checkpoint_metric="accuracy")
        base.update(kw)
        return cls(**base)


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    model_config: dict[str, Any]
    config_fingerprint: str
    epoch: int
    metric_name: str
    metric_value: float
    seed: int
    rng_digest: str

    def metadata(self) -> dict[str, Any]:
        return {
            "config_fingerprint": self.config_fingerprint,
            "epoch": self.epoch,
            "metric": self.metric_name,
            "metric_value": self.metric_value,
            "seed": self.seed,
            "rng_digest": self.rng_digest,
            "model_config": self.model_config,
        }

    def build_model(self) -> FusionCNN:
        cfg = FusionModelConfig(**self.model_config)
        model = FusionCNN(cfg)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path).with_suffix(".pt")
    torch.save(ckpt.state_dict, path)
    path.with_suffix(".json").write_text(json.dumps(ckpt.metadata(), indent=2))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path).with_suffix(".pt")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = json.loads(path.with_suffix(".json").read_text())
    state = torch.load(path, weights_only=True)
    return Checkpoint(
        state_dict=state,
        model_config=meta["model_config"],
        config_fingerprint=meta["config_fingerprint"],
        epoch=meta["epoch"],
        metric_name=meta["metric"],
        metric_value=meta["metric_value"],
        seed=meta["seed"],
        rng_digest=meta["rng_digest"],
    )


def _epoch_inclusion(selections: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    # one row of uniforms per dataset position: independent of batching order
    u = rng.random(selections.shape)
    if cfg.sampling == "perturb":
        return perturb_from_uniforms(selections, cfg.alpha, u)
    k = min(cfg.k, selections.shape[1])
    ranks = np.argsort(np.argsort(u, axis=1), axis=1)
    return (ranks < k).astype(np.int8)


def _state_copy(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(
    model: FusionCNN,
    train_set: LabeledDataset,
    val_set: LabeledDataset,
    channels_per_tool: Sequence[int],
    config: TrainConfig,
    selector: Callable[[str], SelectionVector] | None = None,
    config_fingerprint: str = "",
) -> tuple[Checkpoint, list[dict[str, Any]]]:
    """Knockout-augmented training with best-on-validation checkpointing.

    Each epoch, item i keeps tool j with probability ``(1-alpha)/2 + alpha*s_ij``
    (or a random k-subset when ``sampling='random_topk'``); the rest are
    replaced by the placeholder. Validation uses the stored selections
    unperturbed. The model ends holding the best weights.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    n_tools = len(channels_per_tool)

    def stored(ds: LabeledDataset) -> np.ndarray:
        if ds.selections is not None:
            return ds.selections
        if selector is None:
            return np.ones((len(ds), n_tools), dtype=np.int8)
        return np.stack([selector(i).array for i in ds.image_ids]).astype(np.int8)

    train_sel = stored(train_set)
    val_ds = val_set.with_selections(stored(val_set))
    if train_sel.shape[1] != n_tools:
        raise ValueError(f"selections have {train_sel.shape[1]} tools, layout has {n_tools}")

    if config.loss == "cross_entropy":
        pos_weight = 1.0
    else:
        pos_weight = config.pos_weight if config.pos_weight is not None else pos_weight_from_labels(train_set.labels)

    x_all = _as_tensor(train_set.stacks).to(_param_dtype(model))
    y_all = torch.from_numpy(train_set.labels)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs) if config.schedule == "cosine" else None

    history: list[dict[str, Any]] = []
    best: tuple | None = None
    for epoch in range(config.epochs):
        rng = rng_stream(config.seed, "train-epoch", epoch)
        include = _epoch_inclusion(train_sel, config, rng)
        order = rng.permutation(len(train_set))
        model.train()
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb = apply_knockout(x_all[idx], 1 - include[idx], channels_per_tool, config.placeholder)
            loss = class_weighted_loss(model(xb), y_all[idx], pos_weight)
            if not torch.isfinite(loss):
                raise TrainingError("non-finite loss", epoch, b)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        if sched is not None:
            sched.step()

        metrics = evaluate(model, val_ds, channels_per_tool, "selection", config.placeholder)
        metric_name = config.checkpoint_metric
        value = metrics[metric_name]
        if value is None:
            value, metric_name = metrics["accuracy"], "accuracy"
        # log-loss is minimized; store it negated so "larger is better" holds throughout
        score = -value if metric_name == "log_loss" else value
        history.append(
            {
                "epoch": epoch,
                "train_loss": total / count,
                "val_metric": value,
                "val_accuracy": metrics["accuracy"],
                "val_auc": metrics["auc"],
            }
        )
        log.debug("epoch %d loss %.4f val %s %.4f", epoch, total / count, metric_name, value)
        # ties go to the later, longer-trained epoch
        if best is None or score >= best[0]:
            digest = hashlib.sha256(f"{config.seed}:{epoch}:{derive_seed(config.seed, epoch)}".encode()).hexdigest()[:16]
            best = (score, epoch, _state_copy(model), digest, metric_name, value)

    _, epoch, state, digest, metric_name, value = best
    model.load_state_dict(state)
    model.eval()
    ckpt = Checkpoint(
        state_dict=state,
        model_config=asdict(model.config),
        config_fingerprint=config_fingerprint,
        epoch=epoch,
        metric_name=metric_name,
        metric_value=float(value),
        seed=config.seed,
        rng_digest=digest,
    )
    return ckpt, history


def initial_loss(model: nn.Module, dataset: LabeledDataset, channels_per_tool, pos_weight: float = 1.0) -> float:
    """Mean loss of ``model`` on ``dataset`` with every tool live."""
    model.eval()
    with torch.no_grad():
        x = _as_tensor(dataset.stacks).to(_param_dtype(model))
        return float(class_weighted_loss(model(x), torch.from_numpy(dataset.labels), pos_weight))


# --------------------------------------------------------------------------
# gradient verification


def finite_difference_check(
    model: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    pos_weight: float = 1.0,
    n_probes: int = 10,
    step: float = 1e-5,
    seed: int = 0,
) -> list[float]:
    """Relative error between autograd and central differences along random directions.

    Runs in float64 on a copy of ``model``.
    """
    m = copy.deepcopy(model).double()
    x = x.double()
    params = [p for p in m.parameters() if p.requires_grad]
    m.zero_grad()
    class_weighted_loss(m(x), y, pos_weight).backward()
    grads = [p.grad.detach().clone() for p in params]
    gen = torch.Generator().manual_seed(seed)
    errors = []
    with torch.no_grad():
        for _ in range(n_probes):
            dirs = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params]
            norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            for p, d in zip(params, dirs):
                p.add_(step * d)
            up = float(class_weighted_loss(m(x), y, pos_weight))
            for p, d in zip(params, dirs):
                p.sub_(2 * step * d)
            down = float(class_weighted_loss(m(x), y, pos_weight))
            for p, d in zip(params, dirs):
                p.add_(step * d)
            numeric = (up - down) / (2 * step)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return errors


def fit_config_for(train_set: LabeledDataset, widths: Sequence[int], channels: int | None = None) -> FusionModelConfig:
    h, w = train_set.stacks.shape[-2:]
    c = channels if channels is not None else train_set.stacks.shape[1]
    return FusionModelConfig(input_channels=c, conv_block_widths=tuple(widths), input_resolution=(h, w))


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
