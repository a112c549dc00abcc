"""Tool knockout: placeholder substitution plus exact discrete oracles.

Knocking a tool out overwrites its channels with a constant that live maps
can never take, so the model can tell "absent" from any real output. On a
finite joint over (z, y) this lets us compute exactly what a knockout-trained
model should converge to: the conditional of y given the surviving tools.
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

MAX_ENUMERATED_TOOLS = 20


@dataclass(frozen=True)
class KnockoutMask:
    bits: tuple[int, ...]  # 1 = knocked out

    def __post_init__(self):
        bits = tuple(int(b) for b in np.asarray(self.bits).ravel())
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"mask bits must be 0/1, got {bits}")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int8)

    @classmethod
    def from_inclusion(cls, include) -> "KnockoutMask":
        return cls(tuple(1 - int(b) for b in np.asarray(include).ravel()))

    def inclusion(self) -> np.ndarray:
        return 1 - self.array


@dataclass(frozen=True)
class PlaceholderSpec:
    value: float = -1.0

    def __post_init__(self):
        if 0.0 <= self.value <= 1.0 or not math.isfinite(self.value):
            raise ValueError(f"placeholder {self.value} must be finite and outside [0, 1]")


def channel_mask(mask_bits, channels_per_tool: Sequence[int]) -> np.ndarray:
    """Expand per-tool mask bits (``(..., N)``) to per-channel bits (``(..., C)``)."""
    bits = np.asarray(mask_bits)
    if bits.shape[-1] != len(channels_per_tool):
        raise ValueError(f"mask has {bits.shape[-1]} tools, layout has {len(channels_per_tool)}")
    return np.repeat(bits, channels_per_tool, axis=-1)


def apply_knockout(stack, mask, channels_per_tool: Sequence[int], placeholder: PlaceholderSpec | float = -1.0):
    """Replace the channels of masked tools with the placeholder constant.

    ``stack`` is ``(C, H, W)`` or ``(B, C, H, W)`` (numpy or torch); ``mask``
    is ``(N,)`` or ``(B, N)`` with 1 meaning knocked out.
    """
    value = placeholder.value if isinstance(placeholder, PlaceholderSpec) else PlaceholderSpec(placeholder).value
    bits = mask.array if isinstance(mask, KnockoutMask) else np.asarray(mask)
    if stack.shape[-3] != sum(channels_per_tool):
        raise ValueError(f"stack has {stack.shape[-3]} channels, layout expects {sum(channels_per_tool)}")
    per_channel = np.ascontiguousarray(channel_mask(bits, channels_per_tool).astype(bool)[..., None, None])
    if hasattr(stack, "masked_fill"):  # torch tensor
        import torch

        return stack.masked_fill(torch.as_tensor(per_channel, device=stack.device), value)
    return np.where(per_channel, np.asarray(value, dtype=stack.dtype), stack)


def enumerate_masks(n: int) -> list[KnockoutMask]:
    if not 0 <= n <= MAX_ENUMERATED_TOOLS:
        raise ValueError(f"refusing to enumerate 2^{n} masks (limit n <= {MAX_ENUMERATED_TOOLS})")
    return [KnockoutMask(bits) for bits in itertools.product((0, 1), repeat=n)]


@dataclass(frozen=True)
class DiscreteJointTable:
    """Finite joint over tool values ``z`` (length N) and a label ``y``."""

    z: np.ndarray  # (R, N)
    y: np.ndarray  # (R,)
    p: np.ndarray  # (R,)

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        y = np.asarray(self.y).ravel()
        p = np.asarray(self.p, dtype=np.float64).ravel()
        if not (len(z) == len(y) == len(p)):
            raise ValueError("z, y, p must have the same number of rows")
        if len(p) > 2**MAX_ENUMERATED_TOOLS:
            raise ValueError("joint table too large")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities must be >= 0 and sum to 1 (sum={p.sum()!r})")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)

    @property
    def n_tools(self) -> int:
        return self.z.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.unique(self.y)

    def to_json(self) -> list[dict[str, Any]]:
        return [{"z": zr.tolist(), "y": yr.item(), "p": float(pr)} for zr, yr, pr in zip(self.z, self.y, self.p)]

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping[str, Any]]) -> "DiscreteJointTable":
        return cls(np.array([r["z"] for r in rows]), np.array([r["y"] for r in rows]), np.array([r["p"] for r in rows]))

    @classmethod
    def load(cls, path: str | Path) -> "DiscreteJointTable":
        return cls.from_rows(json.loads(Path(path).read_text()))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.choice(len(self.p), size=n, p=self.p)
        return self.z[idx], self.y[idx]

    def observed_configurations(self, mask: KnockoutMask, min_prob: float = 0.0) -> list[tuple[tuple[float, ...], float]]:
        """Distinct values of the unmasked coordinates with their marginal probability."""
        keep = mask.array == 0
        acc: dict[tuple[float, ...], float] = {}
        for zr, pr in zip(self.z, self.p):
            key = tuple(zr[keep].tolist())
            acc[key] = acc.get(key, 0.0) + pr
        return [(k, v) for k, v in sorted(acc.items()) if v >= min_prob]


class ZeroProbabilityEvent(ValueError):
    pass


def marginal_conditional_oracle(joint: DiscreteJointTable, mask: KnockoutMask, observed) -> dict[Any, float]:
    """Exact p(y | unmasked z = observed) by summing over the masked coordinates.

    ``observed`` is either the full length-N vector (masked entries ignored)
    or just the unmasked values in tool order.
    """
    keep = mask.array == 0
    if len(mask) != joint.n_tools:
        raise ValueError(f"mask has {len(mask)} tools, joint has {joint.n_tools}")
    obs = np.asarray(observed, dtype=np.float64).ravel()
    if obs.size == joint.n_tools:
        obs = obs[keep]
    elif obs.size != keep.sum():
        raise ValueError(f"observed has {obs.size} values, expected {keep.sum()} or {joint.n_tools}")
    hit = np.all(joint.z[:, keep] == obs, axis=1) if keep.any() else np.ones(len(joint.p), dtype=bool)
    total = joint.p[hit].sum()
    if total <= 0:
        raise ZeroProbabilityEvent(f"conditioning event {obs.tolist()} has zero probability")
    return {lab.item(): float(joint.p[hit & (joint.y == lab)].sum() / total) for lab in joint.labels}


def mask_distribution_from_inclusion(include_prob: Sequence[float]) -> dict[tuple[int, ...], float]:
    """p(M = m) when tool i is included independently with probability include_prob[i]."""
    q = np.asarray(include_prob, dtype=np.float64)
    out = {}
    for m in enumerate_masks(len(q)):
        bits = m.array
        out[m.bits] = float(np.prod(np.where(bits == 1, 1.0 - q, q)))
    return out


class LossDecomposition(NamedTuple):
    mc_estimate: float
    exact_weighted_sum: float
    std_error: float


def bce(y: np.ndarray, prob: np.ndarray) -> np.ndarray:
    prob = np.clip(prob, 1e-12, 1 - 1e-12)
    return -(y * np.log(prob) + (1 - y) * np.log1p(-prob))


def expected_loss_decomposition_check(
    model: Callable[[np.ndarray], np.ndarray],
    joint: DiscreteJointTable,
    mask_distribution: Mapping[tuple[int, ...], float],
    n_monte_carlo: int,
    rng: np.random.Generator,
    placeholder: float = -1.0,
    loss: Callable[[np.ndarray, np.ndarray], np.ndarray] = bce,
    batch_size: int = 65536,
) -> LossDecomposition:
    """Monte Carlo knockout objective versus the exact mask-weighted sum.

    ``model`` maps knocked-out tool values ``(B, N)`` to P(y=1).
    """
    masks = np.array(list(mask_distribution.keys()), dtype=np.int8)
    probs = np.array(list(mask_distribution.values()), dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("mask distribution must sum to 1")

    def knocked(z, m):
        return np.where(m.astype(bool), placeholder, z)

    # exact: sum_m p(m) sum_{z,y} p(z,y) loss(y, f(z'(m, z)))
    exact = 0.0
    for m, pm in zip(masks, probs):
        if pm == 0:
            continue
        pred = model(knocked(joint.z, np.broadcast_to(m, joint.z.shape)))
        exact += pm * float(np.sum(joint.p * loss(joint.y.astype(np.float64), pred)))

    total = total_sq = 0.0
    done = 0
    while done < n_monte_carlo:
        b = min(batch_size, n_monte_carlo - done)
        z, y = joint.sample(b, rng)
        m = masks[rng.choice(len(probs), size=b, p=probs)]
        ell = loss(y.astype(np.float64), model(knocked(z, m)))
        total += ell.sum()
        total_sq += np.square(ell).sum()
        done += b
    mean = total / n_monte_carlo
    var = max(total_sq / n_monte_carlo - mean * mean, 0.0) * n_monte_carlo / max(n_monte_carlo - 1, 1)
    return LossDecomposition(float(mean), float(exact), float(math.sqrt(var / n_monte_carlo)))
