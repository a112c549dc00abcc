"""Per-image tool selection: top-k, dynamic cutoffs, perturbation, selector I/O."""

from __future__ import annotations

import json
import re
import threading
import time
import urllib.error
import urllib.request
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from ._rng import rng_stream
from .toolbox import Toolbox

SOURCES = ("scripted", "vlm", "topk", "dynamic", "all", "random")
DEFAULT_K = 3
DEFAULT_ALPHA = 0.9


@dataclass(frozen=True)
class SelectionVector:
    bits: tuple[int, ...]
    source: str = "scripted"

    def __post_init__(self):
        bits = tuple(int(b) for b in np.asarray(self.bits).ravel())
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"selection bits must be 0/1, got {bits}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown selection source {self.source!r}")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int8)

    @property
    def count(self) -> int:
        return sum(self.bits)

    def tool_ids(self, toolbox: Toolbox) -> list[str]:
        check_length(self, toolbox)
        return [t for t, b in zip(toolbox.tool_ids, self.bits) if b]

    @classmethod
    def from_ids(cls, tool_ids: Iterable[str], toolbox: Toolbox, source: str = "vlm") -> "SelectionVector":
        bits = [0] * len(toolbox)
        for t in tool_ids:
            bits[toolbox.index(t)] = 1
        return cls(tuple(bits), source)

    @classmethod
    def all_tools(cls, n: int) -> "SelectionVector":
        return cls((1,) * n, "all")


def check_length(selection: SelectionVector, toolbox: Toolbox) -> None:
    if len(selection) != len(toolbox):
        raise ValueError(f"selection has {len(selection)} bits, toolbox has {len(toolbox)} tools")


@dataclass(frozen=True)
class ToolScoreSheet:
    scores: tuple[float, ...]
    image_id: str = ""

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if any(not 0.0 <= s <= 1.0 for s in scores):
            raise ValueError(f"tool scores must lie in [0, 1]: {scores}")
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class Abstention:
    """Selector declined to choose; callers fall back to modality tools."""

    task_modality: str = "unknown"
    task: str = ""


# --------------------------------------------------------------------------
# selection rules


def select_top_k(scores: ToolScoreSheet | Sequence[float], k: int) -> SelectionVector:
    """The k largest scores; ties go to the lower toolbox index."""
    values = scores.scores if isinstance(scores, ToolScoreSheet) else tuple(scores)
    n = len(values)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    chosen = sorted(range(n), key=lambda i: (-values[i], i))[:k]
    bits = [0] * n
    for i in chosen:
        bits[i] = 1
    return SelectionVector(tuple(bits), "topk")


def calibrate_dynamic_cutoff(training_scores: Sequence[ToolScoreSheet], k: int) -> float:
    """Score threshold that keeps ``k`` tools per image on average over the pool.

    Returns the (n*k)-th largest pooled score; reuse it for every split.
    """
    if not training_scores:
        raise ValueError("calibration pool is empty")
    pool = np.concatenate([np.asarray(s.scores, dtype=np.float64) for s in training_scores])
    target = len(training_scores) * k
    if k < 1 or target > pool.size:
        raise ValueError(f"n*k={target} exceeds the {pool.size} pooled scores")
    return float(np.sort(pool)[::-1][target - 1])


def apply_dynamic_cutoff(scores: ToolScoreSheet, cutoff: float) -> SelectionVector:
    return SelectionVector(tuple(int(s >= cutoff) for s in scores.scores), "dynamic")


def inclusion_probability(bits, alpha: float) -> np.ndarray:
    return (1.0 - alpha) * 0.5 + alpha * np.asarray(bits, dtype=np.float64)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")


def perturb_selection(selection: SelectionVector | Sequence[int], alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Sample per-tool inclusion bits, tool i kept with p_i = (1-alpha)/2 + alpha*s_i."""
    _check_alpha(alpha)
    bits = selection.array if isinstance(selection, SelectionVector) else np.asarray(selection)
    return perturb_from_uniforms(bits, alpha, rng.random(bits.shape))


def perturb_from_uniforms(bits: np.ndarray, alpha: float, uniforms: np.ndarray) -> np.ndarray:
    """Vectorized ``perturb_selection`` given pre-drawn U[0, 1) variates (any batch shape)."""
    _check_alpha(alpha)
    return (uniforms < inclusion_probability(bits, alpha)).astype(np.int8)


def random_top_k(n: int, k: int, rng: np.random.Generator) -> SelectionVector:
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    bits = np.zeros(n, dtype=np.int8)
    bits[rng.choice(n, size=k, replace=False)] = 1
    return SelectionVector(tuple(bits), "random")


def fallback_selection(toolbox: Toolbox, modality: str) -> SelectionVector:
    """All tools of ``modality``; used when the selector abstains."""
    bits = toolbox.modality_mask(modality)
    if not bits.any():
        bits = np.ones(len(toolbox), dtype=np.int8)
    return SelectionVector(tuple(bits), "all")


def resolve(result: SelectionVector | Abstention, toolbox: Toolbox, modality: str) -> SelectionVector:
    return fallback_selection(toolbox, modality) if isinstance(result, Abstention) else result


# --------------------------------------------------------------------------
# prompts

FIXED_TEMPLATE = """You are a medical expert in {modality}. Select tools for a single
task from a fixed toolbox {TOOLBOX} described by {TOOL_DESCRIPTIONS}.
Choices must depend on the task and image evidence.

Choose max {max_tools} tools from the toolbox {TOOLBOX}
that are most relevant for solving the task in each image; no
duplicates.

Return ONLY JSON with the following fields:
- task_modality
- task
- selected_tools
- abstain  (boolean)

Each entry in selected_tools must include:
- id           (tool name from TOOLBOX)
- rank         (1..N, 1 = most important)
- confidence   (float in [0, 1])
- reason       (brief phrase tied to image cues)

If you are unsure about the modality or task, set task_modality =
"unknown" and abstain = true.

Return ONLY JSON."""

DYNAMIC_TEMPLATE = """You are a medical expert in {modality}. Score each tool in the
provided toolbox {TOOLBOX} described by {TOOL_DESCRIPTIONS} between
[0,1]. Base scores strictly on the visible image evidence and task relevance.
Return JSON ONLY with keys: task_modality, task, scores.
- scores must be a list of objects with: id (string), score (integer
0...1).
- Provide exactly one score for each tool id you are given.
Scores do not need to be rounded numbers. No omission of scores."""

TASK_INSTRUCTIONS = {
    "camelyon17": """Task: Determine if the central 32x32 region of this 96x96
histopathology patch contains tumor or not.
Answer ONLY in the following format:
label: tumor or no tumor
prob: <a real-valued prediction probability in [0,1] that the
predicted label is correct>""",
    "isic_bm": """Task: Determine if the lesion in the dermoscopic image
is malignant or benign.
Answer ONLY in the following format:
label: malignant or benign
prob: <a real-valued prediction probability in [0,1] that the
predicted label is correct>""",
    "isic_mn": """Task: Determine if the lesion in the dermoscopic image
is melanocytic or non-melanocytic.
Answer ONLY in the following format:
label: melanocytic or non-melanocytic
prob: <a real-valued prediction probability in [0,1] that the
predicted label is correct>""",
}


def build_selector_prompt(
    task_description: str,
    modality: str,
    k: int,
    toolbox: Toolbox,
    mode: str = "fixed",
) -> str:
    if len(toolbox) == 0:
        raise ValueError("toolbox is empty")
    if mode not in ("fixed", "dynamic"):
        raise ValueError(f"unknown prompt mode {mode!r}")
    fields = {
        "modality": modality,
        "TOOLBOX": json.dumps(list(toolbox.tool_ids)),
        "TOOL_DESCRIPTIONS": json.dumps({t.tool_id: t.description for t in toolbox}, indent=2),
        "max_tools": k,
    }
    template = FIXED_TEMPLATE if mode == "fixed" else DYNAMIC_TEMPLATE
    body = template.format(**fields)
    task = TASK_INSTRUCTIONS.get(task_description, task_description)
    return f"{body}\n\n{task}" if task else body


# --------------------------------------------------------------------------
# response parsing


class SelectorParseError(ValueError):
    """Malformed selector output; ``violation`` is a short machine-readable tag."""

    def __init__(self, violation: str, detail: str):
        super().__init__(f"{violation}: {detail}")
        self.violation = violation


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _extract_json(raw_text: str) -> dict[str, Any]:
    text = raw_text.strip()
    fenced = _FENCE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    start, stop = text.find("{"), text.rfind("}")
    if start < 0 or stop <= start:
        raise SelectorParseError("malformed_json", "no JSON object found")
    try:
        doc = json.loads(text[start : stop + 1])
    except json.JSONDecodeError as exc:
        raise SelectorParseError("malformed_json", str(exc)) from exc
    if not isinstance(doc, dict):
        raise SelectorParseError("malformed_json", "top-level value is not an object")
    return doc


def parse_selector_response(raw_text: str, toolbox: Toolbox, k: int) -> SelectionVector | Abstention:
    doc = _extract_json(raw_text)
    missing = [f for f in ("task_modality", "task", "selected_tools", "abstain") if f not in doc]
    if missing:
        raise SelectorParseError("missing_field", f"missing {missing}")
    if not isinstance(doc["abstain"], bool):
        raise SelectorParseError("bad_type", "abstain must be a boolean")
    if doc["abstain"]:
        return Abstention(str(doc["task_modality"]), str(doc["task"]))
    entries = doc["selected_tools"]
    if not isinstance(entries, list):
        raise SelectorParseError("bad_type", "selected_tools must be a list")
    seen: set[str] = set()
    ranked = []
    for e in entries:
        if not isinstance(e, dict) or any(f not in e for f in ("id", "rank", "confidence", "reason")):
            raise SelectorParseError("missing_field", f"selected_tools entry {e!r} lacks id/rank/confidence/reason")
        tid = e["id"]
        if tid not in toolbox.tool_ids:
            raise SelectorParseError("unknown_tool", f"{tid!r} is not in the toolbox")
        if tid in seen:
            raise SelectorParseError("duplicate_tool", f"{tid!r} listed more than once")
        seen.add(tid)
        conf = e["confidence"]
        if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0 <= conf <= 1:
            raise SelectorParseError("bad_confidence", f"{tid!r} confidence {conf!r} not in [0, 1]")
        if isinstance(e["rank"], bool) or not isinstance(e["rank"], int):
            raise SelectorParseError("bad_rank", f"{tid!r} rank {e['rank']!r} is not an integer")
        ranked.append((e["rank"], tid))
    ranks = sorted(r for r, _ in ranked)
    if ranks != list(range(1, len(ranks) + 1)):
        raise SelectorParseError("rank_gap", f"ranks {ranks} are not 1..{len(ranks)}")
    chosen = [tid for _, tid in sorted(ranked)[:k]]
    return SelectionVector.from_ids(chosen, toolbox, "vlm")


def parse_score_response(raw_text: str, toolbox: Toolbox, image_id: str = "") -> ToolScoreSheet:
    doc = _extract_json(raw_text)
    if "scores" not in doc or not isinstance(doc["scores"], list):
        raise SelectorParseError("missing_field", "scores list missing")
    got: dict[str, float] = {}
    for e in doc["scores"]:
        if not isinstance(e, dict) or "id" not in e or "score" not in e:
            raise SelectorParseError("missing_field", f"score entry {e!r} lacks id/score")
        if e["id"] not in toolbox.tool_ids:
            raise SelectorParseError("unknown_tool", f"{e['id']!r} is not in the toolbox")
        if e["id"] in got:
            raise SelectorParseError("duplicate_tool", f"{e['id']!r} scored more than once")
        s = e["score"]
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not 0 <= s <= 1:
            raise SelectorParseError("bad_score", f"{e['id']!r} score {s!r} not in [0, 1]")
        got[e["id"]] = float(s)
    omitted = [t for t in toolbox.tool_ids if t not in got]
    if omitted:
        raise SelectorParseError("missing_score", f"no score for {omitted}")
    return ToolScoreSheet(tuple(got[t] for t in toolbox.tool_ids), image_id)


def serialize_selection(
    selection: SelectionVector,
    toolbox: Toolbox,
    task_modality: str = "synthetic",
    task: str = "",
    confidences: Sequence[float] | None = None,
) -> str:
    """Render a selection as a well-formed selector response (inverse of the parser)."""
    check_length(selection, toolbox)
    ids = selection.tool_ids(toolbox)
    if confidences is not None:
        order = sorted(ids, key=lambda t: (-confidences[toolbox.index(t)], toolbox.index(t)))
    else:
        order = ids
    entries = [
        {
            "id": t,
            "rank": r,
            "confidence": 1.0 if confidences is None else float(confidences[toolbox.index(t)]),
            "reason": "scripted",
        }
        for r, t in enumerate(order, start=1)
    ]
    return json.dumps({"task_modality": task_modality, "task": task, "selected_tools": entries, "abstain": False})


def serialize_scores(scores: ToolScoreSheet, toolbox: Toolbox, task_modality: str = "synthetic", task: str = "") -> str:
    return json.dumps(
        {
            "task_modality": task_modality,
            "task": task,
            "scores": [{"id": t, "score": s} for t, s in zip(toolbox.tool_ids, scores.scores)],
        }
    )


# --------------------------------------------------------------------------
# selectors


class SelectorClient(Protocol):
    def complete(self, prompt: str, image: str) -> str: ...


class StubSelectorClient:
    """Replays canned responses, keyed by image reference or in a fixed cycle."""

    def __init__(self, responses: Mapping[str, str] | Sequence[str]):
        self._responses = responses
        self._lock = threading.Lock()
        self._cursor = 0
        self.requests: list[tuple[str, str]] = []

    def complete(self, prompt: str, image: str) -> str:
        with self._lock:
            self.requests.append((prompt, image))
            if isinstance(self._responses, Mapping):
                return self._responses[image]
            text = self._responses[self._cursor % len(self._responses)]
            self._cursor += 1
            return text


class HTTPSelectorClient:
    """POSTs ``{"prompt", "image"}`` JSON and returns the raw response body."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def complete(self, prompt: str, image: str) -> str:
        body = json.dumps({"prompt": prompt, "image": image}).encode()
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")


@dataclass
class VLMSelector:
    """Prompts a selector service per image and parses its answer.

    Malformed output is retried up to ``max_retries`` times, then raised.
    """

    client: SelectorClient
    toolbox: Toolbox
    task: str
    modality: str
    k: int = DEFAULT_K
    mode: str = "fixed"
    max_retries: int = 2
    retry_delay: float = 0.0

    def _ask(self, image: str, parse):
        prompt = build_selector_prompt(self.task, self.modality, self.k, self.toolbox, self.mode)
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                return parse(self.client.complete(prompt, image))
            except (SelectorParseError, urllib.error.URLError, TimeoutError) as exc:
                last = exc
                if self.retry_delay and attempt < self.max_retries:
                    time.sleep(self.retry_delay)
        assert last is not None
        raise last

    def select(self, image: str) -> SelectionVector:
        result = self._ask(image, lambda raw: parse_selector_response(raw, self.toolbox, self.k))
        return resolve(result, self.toolbox, self.modality)

    def score(self, image: str) -> ToolScoreSheet:
        return self._ask(image, lambda raw: parse_score_response(raw, self.toolbox, image))

    def select_many(self, images: Sequence[str], max_workers: int = 4) -> list[SelectionVector]:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(self.select, images))


@dataclass
class ScriptedSelector:
    """Deterministic stand-in for a selector model.

    Per image, tool scores are ``relevance`` plus Gaussian noise (clipped to
    [0, 1]); the selection is the top-k of those scores. Streams derive from
    ``(seed, image_id)`` so results do not depend on call order.
    """

    relevance: Sequence[float]
    k: int = DEFAULT_K
    noise: float = 0.0
    seed: int = 0

    def score(self, image_id: str) -> ToolScoreSheet:
        rng = rng_stream(self.seed, "scripted-selector", image_id)
        base = np.asarray(self.relevance, dtype=np.float64)
        raw = base + self.noise * rng.standard_normal(base.shape)
        return ToolScoreSheet(tuple(np.clip(raw, 0.0, 1.0)), str(image_id))

    def select(self, image_id: str) -> SelectionVector:
        sel = select_top_k(self.score(image_id), self.k)
        return SelectionVector(sel.bits, "scripted")


# --------------------------------------------------------------------------
# stub selector service


def serve_stub(client: SelectorClient, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start an HTTP server answering selector requests from ``client``.

    The server runs on a daemon thread; call ``shutdown()`` when done. The
    bound address is ``server.server_address``.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                req = json.loads(self.rfile.read(length))
                text = client.complete(req["prompt"], req.get("image", ""))
                status = 200
            except Exception as exc:  # report, never kill the server
                text, status = f"error: {exc}", 400
            payload = text.encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "text/plain; charset=utf-8")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer((host, port), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


# --------------------------------------------------------------------------
# persistence


@dataclass
class SelectionRecord:
    image_id: str
    selection: SelectionVector
    scores: ToolScoreSheet | None = field(default=None)

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {"image_id": self.image_id, "bits": list(self.selection.bits), "source": self.selection.source}
        if self.scores is not None:
            d["scores"] = list(self.scores.scores)
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "SelectionRecord":
        scores = ToolScoreSheet(tuple(d["scores"]), d["image_id"]) if d.get("scores") is not None else None
        return cls(str(d["image_id"]), SelectionVector(tuple(d["bits"]), d.get("source", "scripted")), scores)


def write_selections(path: str | Path, records: Iterable[SelectionRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_selections(path: str | Path) -> list[SelectionRecord]:
    with open(path) as fh:
        return [SelectionRecord.from_json(json.loads(line)) for line in fh if line.strip()]
