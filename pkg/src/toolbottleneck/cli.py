"""Command-line orchestration.

Layout of one run::

    <output_dir>/<run_id>/
        config.lock          canonical YAML the run was produced from
        checkpoint.pt/.json  best-on-validation weights and metadata
        history.jsonl        one line per epoch
        selections.jsonl     per-image selection vectors (train and val)
        analysis/*.json      analysis results
        plots/*.png
        results.json         append-only list of ResultRecords

Every file under the run directory is listed by exactly one record.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import shutil
import sys
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import analysis
from .config import ConfigError, ExperimentConfig, load_config
from .knockout import DiscreteJointTable
from .selection import (
    HTTPSelectorClient,
    ScriptedSelector,
    SelectionRecord,
    SelectionVector,
    VLMSelector,
    read_selections,
    write_selections,
)
from .synthdata import (
    DiscreteTaskSpec,
    discrete_model_fn,
    generate_discrete_task,
    generate_image_task,
    load_dataset,
    save_dataset,
)
from .tbm import FusionModelConfig, LabeledDataset, build_fusion_model, evaluate, load_checkpoint, save_checkpoint, train
from .toolbox import Toolbox

log = logging.getLogger("toolbottleneck")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3
ANALYSES = ("importance", "intervention", "frequency", "data-efficiency", "knockout-verify")
RESULTS = "results.json"


# --------------------------------------------------------------------------
# result records


@dataclass
class ResultRecord:
    run_id: str
    stage: str
    config_fingerprint: str
    artifacts: dict[str, str]  # relative path -> sha256
    metrics: dict[str, Any]
    wall_clock_s: float
    started_at: str
    finished_at: str
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def read_records(run_dir: str | Path) -> list[dict[str, Any]]:
    path = Path(run_dir) / RESULTS
    return json.loads(path.read_text()) if path.exists() else []


def append_record(run_dir: Path, record: ResultRecord) -> None:
    records = read_records(run_dir)
    records.append(record.to_json())
    (run_dir / RESULTS).write_text(json.dumps(records, indent=2, default=analysis._json_default))


def check_orphans(run_dir: str | Path) -> dict[str, list[str]]:
    """Files not listed by any record, and files listed by more than one."""
    run_dir = Path(run_dir)
    counts: dict[str, int] = {}
    for rec in read_records(run_dir):
        for rel in rec["artifacts"]:
            counts[rel] = counts.get(rel, 0) + 1
    present = {p.relative_to(run_dir).as_posix() for p in run_dir.rglob("*") if p.is_file() and p.name != RESULTS}
    return {
        "orphans": sorted(present - set(counts)),
        "duplicates": sorted(r for r, c in counts.items() if c > 1),
        "missing": sorted(set(counts) - present),
    }


class _Stage:
    """Times a stage and collects the artifacts it writes."""

    def __init__(self, run_dir: Path, run_id: str, stage: str, fingerprint: str):
        self.run_dir, self.run_id, self.stage, self.fingerprint = run_dir, run_id, stage, fingerprint
        self.paths: list[Path] = []
        self.started = _now()
        self.t0 = time.perf_counter()

    def add(self, path: Path) -> Path:
        self.paths.append(Path(path))
        return path

    def discard(self) -> None:
        """Remove whatever this stage wrote so a failure leaves no unlisted files."""
        for p in self.paths:
            p.unlink(missing_ok=True)

    def finish(self, metrics: dict[str, Any], **extra) -> ResultRecord:
        rec = ResultRecord(
            run_id=self.run_id,
            stage=self.stage,
            config_fingerprint=self.fingerprint,
            artifacts={p.relative_to(self.run_dir).as_posix(): _digest(p) for p in self.paths},
            metrics=metrics,
            wall_clock_s=round(time.perf_counter() - self.t0, 3),
            started_at=self.started,
            finished_at=_now(),
            extra=extra,
        )
        append_record(self.run_dir, rec)
        return rec


def _free_name(directory: Path, stem: str, suffix: str) -> Path:
    """``stem.suffix``, or ``stem-2.suffix``, ... if taken (deterministic, no clock)."""
    path = directory / f"{stem}{suffix}"
    i = 2
    while path.exists():
        path = directory / f"{stem}-{i}{suffix}"
        i += 1
    return path


# --------------------------------------------------------------------------
# data and selections


def data_dir(cfg: ExperimentConfig) -> Path:
    key = {"task": cfg.canonical()["task"], "toolbox": cfg.canonical()["toolbox"]}
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]
    return Path(cfg.output_dir) / "data" / f"{cfg.task.kind}-{digest}"


def _generate(cfg: ExperimentConfig) -> tuple[dict[str, LabeledDataset], DiscreteJointTable | None]:
    spec = cfg.task_spec()
    if isinstance(spec, DiscreteTaskSpec):
        return generate_discrete_task(spec)
    return generate_image_task(spec, cfg.build_toolbox()), None


def generate_data(cfg: ExperimentConfig) -> Path:
    """Materialize both splits (and the exact joint for discrete tasks)."""
    out = data_dir(cfg)
    splits, joint = _generate(cfg)
    spec = cfg.canonical()["task"]["spec"]
    for name, ds in splits.items():
        save_dataset(out / name, ds, spec)
    if joint is not None:
        (out / "joint.json").write_text(json.dumps(joint.to_json()))
    return out


def prepare_data(cfg: ExperimentConfig) -> tuple[dict[str, LabeledDataset], DiscreteJointTable | None]:
    """Load previously generated data when present, else generate in memory."""
    out = data_dir(cfg)
    if (out / "train" / "manifest.json").exists() and (out / "val" / "manifest.json").exists():
        splits = {name: load_dataset(out / name) for name in ("train", "val")}
        joint = DiscreteJointTable.load(out / "joint.json") if (out / "joint.json").exists() else None
        return splits, joint
    return _generate(cfg)


def make_selector(cfg: ExperimentConfig, toolbox: Toolbox):
    sel = cfg.selector
    if sel.mode == "all":
        return lambda image_id: SelectionVector.all_tools(len(toolbox))
    if sel.mode == "scripted":
        relevance = [float(sel.relevance.get(t, sel.default_relevance)) for t in toolbox.tool_ids]
        return ScriptedSelector(relevance, sel.k, sel.noise, cfg.seed).select
    client = HTTPSelectorClient(cfg.selector_endpoint(), cfg.selector_timeout())
    return VLMSelector(client, toolbox, sel.task, sel.modality, sel.k).select


def attach_selections(cfg: ExperimentConfig, splits: dict[str, LabeledDataset], toolbox: Toolbox):
    select = make_selector(cfg, toolbox)
    records = []
    out = {}
    for name, ds in splits.items():
        vecs = [select(i) for i in ds.image_ids]
        records += [SelectionRecord(i, v) for i, v in zip(ds.image_ids, vecs)]
        out[name] = ds.with_selections(np.array([v.bits for v in vecs]))
    return out, records


# --------------------------------------------------------------------------
# stages


def _run_dir(cfg: ExperimentConfig, run_id: str | None) -> tuple[str, Path]:
    root = Path(cfg.output_dir)
    if run_id is None:
        base = f"{cfg.name}-{cfg.fingerprint()[:10]}"
        run_id, i = base, 2
        while (root / run_id).exists():
            run_id, i = f"{base}-{i}", i + 1
    path = root / run_id
    if path.exists() and any(path.iterdir()):
        raise FileExistsError(f"run directory {path} is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return run_id, path


def _model_for(cfg: ExperimentConfig, toolbox: Toolbox, ds: LabeledDataset, seed: int):
    h, w = ds.stacks.shape[-2:]
    mc = FusionModelConfig(toolbox.total_channels, tuple(cfg.model.conv_block_widths), (h, w))
    return build_fusion_model(mc, seed)


def run_train(cfg: ExperimentConfig, run_id: str | None = None) -> ResultRecord:
    run_id, run_dir = _run_dir(cfg, run_id)
    stage = _Stage(run_dir, run_id, "train", cfg.fingerprint())
    try:
        return _train_stage(cfg, run_dir, stage)
    except BaseException:
        shutil.rmtree(run_dir, ignore_errors=True)
        raise


def _train_stage(cfg: ExperimentConfig, run_dir: Path, stage: _Stage) -> ResultRecord:
    fp = stage.fingerprint
    lock = stage.add(run_dir / "config.lock")
    lock.write_text(cfg.to_yaml())

    toolbox = cfg.build_toolbox()
    splits, _ = prepare_data(cfg)
    splits, sel_records = attach_selections(cfg, splits, toolbox)
    write_selections(stage.add(run_dir / "selections.jsonl"), sel_records)

    tcfg = cfg.train_config()
    model = _model_for(cfg, toolbox, splits["train"], cfg.seed)
    ckpt, history = train(model, splits["train"], splits["val"], toolbox.channels_per_tool, tcfg, config_fingerprint=fp)
    pt = save_checkpoint(run_dir / "checkpoint.pt", ckpt)
    stage.add(pt)
    stage.add(pt.with_suffix(".json"))
    with open(stage.add(run_dir / "history.jsonl"), "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")

    m = evaluate(model, splits["val"], toolbox.channels_per_tool, "selection", tcfg.placeholder)
    metrics = {"val_accuracy": m["accuracy"], "val_auc": m["auc"], "val_log_loss": m["log_loss"],
               "best_epoch": ckpt.epoch, "n_val": m["n"]}
    return stage.finish(metrics, tool_ids=list(toolbox.tool_ids))


def _load_run(run_dir: Path) -> ExperimentConfig:
    lock = run_dir / "config.lock"
    if not lock.exists():
        raise FileNotFoundError(f"no config.lock in {run_dir}")
    return load_config(lock)


def _require_checkpoint(run_dir: Path):
    path = run_dir / "checkpoint.pt"
    if not path.exists():
        raise FileNotFoundError(f"analysis needs a trained checkpoint at {path}")
    return load_checkpoint(path).build_model()


def _stored_selections(run_dir: Path, ds: LabeledDataset) -> LabeledDataset:
    path = run_dir / "selections.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"expected stored selections at {path}")
    by_id = {r.image_id: r.selection.bits for r in read_selections(path)}
    return ds.with_selections(np.array([by_id[i] for i in ds.image_ids]))


def run_analysis(which: str, run_dir: str | Path | None = None, cfg: ExperimentConfig | None = None) -> ResultRecord:
    """Run one analysis inside an existing run, or in a fresh run from ``cfg``."""
    if which not in ANALYSES:
        raise ValueError(f"unknown analysis {which!r}; choose from {ANALYSES}")
    fresh = run_dir is None
    if fresh:
        if cfg is None:
            raise ConfigError("need a run directory or a config")
        if which != "data-efficiency":
            raise ConfigError(f"analysis {which!r} reads a trained run; pass --run-dir")
        run_id, run_dir = _run_dir(cfg, None)
        stage = _Stage(run_dir, run_id, f"analysis:{which}", cfg.fingerprint())
        stage.add(run_dir / "config.lock").write_text(cfg.to_yaml())
    else:
        run_dir = Path(run_dir)
        if not run_dir.is_dir():
            raise FileNotFoundError(f"run directory {run_dir} does not exist")
        cfg = _load_run(run_dir)
        stage = _Stage(run_dir, run_dir.name, f"analysis:{which}", cfg.fingerprint())
    try:
        return _analysis_stage(which, cfg, run_dir, stage)
    except BaseException:
        if fresh:
            shutil.rmtree(run_dir, ignore_errors=True)
        else:
            stage.discard()
        raise


def _analysis_stage(which: str, cfg: ExperimentConfig, run_dir: Path, stage: _Stage) -> ResultRecord:
    (run_dir / "analysis").mkdir(exist_ok=True)
    (run_dir / "plots").mkdir(exist_ok=True)
    out_json = _free_name(run_dir / "analysis", which, ".json")
    out_png = run_dir / "plots" / (out_json.stem + ".png")
    toolbox = cfg.build_toolbox()
    an = cfg.analysis
    tcfg = cfg.train_config()

    if which == "frequency":
        path = run_dir / "selections.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"frequency needs stored selections at {path}")
        sels = [r.selection for r in read_selections(path)]
        st = analysis.selection_frequency(sels)
        payload = st.to_json(toolbox.tool_ids)
        analysis.plot_combinations(st, toolbox.tool_ids, stage.add(out_png))
        metrics = {"n": st.n, "frequency": payload["frequency"], "n_combinations": len(st.combinations)}

    elif which == "data-efficiency":
        splits, _ = prepare_data(cfg)
        splits, _ = attach_selections(cfg, splits, toolbox)
        widths = cfg.model.conv_block_widths
        trainers = {"tbm": analysis.tbm_trainer(toolbox.channels_per_tool, widths, tcfg, an.metric, an.steps)}
        if splits["train"].images is not None:
            trainers["pixel"] = analysis.pixel_trainer(widths, tcfg, an.metric, an.steps)
        curves = analysis.data_efficiency_run(splits["train"], splits["val"], an.sizes, an.seeds, trainers)
        payload = {"metric": an.metric, "curves": {k: c.to_json() for k, c in curves.items()}}
        analysis.plot_curves(curves, stage.add(out_png), an.metric)
        metrics = {f"{k}_mean": c.means() for k, c in curves.items()}

    else:
        model = _require_checkpoint(run_dir)
        splits, joint = prepare_data(cfg)
        ds = _stored_selections(run_dir, splits[an.split])
        if which == "importance":
            report = analysis.tool_importance(model, ds, toolbox, analysis.MetricSpec(an.metric), tcfg.placeholder)
            payload = report.to_json()
            sels = [SelectionVector(tuple(b)) for b in ds.selections]
            freq = dict(zip(toolbox.tool_ids, analysis.selection_frequency(sels).frequency.tolist()))
            analysis.plot_importance(report, stage.add(out_png), freq)
            metrics = {"importance": report.importances(), "baseline": report.rows[0]["baseline"]}
        elif which == "intervention":
            sweep = analysis.intervention_sweep(model, ds, toolbox, an.p_mask_grid, cfg.seed,
                                                placeholder=tcfg.placeholder)
            payload = {"fraction_negative": {str(k): v for k, v in sweep.items()}}
            analysis.plot_sweep(sweep, stage.add(out_png))
            metrics = payload
        else:  # knockout-verify
            if joint is None:
                raise ValueError("knockout-verify needs a discrete task with a known joint")
            spec = cfg.task_spec()
            rows = analysis.knockout_verification(discrete_model_fn(model, spec.resolution), joint, an.min_prob,
                                                  tcfg.placeholder)
            per_mask = analysis.max_error_per_mask(rows)
            payload = {"rows": rows, "linf_per_mask": [{"mask": list(k), "linf": v} for k, v in per_mask.items()]}
            metrics = {"linf": max(per_mask.values()), "n_rows": len(rows)}

    analysis.write_json(stage.add(out_json), payload)
    return stage.finish(metrics)


def emit_report(run_dirs: Sequence[str | Path], out: str | Path) -> Path:
    """Markdown document aggregating records, fingerprints and plots of the given runs."""
    if not run_dirs:
        raise ValueError("no runs given")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", ""]
    curves: dict[str, analysis.DataEfficiencyCurve] = {}
    metric = "accuracy"
    for rd in map(Path, run_dirs):
        records = read_records(rd)
        if not rd.is_dir() or not records:
            raise FileNotFoundError(f"unknown run {rd} (no {RESULTS})")
        lines += [f"## {rd.name}", ""]
        for rec in records:
            lines.append(f"### {rec['stage']}")
            lines.append(f"- config fingerprint: `{rec['config_fingerprint']}`")
            lines.append(f"- wall clock: {rec['wall_clock_s']} s ({rec['started_at']} to {rec['finished_at']})")
            for k, v in rec["metrics"].items():
                lines.append(f"- {k}: {json.dumps(v, default=analysis._json_default)}")
            for rel in rec["artifacts"]:
                if rel.endswith(".png"):
                    lines.append(f"\n![{rel}]({(rd / rel).resolve().as_posix()})")
                if rec["stage"] == "analysis:data-efficiency" and rel.endswith(".json"):
                    payload = json.loads((rd / rel).read_text())
                    metric = payload["metric"]
                    for name, c in payload["curves"].items():
                        curves[f"{rd.name}/{name}"] = analysis.DataEfficiencyCurve(c["trainer"], c["points"])
            lines.append("")
    if curves:
        plot = analysis.plot_curves(curves, out.with_suffix(".curves.png"), metric)
        lines += ["## Combined data-efficiency curves", "", f"![curves]({plot.name})", ""]
    out.write_text("\n".join(lines))
    return out


# --------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toolbottleneck", description="Tool bottleneck experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="materialize the task's train/val splits")
    g.add_argument("--config", required=True)

    t = sub.add_parser("run-train", help="train a fusion model")
    t.add_argument("--config", required=True)
    t.add_argument("--run-id")

    a = sub.add_parser("run-analysis", help="post-hoc analysis of a run")
    a.add_argument("which", choices=ANALYSES)
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--run-dir")
    src.add_argument("--config")

    r = sub.add_parser("emit-report", help="aggregate runs into a markdown report")
    r.add_argument("run_dirs", nargs="*")
    r.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    v.add_argument("--out", help="write the results as JSON here")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate-data":
            print(generate_data(load_config(args.config)))
        elif args.command == "run-train":
            rec = run_train(load_config(args.config), args.run_id)
            print(json.dumps(rec.to_json()["metrics"], indent=2))
        elif args.command == "run-analysis":
            cfg = load_config(args.config) if args.config else None
            rec = run_analysis(args.which, args.run_dir, cfg)
            print(json.dumps(rec.metrics, indent=2, default=analysis._json_default))
        elif args.command == "emit-report":
            print(emit_report(args.run_dirs, args.out))
        elif args.command == "verify":
            from . import acceptance

            wanted = [int(c) for c in args.criteria.split(",")] if args.criteria else None
            results = acceptance.run_all(wanted)
            for res in results:
                print(res.line())
            if args.out:
                analysis.write_json(args.out, [r.to_json() for r in results])
            return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError) as exc:
        # bad arguments that slipped past config validation (e.g. unknown criterion)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if args.command == "verify" else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
