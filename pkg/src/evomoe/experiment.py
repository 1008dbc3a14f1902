"""End-to-end experiment driver behind the command line.

``run_experiment`` generates (or loads) the task stream, trains task by task,
checkpoints and evaluates each stage, and writes the report files.
``run_ablation`` repeats that over the toggle grid with shared seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .config import ABLATION_ROWS, SCHEMA_VERSION, ExperimentConfig, parse_toggles
from .errors import CheckpointError, ConfigError
from .evaluator import AccuracyMatrix, RoutingMatrix, evaluate_stage, summarize
from .taskgen import TaskStream, generate_stream, load_stream, verify_stream
from .trainer import TaskLog, begin_task, capture_prototypes, end_task, init_state, train_task

log = logging.getLogger(__name__)

OUTPUT_FILES = (
    "accuracy_matrix.csv",
    "metrics.json",
    "routing_matrix.csv",
    "routing_fractions.csv",
    "telemetry.jsonl",
    "expert_counts.csv",
    "manifest.json",
)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+src.{h.hexdigest()[:12]}"


def experiment_hash(cfg: ExperimentConfig) -> str:
    """Config hash, extended with the dataset bundle's digest when one is used."""
    if cfg.dataset is None:
        return cfg.hash()
    return hashlib.sha256((cfg.hash() + file_sha256(cfg.dataset)).encode()).hexdigest()


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    if cfg.dataset is not None:
        stream = load_stream(cfg.dataset)
    else:
        stream = generate_stream(**cfg.stream_kwargs())
    report = verify_stream(stream)
    if not report.ok:
        raise RuntimeError("task stream failed verification: " + "; ".join(report.failures))
    return stream


@dataclass
class StageRecord:
    stage: int
    task: int
    accuracy: list[float]
    routing: list[list[float]]
    counts: list[int]
    expansions: int
    prunes: int
    final_loss: float
    events: list[dict] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _stage_path(out: Path, stage: int) -> Path:
    return out / "checkpoints" / f"stage_{stage}.npz"


def _record_stage(stage: int, task: int, state, stream: TaskStream, protocol: str, tlog: TaskLog) -> StageRecord:
    acc, frac = evaluate_stage(state, stream, protocol)
    return StageRecord(
        stage=stage,
        task=task,
        accuracy=acc.tolist(),
        routing=frac.tolist(),
        counts=state.expert_counts(),
        expansions=tlog.expansions,
        prunes=tlog.prunes,
        final_loss=tlog.losses[-1],
        events=tlog.events,
        trace=tlog.trace,
    )


def _resume_point(cfg: ExperimentConfig, out: Path, exp_hash: str, T: int):
    """Latest usable stage checkpoint and the records before it; refuses on hash mismatch."""
    records: list[StageRecord] = []
    state = None
    for j in range(T):
        path = _stage_path(out, j)
        if not path.exists():
            break
        loaded, meta = ckpt.load_checkpoint(path)
        extra = meta["extra"]
        if extra.get("experiment_hash") != exp_hash:
            raise ConfigError(f"{path}: checkpoint was written by a different configuration (hash {extra.get('experiment_hash', '?')[:12]} vs {exp_hash[:12]}); refusing to resume")
        records.append(StageRecord(**extra["record"]))
        state = loaded
    return state, records


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, resume: bool = False) -> dict:
    """Train and evaluate the whole stream; returns the metrics document."""
    started = time.perf_counter()
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    stream = build_stream(cfg)
    tcfg = cfg.train_config()
    exp_hash = experiment_hash(cfg)
    T = len(stream)

    state, records = (None, [])
    if resume:
        state, records = _resume_point(cfg, out, exp_hash, T)
        if records:
            log.info("resuming after stage %d", records[-1].stage)
    if state is None:
        state = init_state(stream, tcfg)
        records = []

    for j in range(len(records), T):
        spec = stream[j]
        protos, scores = capture_prototypes(spec, state.encoder, tcfg)
        begin_task(state, spec.task)
        tlog = train_task(state, spec)
        end_task(state, spec, protos, scores)
        rec = _record_stage(j, spec.task, state, stream, cfg.protocol, tlog)
        records.append(rec)
        ckpt.save_checkpoint(
            state,
            _stage_path(out, j),
            extra={"experiment": cfg.to_dict(), "experiment_hash": exp_hash, "protocol": cfg.protocol, "record": rec.to_dict()},
        )
        log.info("stage %d (%s): experts per layer %s, accuracy %s", j, spec.name, rec.counts, np.round(rec.accuracy, 4).tolist())

    acc = AccuracyMatrix(np.array([r.accuracy for r in records]).T, cfg.protocol, [s.name for s in stream.tasks])
    routing = RoutingMatrix(np.array([r.routing for r in records]), acc.task_names)
    zs_col, _ = evaluate_stage(init_state(stream, tcfg), stream, "zero_shot")
    zs = np.repeat(zs_col[:, None], T, axis=1)
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": exp_hash,
        "protocol": cfg.protocol,
        "tasks": acc.task_names,
        "accuracy_matrix": acc.acc.tolist(),
        "metrics": summarize(acc),
        "zero_shot": summarize(zs),
        "routing_table": routing.table8().tolist(),
        "delta": state.delta,
        "expert_counts": [r.counts for r in records],
        "expansions": [r.expansions for r in records],
        "prunes": [r.prunes for r in records],
        "final_loss": [r.final_loss for r in records],
    }
    write_reports(out, cfg, metrics, records, routing, exp_hash, time.perf_counter() - started)
    return metrics


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_reports(out: Path, cfg: ExperimentConfig, metrics: dict, records: list[StageRecord], routing: RoutingMatrix, exp_hash: str, seconds: float) -> None:
    names = metrics["tasks"]
    T = len(names)
    acc = np.array(metrics["accuracy_matrix"])
    with open(out / "accuracy_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task"] + [f"after_stage_{j}" for j in range(T)])
        for k in range(T):
            w.writerow([names[k]] + [repr(float(v)) for v in acc[k]])
    _dump_json(out / "metrics.json", metrics)
    with open(out / "routing_matrix.csv", "w", newline="") as fh:
        # rows: training stage, columns: target task
        w = csv.writer(fh)
        w.writerow(["stage"] + names)
        for j, row in enumerate(routing.table8()):
            w.writerow([j] + [repr(float(v)) for v in row])
    with open(out / "routing_fractions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "task", "destination", "fraction"])
        for j in range(routing.frac.shape[0]):
            for k in range(T):
                for d in range(T + 1):
                    w.writerow([j, names[k], names[d] if d < T else "fallback", repr(float(routing.frac[j, k, d]))])
    with open(out / "telemetry.jsonl", "w") as fh:
        for r in records:
            for row in r.trace:
                fh.write(json.dumps({"kind": "metrics", **row}, sort_keys=True) + "\n")
            for ev in r.events:
                fh.write(json.dumps({"kind": "evolution", **ev}, sort_keys=True) + "\n")
    with open(out / "expert_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "task", "layer", "experts"])
        for r in records:
            for layer, n in enumerate(r.counts):
                w.writerow([r.stage, names[r.task], layer, n])
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": exp_hash,
        "seed": cfg.seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "provenance": cfg.provenance,
        "dataset_sha256": file_sha256(cfg.dataset) if cfg.dataset else None,
        "checkpoints": [str(_stage_path(out, r.stage).relative_to(out)) for r in records],
        "runtime_seconds": round(seconds, 3),
    }
    _dump_json(out / "manifest.json", manifest)


# ----------------------------------------------------------------- ablation


def parse_rows(spec: str | None) -> dict[str, dict]:
    """``"no_add,no_lb+top2"`` -> {row name: toggle overrides}; ``full`` is always first."""
    rows = {"full": {}}
    names = list(ABLATION_ROWS) if not spec else [s for s in spec.replace(" ", "").split(",") if s]
    for name in names:
        tokens = ABLATION_ROWS[name] if name in ABLATION_ROWS else tuple(name.split("+"))
        rows[name] = parse_toggles([t for t in tokens if t])
    return rows


def run_ablation(cfg: ExperimentConfig, out: str | Path | None = None, rows: str | None = None) -> dict:
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = parse_rows(rows)
    results = {}
    for name, overrides in grid.items():
        row_cfg = ExperimentConfig(**{**cfg.__dict__})
        row_cfg.toggles = {**cfg.toggles, **overrides}
        m = run_experiment(row_cfg, out / name)
        results[name] = {
            "toggles": row_cfg.toggles,
            "transfer": m["metrics"]["transfer"]["overall"],
            "avg": m["metrics"]["avg"]["overall"],
            "last": m["metrics"]["last"]["overall"],
        }
    full = results["full"]
    for r in results.values():
        for key in ("transfer", "avg", "last"):
            a, b = r[key], full[key]
            r[f"delta_{key}"] = None if a is None or b is None else a - b
    report = {
        "schema_version": SCHEMA_VERSION,
        "rows": results,
        "full_is_best_last": all(full["last"] >= r["last"] for r in results.values()),
    }
    _dump_json(out / "ablation.json", report)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["add", "prune", "lb", "routing", "router"]
        w.writerow(["row"] + cols + ["transfer", "avg", "last", "delta_transfer", "delta_avg", "delta_last"])
        for name, r in results.items():
            fmt = lambda v: "" if v is None else repr(float(v))
            w.writerow([name] + [r["toggles"][c] for c in cols] + [fmt(r[k]) for k in ("transfer", "avg", "last", "delta_transfer", "delta_avg", "delta_last")])
    return report


# ------------------------------------------------------- checkpoint checks


@dataclass
class VerifyReport:
    path: str
    stage: int
    ok: bool
    recorded: list[float]
    reproduced: list[float]


def verify_checkpoint(path: str | Path) -> VerifyReport:
    """Reload, re-evaluate the stage, and compare to the accuracies recorded at save time bit for bit."""
    state, meta = ckpt.load_checkpoint(path)
    extra = meta.get("extra") or {}
    if "experiment" not in extra or "record" not in extra:
        raise CheckpointError(f"{path}: no recorded evaluation to compare against")
    exp = extra["experiment"]
    cfg = ExperimentConfig(seed=exp["seed"], out=exp["out"], protocol=exp["protocol"], dataset=exp["dataset"], train=exp["train"], data=exp["data"], toggles=exp["toggles"])
    stream = build_stream(cfg)
    acc, frac = evaluate_stage(state, stream, extra["protocol"])
    rec = extra["record"]
    ok = acc.tolist() == rec["accuracy"] and frac.tolist() == rec["routing"]
    return VerifyReport(str(path), rec["stage"], ok, rec["accuracy"], acc.tolist())
