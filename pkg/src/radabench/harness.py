"""Benchmark runs: configuration, cell manifest, persistence, resume and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import statistics
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .backends import Backend, Clumsy, Deviant, Echo, LiveBackend, Oracle, Refuser
from .corpus import CorpusEntry, load_bundled_corpus, load_corpus_dir
from .engine import Limits, Transcript, replay_matches
from .metrics import METRIC_NAMES, MetricRow, aggregate, compute_row, paired_compare
from .prompts import PromptRegistry
from .strategies import PlannerParseError, StrategyConfig, run_strategy
from .toolset_sim import Condition, build_toolset

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


class ConfigError(ValueError):
    pass


class MissingKey(ConfigError):
    pass


class BadEnum(ConfigError):
    pass


class SecretUnset(ConfigError):
    pass


class EmptyManifest(RuntimeError):
    pass


BACKEND_KINDS = ("oracle", "deviant", "clumsy", "refuser", "echo", "live")


@dataclass(frozen=True)
class BackendSpec:
    kind: str
    label: str
    params: Mapping[str, Any] = field(default_factory=dict)
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    max_parallelism: int = 4
    retries: int = 2
    timeout: float = 60.0

    def build(self) -> Backend:
        p = dict(self.params)
        if self.kind == "oracle":
            return Oracle(misground=p.get("misground"), label=self.label)
        if self.kind == "deviant":
            return Deviant(int(p.get("k", 1)), label=self.label)
        if self.kind == "clumsy":
            return Clumsy(int(p.get("j", 1)), label=self.label)
        if self.kind == "refuser":
            fields = {k: p[k] for k in ("category", "anatomy", "modality", "ability") if k in p}
            return Refuser(label=self.label, **fields)
        if self.kind == "echo":
            return Echo(p.get("text"), label=self.label)
        return LiveBackend(
            self.endpoint,
            self.model,
            api_key_env=self.api_key_env,
            retries=self.retries,
            timeout=self.timeout,
            max_parallelism=self.max_parallelism,
            label=self.label,
        )


@dataclass(frozen=True)
class RunConfig:
    output_dir: Path
    conditions: tuple[Condition, ...]
    backends: tuple[BackendSpec, ...]
    seeds: tuple[int, ...] = (0,)
    strategies: tuple[StrategyConfig, ...] = (StrategyConfig(),)
    tasks: tuple[int, ...] = tuple(range(1, 12))
    records: tuple[str, ...] | None = None
    data_dir: Path | None = None
    prompt_dir: Path | None = None
    limits: Limits = field(default_factory=Limits)
    workers: int = 8
    max_cells: int | None = None
    resume: bool = True


def _require(d: Mapping, key: str, where: str = "config") -> Any:
    if key not in d or d[key] is None:
        raise MissingKey(f"{where}: missing key {key!r}")
    return d[key]


def _enum(cls, value, what: str):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise BadEnum(f"unknown {what} {value!r}; expected one of {allowed}") from None


def _backend_spec(d: Mapping, i: int) -> BackendSpec:
    where = f"backends[{i}]"
    kind = str(_require(d, "kind", where)).lower()
    if kind not in BACKEND_KINDS:
        raise BadEnum(f"{where}: unknown backend kind {kind!r}; expected one of {', '.join(BACKEND_KINDS)}")
    label = str(d.get("label") or kind)
    if kind == "live":
        endpoint = _require(d, "endpoint", where)
        model = _require(d, "model", where)
        key_env = d.get("api_key_env")
        if key_env and not os.environ.get(key_env):
            raise SecretUnset(f"{where}: environment variable {key_env} is not set")
        return BackendSpec(
            kind,
            str(d.get("label") or model),
            endpoint=str(endpoint),
            model=str(model),
            api_key_env=key_env,
            max_parallelism=int(d.get("max_parallelism", 4)),
            retries=int(d.get("retries", 2)),
            timeout=float(d.get("timeout", 60.0)),
        )
    return BackendSpec(kind, label, params=dict(d.get("params") or {}), max_parallelism=int(d.get("max_parallelism", 64)))


def parse_config(raw: Mapping, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping")
    base = base_dir or Path.cwd()

    def path(value):
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    conditions = tuple(_enum(Condition, c, "condition") for c in _require(raw, "conditions"))
    if not conditions:
        raise ConfigError("at least one condition is required")
    backends = tuple(_backend_spec(b, i) for i, b in enumerate(_require(raw, "backends")))
    if not backends:
        raise ConfigError("at least one backend is required")
    labels = [b.label for b in backends]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"backend labels must be unique: {labels}")
    seeds = tuple(int(s) for s in raw.get("seeds", [0]))
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    strategies = []
    for i, s in enumerate(raw.get("strategies") or [{}]):
        try:
            strategies.append(StrategyConfig.from_dict(s or {}))
        except ValueError as exc:
            raise BadEnum(f"strategies[{i}]: {exc}") from None
    tasks = tuple(int(t) for t in raw.get("tasks", range(1, 12)))
    if any(not 1 <= t <= 11 for t in tasks):
        raise BadEnum(f"tasks must lie in 1..11, got {list(tasks)}")
    lim = raw.get("limits") or {}
    limits = Limits(max_steps=lim.get("max_steps"), abort_on_io_error=bool(lim.get("abort_on_io_error", False)))
    records = raw.get("records")
    return RunConfig(
        output_dir=path(_require(raw, "output_dir")),
        conditions=conditions,
        backends=backends,
        seeds=seeds,
        strategies=tuple(strategies),
        tasks=tasks,
        records=tuple(records) if records else None,
        data_dir=path(raw.get("data_dir")),
        prompt_dir=path(raw.get("prompt_dir")),
        limits=limits,
        workers=int(raw.get("workers", 8)),
        max_cells=raw.get("max_cells"),
        resume=bool(raw.get("resume", True)),
    )


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    return parse_config(raw or {}, p.parent)


# ---------------------------------------------------------------- cells


def cell_seed(seed: int, record_id: str, task: int, condition: Condition | str) -> int:
    cond = condition.value if isinstance(condition, Condition) else condition
    digest = hashlib.sha256(f"{seed}|{record_id}|{task}|{cond}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class Cell:
    record_id: str
    task: int
    condition: Condition
    seed: int
    backend: str
    strategy: str

    @property
    def cell_id(self) -> str:
        return f"{self.record_id}|{self.task}|{self.condition.value}|{self.seed}|{self.backend}|{self.strategy}"


def load_corpus(config: RunConfig) -> list[CorpusEntry]:
    corpus = load_corpus_dir(config.data_dir) if config.data_dir else load_bundled_corpus()
    if config.records:
        wanted = set(config.records)
        corpus = [e for e in corpus if e.record.record_id in wanted]
        missing = wanted - {e.record.record_id for e in corpus}
        if missing:
            raise ConfigError(f"unknown record ids {sorted(missing)}")
    return corpus


def enumerate_cells(config: RunConfig, corpus: list[CorpusEntry]) -> list[Cell]:
    cells = [
        Cell(e.record.record_id, t, c, s, b.label, st.label)
        for c, s, e, t, b, st in itertools.product(
            config.conditions, config.seeds, corpus, config.tasks, config.backends, config.strategies
        )
    ]
    ids = [c.cell_id for c in cells]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate cells; check strategy and backend labels")
    if config.max_cells is not None:
        cells = cells[: int(config.max_cells)]
    return cells


# ---------------------------------------------------------------- persistence


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    path: Path
    cells: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        if path.exists():
            return cls(path, json.loads(path.read_text(encoding="utf-8"))["cells"])
        return cls(path)

    def save(self) -> None:
        _atomic_write(self.path, json.dumps({"cells": self.cells}, indent=1, sort_keys=True) + "\n")

    def status(self, cell_id: str) -> str:
        return self.cells.get(cell_id, {}).get("status", "pending")

    def counts(self) -> dict[str, int]:
        out = {"pending": 0, "done": 0, "failed": 0}
        for c in self.cells.values():
            out[c["status"]] += 1
        return out


TRANSCRIPTS = "transcripts.jsonl"
ROWS = "rows.jsonl"
MANIFEST = "manifest.json"


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _compact(lines: list[dict], keep: set[str]) -> str:
    return "".join(json.dumps(d, sort_keys=True, ensure_ascii=False) + "\n" for d in lines if d["cell_id"] in keep)


@dataclass
class RunResult:
    manifest: RunManifest
    executed: int
    failed: int

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.manifest.counts()["failed"] else EXIT_OK


def _run_cell(cell: Cell, entry: CorpusEntry, backend: Backend, strategy: StrategyConfig, config: RunConfig, registry):
    qa = next(q for q in entry.qa if int(q.task) == cell.task)
    seed = cell_seed(cell.seed, cell.record_id, cell.task, cell.condition)
    toolset, gap = build_toolset(cell.condition, seed, entry.record, cell.task)
    try:
        t = run_strategy(backend, qa, entry.record, toolset, strategy, config.limits, gap, cell.condition, seed, registry)
    except PlannerParseError as exc:
        return None, None, f"PlannerParseError: {exc}"
    if (t.terminal or {}).get("kind") == "BackendError":
        return None, None, t.terminal.get("error", "backend error")
    row = compute_row(t, entry.record, qa)
    return t, row, None


def run_benchmark(config: RunConfig) -> RunResult:
    """Run every pending cell; results are written in cell order so logs are reproducible."""
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(config)
    by_id = {e.record.record_id: e for e in corpus}
    cells = enumerate_cells(config, corpus)
    manifest = RunManifest.load(out / MANIFEST) if config.resume else RunManifest(out / MANIFEST)
    done = {cid for cid, c in manifest.cells.items() if c["status"] == "done"}
    # drop lines from cells that never reached the manifest (interrupted writes)
    for name in (TRANSCRIPTS, ROWS):
        lines = _read_jsonl(out / name) if config.resume else []
        _atomic_write(out / name, _compact(lines, done))
    for c in cells:
        manifest.cells.setdefault(c.cell_id, {"status": "pending"})
    manifest.save()

    backends = {b.label: b.build() for b in config.backends}
    strategies = {s.label: s for s in config.strategies}
    registry = PromptRegistry(config.prompt_dir) if config.prompt_dir else None
    pending = [c for c in cells if manifest.status(c.cell_id) != "done"]
    workers = max(1, min(config.workers, *(b.max_parallelism for b in backends.values())))
    lock = threading.Lock()
    executed = failed = 0

    def work(cell: Cell):
        try:
            return _run_cell(cell, by_id[cell.record_id], backends[cell.backend], strategies[cell.strategy], config, registry)
        except Exception as exc:  # a cell failure must not stop the run
            log.exception("cell %s failed", cell.cell_id)
            return None, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=workers) as pool, open(out / TRANSCRIPTS, "a", encoding="utf-8") as tf, open(
        out / ROWS, "a", encoding="utf-8"
    ) as rf:
        for cell, (t, row, error) in zip(pending, pool.map(work, pending)):
            with lock:
                if error is None:
                    tf.write(json.dumps({"cell_id": cell.cell_id, "transcript": t.to_dict()}, sort_keys=True, ensure_ascii=False) + "\n")
                    rf.write(json.dumps({"cell_id": cell.cell_id, "row": row.to_dict()}, sort_keys=True) + "\n")
                    tf.flush()
                    rf.flush()
                    manifest.cells[cell.cell_id] = {"status": "done"}
                    executed += 1
                else:
                    manifest.cells[cell.cell_id] = {"status": "failed", "error": error}
                    failed += 1
                manifest.save()
    for b in backends.values():
        if hasattr(b, "close"):
            b.close()
    return RunResult(manifest, executed, failed)


# ---------------------------------------------------------------- report


def _clean(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return None
        return round(value, 6)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def load_rows(output_dir: Path) -> list[MetricRow]:
    manifest = RunManifest.load(output_dir / MANIFEST)
    done = {cid for cid, c in manifest.cells.items() if c["status"] == "done"}
    rows = [(d["cell_id"], MetricRow.from_dict(d["row"])) for d in _read_jsonl(output_dir / ROWS) if d["cell_id"] in done]
    return [r for _, r in sorted(rows, key=lambda x: x[0])]


# paired comparisons: metric -> lower is better
PAIRED_METRICS = {"levenshtein": True, "fdr": True, "tma": False, "completion": False, "ecr": False}


def _per_record(rows: Iterable[MetricRow], metric: str) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in rows:
        v = r.values.get(metric)
        if v is not None:
            acc.setdefault(r.record_id, []).append(float(v))
    return {k: sum(v) / len(v) for k, v in acc.items()}


def _paired_tables(rows: list[MetricRow], axis: str, fixed: tuple[str, ...]) -> list[dict]:
    tables = []
    groups: dict[tuple, list[MetricRow]] = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, f) for f in fixed), []).append(r)
    for key, members in sorted(groups.items(), key=lambda kv: [str(x) for x in kv[0]]):
        labels = sorted({getattr(r, axis) for r in members})
        for a, b in itertools.combinations(labels, 2):
            ra = [r for r in members if getattr(r, axis) == a]
            rb = [r for r in members if getattr(r, axis) == b]
            shared = {(r.qa_id, r.condition) for r in ra} & {(r.qa_id, r.condition) for r in rb}
            ra = [r for r in ra if (r.qa_id, r.condition) in shared]
            rb = [r for r in rb if (r.qa_id, r.condition) in shared]
            results = {}
            for metric, lower in PAIRED_METRICS.items():
                ma, mb = _per_record(ra, metric), _per_record(rb, metric)
                recs = sorted(set(ma) & set(mb))
                if len(recs) < 2:
                    continue
                res = paired_compare([ma[k] for k in recs], [mb[k] for k in recs], lower_is_better=lower)
                results[metric] = res.to_dict()
            if results:
                tables.append({**dict(zip(fixed, key)), "a": a, "b": b, "axis": axis, "cells": len(shared), "metrics": results})
    return tables


def _distribution(values: list[float]) -> dict:
    if not values:
        return {}
    q = statistics.quantiles(values, n=4, method="inclusive") if len(values) > 1 else [values[0]] * 3
    return {
        "n": len(values),
        "min": min(values),
        "p25": q[0],
        "median": q[1],
        "p75": q[2],
        "max": max(values),
        "mean": sum(values) / len(values),
    }


def build_summary(rows: list[MetricRow]) -> dict:
    if not rows:
        raise EmptyManifest("no completed cells to report")
    groups: dict[tuple, list[MetricRow]] = {}
    for r in rows:
        groups.setdefault((r.backend, r.strategy, r.condition or ""), []).append(r)
    out_groups = []
    for (backend, strategy, condition), members in sorted(groups.items()):
        by_task: dict[str, dict] = {}
        for task in sorted({r.task for r in members}):
            by_task[str(task)] = aggregate(r for r in members if r.task == task).means()
        by_complexity = {
            c: aggregate(r for r in members if r.complexity == c).means() for c in sorted({r.complexity for r in members})
        }
        out_groups.append(
            {
                "backend": backend,
                "strategy": strategy,
                "condition": condition,
                "n": len(members),
                "means": aggregate(members).means(),
                "by_task": by_task,
                "by_complexity": by_complexity,
            }
        )
    tokens: dict[str, dict] = {}
    for cond in sorted({r.condition or "" for r in rows}):
        vals = [float(r.values["context_tokens"]) for r in rows if (r.condition or "") == cond]
        tokens[cond] = _distribution(vals)
    return _clean(
        {
            "groups": out_groups,
            "paired_strategies": _paired_tables(rows, "strategy", ("backend", "condition")),
            "paired_backends": _paired_tables(rows, "backend", ("strategy", "condition")),
            "context_tokens": tokens,
        }
    )


def metrics_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["qa_id", "record_id", "task", "complexity", "condition", "backend", "strategy"]
    w.writerow(head + list(METRIC_NAMES))
    for r in sorted(rows, key=lambda r: (r.backend, r.strategy, r.condition or "", r.record_id, r.task)):
        vals = []
        for name in METRIC_NAMES:
            v = r.values.get(name)
            if v is None:
                vals.append("")
            elif isinstance(v, bool):
                vals.append(int(v))
            elif isinstance(v, float):
                vals.append(repr(round(v, 6)))
            else:
                vals.append(v)
        w.writerow([r.qa_id, r.record_id, r.task, r.complexity, r.condition or "", r.backend, r.strategy] + vals)
    return buf.getvalue()


def emit_report(output_dir: str | Path) -> tuple[Path, Path]:
    out = Path(output_dir)
    rows = load_rows(out)
    summary = build_summary(rows)
    csv_path, json_path = out / "metrics.csv", out / "summary.json"
    _atomic_write(csv_path, metrics_csv(rows))
    _atomic_write(json_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------- replay


@dataclass
class ReplayReport:
    checked: int
    mismatched: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatched


def replay_run(output_dir: str | Path, data_dir: str | Path | None = None) -> ReplayReport:
    """Recompute every stored metric row from its transcript and re-execute the recorded calls."""
    out = Path(output_dir)
    corpus = load_corpus_dir(data_dir) if data_dir else load_bundled_corpus()
    by_id = {e.record.record_id: e for e in corpus}
    rows = {d["cell_id"]: d["row"] for d in _read_jsonl(out / ROWS)}
    bad: list[str] = []
    checked = 0
    for d in _read_jsonl(out / TRANSCRIPTS):
        checked += 1
        t = Transcript.from_dict(d["transcript"])
        entry = by_id.get(t.record_id)
        if entry is None:
            bad.append(d["cell_id"])
            continue
        qa = next(q for q in entry.qa if int(q.task) == t.task)
        row = compute_row(t, entry.record, qa).to_dict()
        stored = rows.get(d["cell_id"])
        if stored is None or json.dumps(row, sort_keys=True) != json.dumps(stored, sort_keys=True):
            bad.append(d["cell_id"])
        elif not replay_matches(t, entry.record):
            bad.append(d["cell_id"])
    return ReplayReport(checked, bad)
