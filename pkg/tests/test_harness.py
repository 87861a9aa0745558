import json
from pathlib import Path

import pytest
import yaml

from radabench.backends import Backend, BackendError, Oracle
from radabench.harness import (
    EXIT_OK,
    EXIT_PARTIAL,
    BackendSpec,
    BadEnum,
    ConfigError,
    EmptyManifest,
    MissingKey,
    RunManifest,
    SecretUnset,
    build_summary,
    cell_seed,
    emit_report,
    enumerate_cells,
    load_config,
    load_corpus,
    parse_config,
    replay_run,
    run_benchmark,
)
from radabench.toolset_sim import Condition


def _raw(tmp_path, **over):
    raw = {
        "output_dir": str(tmp_path / "out"),
        "conditions": ["Baseline"],
        "backends": [{"kind": "oracle"}],
        "seeds": [0],
    }
    raw.update(over)
    return raw


def test_minimal_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(_raw(tmp_path)))
    cfg = load_config(path)
    assert cfg.conditions == (Condition.BASELINE,)
    assert cfg.backends[0].kind == "oracle"
    assert cfg.tasks == tuple(range(1, 12))
    assert cfg.strategies[0].label == "base"


def test_relative_paths_resolve_against_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(_raw(tmp_path, output_dir="results")))
    assert load_config(path).output_dir == tmp_path / "results"


def test_bad_condition(tmp_path):
    with pytest.raises(BadEnum) as exc:
        parse_config(_raw(tmp_path, conditions=["Superb"]))
    assert "Superb" in str(exc.value)


def test_bad_backend_kind(tmp_path):
    with pytest.raises(BadEnum):
        parse_config(_raw(tmp_path, backends=[{"kind": "psychic"}]))


def test_bad_builder_policy(tmp_path):
    with pytest.raises(BadEnum):
        parse_config(_raw(tmp_path, strategies=[{"auto_build": True, "builder_policy": "Guess"}]))


def test_missing_key(tmp_path):
    raw = _raw(tmp_path)
    del raw["conditions"]
    with pytest.raises(MissingKey):
        parse_config(raw)


def test_secret_unset(tmp_path, monkeypatch):
    monkeypatch.delenv("RB_UNSET_KEY", raising=False)
    live = {"kind": "live", "endpoint": "http://x", "model": "m", "api_key_env": "RB_UNSET_KEY"}
    with pytest.raises(SecretUnset):
        parse_config(_raw(tmp_path, backends=[live]))


def test_secret_not_stored(tmp_path, monkeypatch):
    monkeypatch.setenv("RB_SET_KEY", "sk-very-secret")
    live = {"kind": "live", "endpoint": "http://x", "model": "m", "api_key_env": "RB_SET_KEY"}
    cfg = parse_config(_raw(tmp_path, backends=[live]))
    assert "sk-very-secret" not in repr(cfg)


def test_empty_seeds(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(_raw(tmp_path, seeds=[]))


def test_duplicate_backend_labels(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(_raw(tmp_path, backends=[{"kind": "oracle"}, {"kind": "oracle"}]))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_cell_seed_stable():
    a = cell_seed(0, "rec", 3, Condition.BASELINE)
    assert a == cell_seed(0, "rec", 3, "Baseline")
    assert a != cell_seed(1, "rec", 3, Condition.BASELINE)
    assert 0 <= a < 2**64


def test_cells_unique(tmp_path):
    cfg = parse_config(_raw(tmp_path, conditions=["Baseline", "InsufficientConfig1"], seeds=[0, 1]))
    cells = enumerate_cells(cfg, load_corpus(cfg))
    assert len(cells) == 2 * 2 * 6 * 11
    assert len({c.cell_id for c in cells}) == len(cells)


def test_unknown_record(tmp_path):
    cfg = parse_config(_raw(tmp_path, records=["nobody"]))
    with pytest.raises(ConfigError):
        load_corpus(cfg)


# ---------------------------------------------------------------- runs


def test_oracle_run_and_report(tmp_path):
    cfg = parse_config(_raw(tmp_path, strategies=[{}, {"self_reflection": True}]))
    result = run_benchmark(cfg)
    assert result.exit_code == EXIT_OK
    assert result.manifest.counts() == {"pending": 0, "done": 132, "failed": 0}
    csv_path, json_path = emit_report(cfg.output_dir)
    summary = json.loads(json_path.read_text())
    for g in summary["groups"]:
        assert g["means"]["completion"] == 1.0
        assert set(g["by_complexity"]) == {"Simple", "Moderate", "Complex"}
        assert len(g["by_task"]) == 11
    table = summary["paired_strategies"][0]
    assert {table["a"], table["b"]} == {"base", "sr"}
    assert table["metrics"]["levenshtein"]["ties"] == 6
    assert "Baseline" in summary["context_tokens"]
    assert len(csv_path.read_text().splitlines()) == 133


def test_report_is_byte_identical(tmp_path):
    cfg = parse_config(_raw(tmp_path, tasks=[1, 2]))
    run_benchmark(cfg)
    first = [p.read_bytes() for p in emit_report(cfg.output_dir)]
    second = [p.read_bytes() for p in emit_report(cfg.output_dir)]
    assert first == second


def test_resume_skips_done_cells(tmp_path):
    cfg = parse_config(_raw(tmp_path, max_cells=30))
    assert run_benchmark(cfg).executed == 30
    full = parse_config(_raw(tmp_path))
    result = run_benchmark(full)
    assert result.executed == 36
    assert result.manifest.counts()["done"] == 66
    lines = (full.output_dir / "transcripts.jsonl").read_text().splitlines()
    assert len(lines) == 66
    assert len({json.loads(x)["cell_id"] for x in lines}) == 66


def test_resume_drops_unrecorded_lines(tmp_path):
    cfg = parse_config(_raw(tmp_path, tasks=[1]))
    run_benchmark(cfg)
    out = cfg.output_dir
    # simulate a crash after a line was written but before the manifest update
    manifest = RunManifest.load(out / "manifest.json")
    victim = sorted(manifest.cells)[0]
    manifest.cells[victim] = {"status": "pending"}
    manifest.save()
    result = run_benchmark(cfg)
    assert result.executed == 1
    ids = [json.loads(x)["cell_id"] for x in (out / "rows.jsonl").read_text().splitlines()]
    assert sorted(ids) == sorted(set(ids)) and len(ids) == 6


class _Flaky(Backend):
    label = "flaky"

    def __init__(self):
        self.inner = Oracle(label="flaky")

    def fork(self, ctx):
        if ctx.record.record_id.startswith("head_and_neck") and int(ctx.qa.task) == 2:
            return _Timeout()
        return self.inner.fork(ctx)


class _Timeout(Backend):
    def send(self, messages):
        raise BackendError("read timeout")


def test_failed_cell_is_isolated(tmp_path, monkeypatch):
    monkeypatch.setattr(BackendSpec, "build", lambda self: _Flaky())
    cfg = parse_config(_raw(tmp_path, backends=[{"kind": "oracle", "label": "flaky"}]))
    result = run_benchmark(cfg)
    assert result.exit_code == EXIT_PARTIAL
    assert result.manifest.counts() == {"pending": 0, "done": 65, "failed": 1}
    failed = [c for c in result.manifest.cells.values() if c["status"] == "failed"]
    assert "read timeout" in failed[0]["error"]
    emit_report(cfg.output_dir)


def test_empty_manifest(tmp_path):
    with pytest.raises(EmptyManifest):
        build_summary([])
    (tmp_path / "empty").mkdir()
    with pytest.raises(EmptyManifest):
        emit_report(tmp_path / "empty")


def test_replay_detects_tampering(tmp_path):
    cfg = parse_config(_raw(tmp_path, tasks=[3]))
    run_benchmark(cfg)
    assert replay_run(cfg.output_dir).ok
    rows_path = cfg.output_dir / "rows.jsonl"
    lines = rows_path.read_text().splitlines()
    d = json.loads(lines[0])
    d["row"]["values"]["levenshtein"] = 3
    lines[0] = json.dumps(d, sort_keys=True)
    rows_path.write_text("\n".join(lines) + "\n")
    report = replay_run(cfg.output_dir)
    assert report.mismatched == [d["cell_id"]]
