"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import CorpusError, load_bundled_corpus, load_corpus_dir, validate_qa
from .engine import Transcript
from .harness import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARTIAL,
    ConfigError,
    EmptyManifest,
    cell_seed,
    emit_report,
    load_config,
    replay_run,
    run_benchmark,
)
from .prompts import PromptRegistry
from .strategies import StrategyError, critique_prompt_round
from .toolset_sim import SIZE_BOUNDS, Condition, build_toolset


def _corpus(data_dir: str | None):
    return load_corpus_dir(data_dir) if data_dir else load_bundled_corpus()


def cmd_validate_data(args) -> int:
    try:
        corpus = _corpus(args.data_dir)
    except (CorpusError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    leaks = 0
    for e in corpus:
        v = validate_qa(list(e.qa))
        leaks += len(v.leaking_tasks)
        flag = f" leaking tasks {list(v.leaking_tasks)}" if v.leaking_tasks else ""
        print(f"{e.record.record_id}: {len(e.qa)} QA pairs{flag}")
    print(f"{len(corpus)} records, {sum(len(e.qa) for e in corpus)} QA pairs, {leaks} leakage flags")
    return EXIT_OK


def cmd_gen_toolsets(args) -> int:
    corpus = _corpus(args.data_dir)
    conditions = [Condition(c) for c in args.condition] if args.condition else list(Condition)
    out = Path(args.out) if args.out else None
    violations = 0
    for cond in conditions:
        lo, hi = SIZE_BOUNDS[cond]
        sizes = []
        for seed in args.seed:
            for e in corpus:
                tasks = args.task or range(1, 12)
                for task in tasks:
                    s = cell_seed(seed, e.record.record_id, task, cond)
                    ts, gap = build_toolset(cond, s, e.record, task)
                    sizes.append(len(ts))
                    violations += not lo <= len(ts) <= hi
                    if out:
                        path = out / cond.value / f"{e.record.record_id}_t{task}_s{seed}.json"
                        path.parent.mkdir(parents=True, exist_ok=True)
                        payload = {"tools": json.loads(ts.to_json()), "gap": gap.to_dict() if gap else None}
                        path.write_text(json.dumps(payload, indent=4, ensure_ascii=False) + "\n", encoding="utf-8")
        print(f"{cond.value}: {len(sizes)} sets, sizes {min(sizes)}-{max(sizes)} (bounds {lo}-{hi})")
    if violations:
        print(f"{violations} size-bound violations", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_benchmark(config)
    counts = result.manifest.counts()
    print(f"executed {result.executed}, failed {result.failed}; manifest: {counts}")
    if not args.no_report and counts["done"]:
        csv_path, json_path = emit_report(config.output_dir)
        print(f"wrote {csv_path} and {json_path}")
    return result.exit_code


def cmd_report(args) -> int:
    try:
        csv_path, json_path = emit_report(args.output_dir)
    except EmptyManifest as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_replay(args) -> int:
    report = replay_run(args.output_dir, args.data_dir)
    print(f"replayed {report.checked} transcripts, {len(report.mismatched)} mismatches")
    for cid in report.mismatched:
        print(f"  mismatch: {cid}")
    return EXIT_OK if report.ok else EXIT_PARTIAL


def cmd_critique(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    registry = PromptRegistry(args.prompt_dir)
    lines = Path(args.transcripts).read_text(encoding="utf-8").splitlines()
    sample = [Transcript.from_dict(json.loads(x)["transcript"]) for x in lines if x.strip()][: args.sample]
    backend = config.backends[0].build()
    version = args.version
    try:
        for _ in range(args.rounds):
            version = critique_prompt_round(backend, version, sample, registry)
            print(f"stored prompt version {version} (not activated)")
    except StrategyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radabench", description="Radiology tool-use agent benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-data", help="check patient records and QA files")
    s.add_argument("--data-dir")
    s.set_defaults(func=cmd_validate_data)

    s = sub.add_parser("gen-toolsets", help="generate tool sets and check their sizes")
    s.add_argument("--data-dir")
    s.add_argument("--condition", action="append", choices=[c.value for c in Condition])
    s.add_argument("--seed", type=int, action="append", default=None)
    s.add_argument("--task", type=int, action="append")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_toolsets)

    s = sub.add_parser("run", help="run a benchmark from a YAML config")
    s.add_argument("config")
    s.add_argument("--no-report", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="write metrics.csv and summary.json for a run directory")
    s.add_argument("output_dir")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("replay", help="recompute metric rows from stored transcripts")
    s.add_argument("output_dir")
    s.add_argument("--data-dir")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("critique", help="propose revised prompt versions from failing transcripts")
    s.add_argument("config", help="run config; its first backend writes the critique")
    s.add_argument("transcripts", help="transcripts.jsonl from a previous run")
    s.add_argument("--prompt-dir", required=True)
    s.add_argument("--version", default="v0-base")
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--sample", type=int, default=220)
    s.set_defaults(func=cmd_critique)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seed", "x") is None:
        args.seed = [0]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
