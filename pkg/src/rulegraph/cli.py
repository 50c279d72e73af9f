"""Command-line front end: run one task, run a benchmark, re-render graphs, check config.

stdout carries only the requested artifact (the final answer, the score
table, or DOT text); everything else goes to stderr. Engine failures map
to distinct exit codes, documented in the README.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from types import SimpleNamespace

from .agents import (
    DEFAULT_TEMPERATURES,
    LiveProvider,
    MalformedResponse,
    MockProvider,
    ProviderFailure,
    RoleKind,
)
from .bench import DatasetError, load_dataset, render_table, report_to_json, run_benchmark
from .engine import (
    AllPathsFailed,
    ConfigError,
    EngineError,
    PlanningFailure,
    RunConfig,
    execute_task,
    write_trace,
    write_trace_events,
)
from .graph import TaskGraph, export_dot
from .membership import parse_label
from .rules import DEFAULT_DOMAINS

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_PLANNING = 4
EXIT_ALL_PATHS = 5
EXIT_PROVIDER = 6

DEFAULT_API_KEY_ENV = "RULEGRAPH_API_KEY"


def load_config(path: str) -> RunConfig:
    """Build a RunConfig from a JSON file.

    Relative paths inside the file resolve against the file's directory.
    Secrets come from the environment only: the live provider reads its key
    from the env var named by api_key_env. RULEGRAPH_BASE_URL and
    RULEGRAPH_MODEL override the file's live-provider settings.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    base_dir = os.path.dirname(os.path.abspath(path))

    provider_spec = raw.get("provider")
    if not isinstance(provider_spec, dict) or "type" not in provider_spec:
        raise ConfigError("config needs a provider object with a 'type'")
    provider = _build_provider(provider_spec, base_dir)

    domains = raw.get("domains")
    if domains is None and "catalog_path" in raw:
        catalog_file = os.path.join(base_dir, raw["catalog_path"])
        try:
            with open(catalog_file, encoding="utf-8") as handle:
                domains = [line.strip() for line in handle if line.strip()]
        except OSError as exc:
            raise ConfigError(f"cannot read domain catalog: {exc}") from exc
    if domains is not None and (
        not isinstance(domains, list) or not all(isinstance(d, str) and d for d in domains)
    ):
        raise ConfigError("domains must be a list of non-empty strings")

    temperatures = dict(DEFAULT_TEMPERATURES)
    for name, value in (raw.get("temperatures") or {}).items():
        try:
            temperatures[RoleKind(name)] = float(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad temperature for role {name!r}: {exc}") from exc

    try:
        threshold = parse_label(raw.get("threshold", "ML"))
    except Exception as exc:
        raise ConfigError(f"bad threshold: {exc}") from exc

    config = RunConfig(
        provider=provider,
        k_rules=int(raw.get("k_rules", 3)),
        max_reprocess=int(raw.get("max_reprocess", 3)),
        max_depth=int(raw.get("max_depth", 2)),
        max_chain=int(raw.get("max_chain", 3)),
        threshold=threshold,
        cluster_mode=raw.get("cluster_mode", "lexical"),
        concurrency=int(raw.get("concurrency", 1)),
        deterministic=bool(raw.get("deterministic", False)),
        domains=tuple(domains) if domains else DEFAULT_DOMAINS,
        temperatures=temperatures,
    )
    config.validate()
    return config


def _build_provider(spec: dict, base_dir: str):
    kind = spec["type"]
    if kind == "mock":
        script_path = spec.get("script")
        if not script_path:
            raise ConfigError("mock provider needs a 'script' path")
        resolved = script_path if os.path.isabs(script_path) else os.path.join(base_dir, script_path)
        try:
            return MockProvider.from_file(resolved)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load mock script {resolved}: {exc}") from exc
    if kind == "live":
        base_url = os.environ.get("RULEGRAPH_BASE_URL") or spec.get("base_url")
        model = os.environ.get("RULEGRAPH_MODEL") or spec.get("model")
        if not base_url or not model:
            raise ConfigError("live provider needs base_url and model (config or env)")
        key_env = spec.get("api_key_env", DEFAULT_API_KEY_ENV)
        api_key = os.environ.get(key_env, "")
        if not api_key:
            raise ConfigError(f"live provider key env var {key_env} is not set")
        return LiveProvider(
            base_url=base_url,
            model=model,
            api_key=api_key,
            timeout_s=float(spec.get("timeout_s", 60.0)),
            transport_retries=int(spec.get("transport_retries", 3)),
            backoff_s=float(spec.get("backoff_s", 1.0)),
        )
    raise ConfigError(f"unknown provider type {kind!r}")


def _read_task(value: str) -> str:
    if os.path.isfile(value):
        with open(value, encoding="utf-8") as handle:
            return handle.read().strip()
    return value


def _engine_exit(exc: EngineError) -> int:
    if isinstance(exc, PlanningFailure):
        return EXIT_PLANNING
    if isinstance(exc, AllPathsFailed):
        return EXIT_ALL_PATHS
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_FAILURE


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.deterministic:
            config = replace(config, deterministic=True)
            config.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    task = _read_task(args.task)
    try:
        outcome = execute_task(task, config)
    except EngineError as exc:
        _write_partial_trace(exc, args.trace)
        print(f"run failed: {exc}", file=sys.stderr)
        return _engine_exit(exc)
    except (ProviderFailure, MalformedResponse) as exc:
        print(f"provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    with open(args.trace, "w", encoding="utf-8") as handle:
        write_trace(outcome, handle)
    print(outcome.final.answer_text)
    print(
        f"trace written to {args.trace} ({outcome.provider_calls} provider calls)",
        file=sys.stderr,
    )
    return EXIT_OK


def _write_partial_trace(exc: EngineError, path: str) -> None:
    if exc.trace:
        with open(path, "w", encoding="utf-8") as handle:
            write_trace_events(exc.trace, handle)


def _cmd_bench(args) -> int:
    try:
        config = load_config(args.config)
        if args.deterministic:
            config = replace(config, deterministic=True)
            config.validate()
        dataset = load_dataset(args.dataset)
    except (ConfigError, DatasetError, OSError) as exc:
        print(f"bench setup error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_benchmark(
            dataset, config, dataset_name=os.path.basename(args.dataset)
        )
    except DatasetError as exc:
        print(f"bench error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with open(args.report, "w", encoding="utf-8") as handle:
        handle.write(report_to_json(report))
    sys.stdout.write(render_table(report))
    print(f"report written to {args.report}", file=sys.stderr)
    return EXIT_OK


def _cmd_export_dot(args) -> int:
    try:
        with open(args.trace, encoding="utf-8") as handle:
            events = [json.loads(line) for line in handle if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    graph_payload = None
    goal = ""
    memberships: dict[str, str] = {}
    for event in events:
        if event["kind"] in ("plan", "final"):
            graph_payload = event["payload"]["graph"]
        if event["kind"] == "plan":
            goal = event["payload"]["goal"]
        if event["kind"] == "node_done":
            memberships[event["payload"]["node"]] = event["payload"]["membership"]
    if graph_payload is None:
        print("trace contains no graph snapshot", file=sys.stderr)
        return EXIT_CONFIG
    graph = TaskGraph.from_payload(graph_payload, global_goal=goal or "-")
    results = {
        node: SimpleNamespace(membership_vs_goal=parse_label(token))
        for node, token in memberships.items()
        if node in graph.nodes
    }
    dot = export_dot(graph, results)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(dot)
        print(f"dot written to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def _cmd_validate_config(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    provider_kind = "mock" if getattr(config.provider, "scripted", False) else "live"
    print(
        "config ok: "
        f"provider={provider_kind} k_rules={config.k_rules} "
        f"max_reprocess={config.max_reprocess} max_depth={config.max_depth} "
        f"max_chain={config.max_chain} threshold={config.threshold.token} "
        f"cluster_mode={config.cluster_mode} domains={len(config.domains)}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulegraph",
        description="Rule-driven task-graph orchestration over LLM agent roles.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute one task")
    p_run.add_argument("--task", required=True, help="task text, or a path to a text file")
    p_run.add_argument("--config", required=True, help="JSON config file")
    p_run.add_argument("--trace", default="trace.jsonl", help="trace output path")
    p_run.add_argument("--deterministic", action="store_true", help="byte-stable trace, scripted provider only")
    p_run.set_defaults(func=_cmd_run)

    p_bench = sub.add_parser("bench", help="run a benchmark dataset")
    p_bench.add_argument("--dataset", required=True, help="line-delimited dataset file")
    p_bench.add_argument("--config", required=True, help="JSON config file")
    p_bench.add_argument("--report", default="report.json", help="report output path")
    p_bench.add_argument("--deterministic", action="store_true")
    p_bench.set_defaults(func=_cmd_bench)

    p_dot = sub.add_parser("export-dot", help="re-render the run graph from a trace")
    p_dot.add_argument("--trace", required=True, help="trace file from a previous run")
    p_dot.add_argument("--out", help="output path (default: stdout)")
    p_dot.set_defaults(func=_cmd_export_dot)

    p_val = sub.add_parser("validate-config", help="check a config file and its catalog")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(func=_cmd_validate_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
