"""Run orchestration: plan, build the graph, execute nodes under the goal-alignment
loop, repair failures by removal or chain splicing, and fuse the final answer.

Every state change emits a trace event. Node processing may run
concurrently up to a configured cap, but each node buffers its events
locally and the single-owner run loop flushes buffers in node-id order, so
the trace is a total order that does not depend on scheduling. Graph edits
apply only between scheduling waves.

Termination is guaranteed by three bounds: at most R reprocessing attempts
per node, repair splices clamped to M_max chain nodes, and a depth cap D
after which a still-failing node is force-removed.
"""

from __future__ import annotations

import json
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO, Mapping

from . import graph as g
from .agents import (
    REASK_LIMIT,
    AttemptLedger,
    MalformedClassification,
    MalformedPlan,
    MalformedResponse,
    NodeSession,
    PlannerPlan,
    ProviderFailure,
    RoleKind,
    DEFAULT_TEMPERATURES,
    plan as plan_task,
)
from .fusion import FinalResult, SubtaskResult, fuse_final, fuse_subtask
from .membership import MembershipLabel, below
from .rules import DEFAULT_DOMAINS, AllRulesFailed, GlobalRule, construct_rules, run_global_rule, run_rules

DETERMINISTIC_RUN_ID = "run-0"


class EngineError(Exception):
    """Base class for run-level failures; carries the partial trace."""

    def __init__(self, message: str, trace=None, provider_calls: int = 0, token_usage=None):
        super().__init__(message)
        self.trace = trace or []
        self.provider_calls = provider_calls
        self.token_usage = token_usage or {"prompt_tokens": 0, "completion_tokens": 0}


class ConfigError(EngineError):
    pass


class PlanningFailure(EngineError):
    pass


class AllPathsFailed(EngineError):
    """Every path from the root to the fusion node was removed."""


class SinkUnavailable(Exception):
    """Trace sink rejected a write."""


@dataclass(frozen=True)
class RunConfig:
    """Tunable limits and provider selection for one run.

    provider must expose complete(request) and a scripted flag; deterministic
    mode refuses non-scripted providers, fixes the run id and drops
    timestamps so traces are byte-stable.
    """

    provider: object
    k_rules: int = 3
    max_reprocess: int = 3
    max_depth: int = 2
    max_chain: int = 3
    threshold: MembershipLabel = MembershipLabel.ML
    cluster_mode: str = "lexical"
    concurrency: int = 1
    deterministic: bool = False
    domains: tuple[str, ...] = DEFAULT_DOMAINS
    temperatures: Mapping[RoleKind, float] = field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))

    def validate(self) -> None:
        if self.k_rules < 1:
            raise ConfigError("k_rules must be at least 1")
        if self.max_reprocess < 1:
            raise ConfigError("max_reprocess must be at least 1")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be non-negative")
        if self.max_chain < 1:
            raise ConfigError("max_chain must be at least 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be at least 1")
        if self.cluster_mode not in ("model", "lexical"):
            raise ConfigError(f"unknown cluster_mode {self.cluster_mode!r}")
        if not self.domains:
            raise ConfigError("domain catalog is empty")
        if self.k_rules > len(self.domains):
            raise ConfigError("k_rules exceeds the domain catalog size")
        if self.deterministic and not getattr(self.provider, "scripted", False):
            raise ConfigError("deterministic mode requires a scripted provider")


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: str
    payload: dict
    timestamp: float | None = None


# Required payload fields per event kind; emission validates against this.
TRACE_KINDS: dict[str, tuple[str, ...]] = {
    "plan": ("task", "goal", "subtasks", "edges", "graph"),
    "node_start": ("node", "statement", "depth"),
    "rules_built": ("node", "attempt", "rules"),
    "rule_result": ("node", "attempt", "rule_index", "domain", "membership", "answer_text"),
    "fusion": ("node", "attempt", "clusters", "winner_key", "layer", "answer_text"),
    "assessment": ("node", "attempt", "membership", "diff_text"),
    "reprocess": ("node", "attempt", "feedback"),
    "node_removed": ("node", "reason"),
    "node_spliced": ("node", "chain", "depth"),
    "node_done": ("node", "attempts_used", "membership", "answer_text"),
    "final": ("answer_text", "contributing_nodes", "graph"),
    "provider_call": ("context", "schema", "status", "usage"),
    "warning": ("reason",),
}


@dataclass
class RunOutcome:
    final: FinalResult
    graph_final: g.TaskGraph
    trace: list[TraceEvent]
    provider_calls: int
    token_usage: dict[str, int]


class _Tracer:
    """Single-owner trace assembly: assigns seq numbers and totals usage."""

    def __init__(self, deterministic: bool):
        self.deterministic = deterministic
        self.events: list[TraceEvent] = []
        self.provider_calls = 0
        self.token_usage = {"prompt_tokens": 0, "completion_tokens": 0}
        self._seq = 0

    def flush(self, buffered: list[tuple[str, dict]]) -> None:
        for kind, payload in buffered:
            missing = [f for f in TRACE_KINDS[kind] if f not in payload]
            if missing:
                raise ValueError(f"trace event {kind!r} missing fields {missing}")
            self._seq += 1
            self.events.append(
                TraceEvent(
                    seq=self._seq,
                    kind=kind,
                    payload=payload,
                    timestamp=None if self.deterministic else time.time(),
                )
            )
            if kind == "provider_call":
                self.provider_calls += 1
                for key in self.token_usage:
                    self.token_usage[key] += int(payload["usage"].get(key, 0))
        buffered.clear()


def call_budget(config: RunConfig, n_subtasks: int) -> int:
    """Closed-form ceiling on provider calls for a run with n planned subtasks.

    Each failing node at depth d < D spawns at most max_chain children, so
    node count is bounded by the geometric sum over depths; each node makes
    at most R * (K + 3) logical calls (construct, K rules, fuse, assess)
    plus one classification, and each non-depth-capped node one replan.
    Every logical call costs at most 1 + REASK_LIMIT provider calls.
    """
    m, d, r, k = config.max_chain, config.max_depth, config.max_reprocess, config.k_rules
    nodes_total = n_subtasks * sum(m**level for level in range(d + 1))
    nodes_splicable = n_subtasks * sum(m**level for level in range(d))
    logical = (
        1  # plan
        + nodes_total * r * (k + 3)
        + nodes_total  # failure classifications
        + nodes_splicable  # replans
        + 1  # final fusion
    )
    return logical * (1 + REASK_LIMIT)


def process_node(
    node: g.TaskNode,
    graph: g.TaskGraph,
    results: Mapping[str, SubtaskResult],
    config: RunConfig,
    session: NodeSession,
) -> SubtaskResult | None:
    """Run the reprocessing loop for one subtask node.

    Up to R attempts of construct rules (with deviation feedback after the
    first), execute them, fuse, and gate against the global goal. Returns
    the accepted result, or None when the node still fails after R attempts
    and needs repair. Provider failures mark the attempt failed instead of
    aborting the run.
    """
    session.emit(
        "node_start",
        {"node": node.id, "statement": node.statement, "depth": node.depth},
    )
    preds = g.predecessor_results(graph, node.id, results)
    global_rule = GlobalRule(goal=graph.global_goal, threshold=config.threshold)
    feedback: str | None = None

    for attempt in range(1, config.max_reprocess + 1):
        try:
            ruleset = construct_rules(
                node,
                config.domains,
                config.k_rules,
                feedback,
                global_rule=global_rule,
                session=session,
            )
            session.emit(
                "rules_built",
                {
                    "node": node.id,
                    "attempt": attempt,
                    "rules": [
                        {
                            "rule_index": rule.index,
                            "domain": rule.domain_name,
                            "membership": rule.membership.token,
                            "antecedent": rule.antecedent,
                        }
                        for rule in ruleset.rules
                    ],
                },
            )
            candidates = run_rules(ruleset, node.statement, preds, session=session)
            for candidate in candidates:
                session.emit(
                    "rule_result",
                    {
                        "node": node.id,
                        "attempt": attempt,
                        "rule_index": candidate.rule_index,
                        "domain": candidate.domain_name,
                        "membership": candidate.membership.token,
                        "answer_text": candidate.answer_text,
                    },
                )
            fused = fuse_subtask(
                candidates, node, mode=config.cluster_mode, session=session, attempt=attempt
            )
            assessment = run_global_rule(global_rule, fused, session=session)
            session.emit(
                "assessment",
                {
                    "node": node.id,
                    "attempt": attempt,
                    "membership": assessment.membership.token,
                    "diff_text": assessment.diff_text,
                },
            )
        except (ProviderFailure, MalformedResponse, AllRulesFailed) as exc:
            session.emit(
                "warning",
                {"node": node.id, "reason": "attempt_failed", "detail": str(exc)},
            )
            continue

        if not below(assessment.membership, config.threshold):
            result = replace(
                fused, attempts_used=attempt, membership_vs_goal=assessment.membership
            )
            session.emit(
                "node_done",
                {
                    "node": node.id,
                    "attempts_used": attempt,
                    "membership": assessment.membership.token,
                    "answer_text": result.answer_text,
                },
            )
            return result

        feedback = assessment.diff_text
        if attempt < config.max_reprocess:
            session.emit(
                "reprocess", {"node": node.id, "attempt": attempt, "feedback": feedback}
            )
    return None


def handle_failure(
    node: g.TaskNode,
    graph: g.TaskGraph,
    config: RunConfig,
    session: NodeSession,
    used_ids: set[str],
) -> g.TaskGraph:
    """Repair the graph around a node that exhausted its reprocessing budget.

    A planner classification picks the scenario: an irrelevant node is
    removed (bridging predecessors to successors); a too-complex node below
    the depth cap is replanned and spliced into a chain of simpler subtasks.
    At the depth cap, and whenever classification or replanning itself
    fails, removal is forced with a warning so the run always terminates.
    """
    reason = "irrelevant"
    try:
        doc = session.call(
            "classify",
            {
                "statement": node.statement,
                "goal": graph.global_goal,
                "attempts": config.max_reprocess,
            },
            "failure_classification",
            failure=MalformedClassification,
        )
        scenario = doc["scenario"]
    except (ProviderFailure, MalformedClassification) as exc:
        session.emit(
            "warning",
            {"node": node.id, "reason": "classification_failed", "detail": str(exc)},
        )
        scenario, reason = "irrelevant", "classification_failed"

    if scenario == "too_complex":
        if node.depth >= config.max_depth:
            session.emit(
                "warning",
                {"node": node.id, "reason": "depth_cap_forced_removal", "depth": node.depth},
            )
            reason = "forced_depth_cap"
        else:
            try:
                subplan = plan_task(node.statement, session)
            except (ProviderFailure, MalformedPlan) as exc:
                session.emit(
                    "warning",
                    {"node": node.id, "reason": "replan_failed", "detail": str(exc)},
                )
                reason = "replan_failed"
            else:
                return _splice_subplan(node, graph, subplan, config, session, used_ids)

    graph = g.remove_node(graph, node.id)
    session.emit("node_removed", {"node": node.id, "reason": reason})
    return graph


def _splice_subplan(
    node: g.TaskNode,
    graph: g.TaskGraph,
    subplan: PlannerPlan,
    config: RunConfig,
    session: NodeSession,
    used_ids: set[str],
) -> g.TaskGraph:
    entries = list(subplan.subtasks)
    if len(entries) > config.max_chain:
        session.emit(
            "warning",
            {
                "node": node.id,
                "reason": "chain_clamped",
                "detail": f"replan produced {len(entries)} subtasks, keeping {config.max_chain}",
            },
        )
        entries = entries[: config.max_chain]

    ids = [sid for sid, _ in entries]
    if any(sid in used_ids for sid in ids):
        ids = [f"{node.id}.{sid}" for sid in ids]
    if any(sid in used_ids for sid in ids):
        ids = [f"{node.id}.{i}" for i in range(1, len(entries) + 1)]

    chain = [
        g.TaskNode(new_id, g.NodeKind.SUBTASK, statement)
        for new_id, (_, statement) in zip(ids, entries)
    ]
    graph = g.splice_chain(graph, node.id, chain)
    used_ids.update(ids)
    session.emit(
        "node_spliced", {"node": node.id, "chain": ids, "depth": node.depth + 1}
    )
    return graph


def execute_task(task: str, config: RunConfig, run_id: str | None = None) -> RunOutcome:
    """Run one task end to end and return the fused answer with its full trace."""
    config.validate()
    if not task or not task.strip():
        raise ConfigError("task must be non-empty")
    if run_id is None:
        run_id = DETERMINISTIC_RUN_ID if config.deterministic else uuid.uuid4().hex[:12]

    tracer = _Tracer(deterministic=config.deterministic)
    ledger = AttemptLedger()

    def new_session(node_id: str) -> NodeSession:
        return NodeSession(
            run_id=run_id,
            node_id=node_id,
            provider=config.provider,
            ledger=ledger,
            temperatures=config.temperatures,
        )

    root_session = new_session(g.ROOT_ID)
    try:
        the_plan = plan_task(task, root_session)
        graph = g.build_graph(the_plan)
    except (ProviderFailure, MalformedPlan, g.GraphError) as exc:
        root_session.emit("warning", {"reason": "planning_failed", "detail": str(exc)})
        tracer.flush(root_session.events)
        raise PlanningFailure(
            str(exc), tracer.events, tracer.provider_calls, tracer.token_usage
        ) from exc
    root_session.emit(
        "plan",
        {
            "task": task,
            "goal": the_plan.global_goal,
            "subtasks": [{"id": sid, "statement": st} for sid, st in the_plan.subtasks],
            "edges": [list(e) for e in the_plan.edges],
            "graph": graph.to_payload(),
        },
    )
    tracer.flush(root_session.events)

    budget = call_budget(config, len(the_plan.subtasks))
    used_ids = set(graph.nodes)
    completed: set[str] = {g.ROOT_ID}
    results: dict[str, SubtaskResult] = {}

    while True:
        if not graph.predecessors(g.FUSION_ID):
            raise AllPathsFailed(
                "every root-to-fusion path failed and was removed",
                tracer.events,
                tracer.provider_calls,
                tracer.token_usage,
            )
        ready = sorted(g.ready_nodes(graph, completed))
        if ready == [g.FUSION_ID]:
            break
        wave = [nid for nid in ready if nid != g.FUSION_ID]
        sessions = {nid: new_session(nid) for nid in wave}

        if config.concurrency > 1 and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
                futures = {
                    nid: pool.submit(
                        process_node, graph.node(nid), graph, results, config, sessions[nid]
                    )
                    for nid in wave
                }
                outcomes = {nid: future.result() for nid, future in futures.items()}
        else:
            outcomes = {
                nid: process_node(graph.node(nid), graph, results, config, sessions[nid])
                for nid in wave
            }

        repairs = []
        for nid in wave:
            tracer.flush(sessions[nid].events)
            if outcomes[nid] is not None:
                results[nid] = outcomes[nid]
                completed.add(nid)
            else:
                repairs.append(nid)
        # Graph edits only between waves, so no node ran against a stale graph.
        for nid in repairs:
            repair_session = new_session(nid)
            graph = handle_failure(graph.node(nid), graph, config, repair_session, used_ids)
            tracer.flush(repair_session.events)

    preds = g.predecessor_results(graph, g.FUSION_ID, results)
    fusion_session = new_session(g.FUSION_ID)
    final = fuse_final(preds, task, session=fusion_session)
    fusion_session.emit(
        "final",
        {
            "answer_text": final.answer_text,
            "contributing_nodes": list(final.contributing_nodes),
            "graph": graph.to_payload(),
        },
    )
    tracer.flush(fusion_session.events)

    if tracer.provider_calls > budget:
        raise EngineError(
            f"provider calls {tracer.provider_calls} exceeded the termination budget {budget}"
        )
    return RunOutcome(
        final=final,
        graph_final=graph,
        trace=tracer.events,
        provider_calls=tracer.provider_calls,
        token_usage=tracer.token_usage,
    )


def write_trace_events(events: list[TraceEvent], sink: IO[str]) -> None:
    """One canonical JSON record per line; timestamps omitted when absent."""
    try:
        for event in events:
            record: dict = {"seq": event.seq, "kind": event.kind}
            if event.timestamp is not None:
                record["timestamp"] = event.timestamp
            record["payload"] = event.payload
            sink.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise SinkUnavailable(str(exc)) from exc


def write_trace(outcome: RunOutcome, sink: IO[str]) -> None:
    """Serialize a run's trace, one structured record per line, byte-stable."""
    write_trace_events(outcome.trace, sink)
