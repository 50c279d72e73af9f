"""Shared test helpers: plan/graph generators and mock-script response builders."""

from __future__ import annotations

import json
import random

from rulegraph.agents import PlannerPlan
from rulegraph.graph import TaskGraph, build_graph, validate


def json_doc(payload: dict) -> str:
    """Wrap a payload the way a model would: prose around a fenced JSON block."""
    return "Here is the result.\n```json\n" + json.dumps(payload) + "\n```\n"


def plan_response(goal: str, subtasks: list[tuple[str, str]], edges: list[tuple[str, str]] = ()) -> str:
    return json_doc(
        {
            "goal": goal,
            "subtasks": [{"id": sid, "statement": st} for sid, st in subtasks],
            "edges": [list(e) for e in edges],
        }
    )


def ruleset_response(rules: list[tuple[str, str]]) -> str:
    """rules: list of (domain, membership token)."""
    return json_doc(
        {
            "rules": [
                {
                    "domain": domain,
                    "antecedent": f"the subtask concerns {domain}",
                    "membership": token,
                    "expert_prompt": f"You are an expert in {domain}. Answer precisely.",
                }
                for domain, token in rules
            ]
        }
    )


def candidate_response(answer: str) -> str:
    return json_doc({"answer": answer})


def assessment_response(membership: str, diff_text: str = "") -> str:
    doc = {"membership": membership}
    if diff_text:
        doc["diff_text"] = diff_text
    return json_doc(doc)


def classification_response(scenario: str, reason: str = "decided by review") -> str:
    return json_doc({"scenario": scenario, "reason": reason})


def fusion_answer(answer: str) -> str:
    return json_doc({"answer": answer})


def assignments_response(keys: list[str]) -> str:
    return json_doc({"assignments": keys})


def make_plan(
    subtasks: list[tuple[str, str]] | list[str],
    edges: list[tuple[str, str]] = (),
    goal: str = "answer the task",
    task: str = "the original task",
) -> PlannerPlan:
    normalized = [
        (entry, f"statement for {entry}") if isinstance(entry, str) else entry
        for entry in subtasks
    ]
    return PlannerPlan(
        task=task, global_goal=goal, subtasks=tuple(normalized), edges=tuple(edges)
    )


def random_plan(rng: random.Random, max_subtasks: int = 10) -> PlannerPlan:
    n = rng.randint(1, max_subtasks)
    ids = [f"n{i:02d}" for i in range(1, n + 1)]
    edges = [
        (ids[i], ids[j])
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < 0.25
    ]
    return make_plan([(sid, f"do {sid}") for sid in ids], edges)


def random_graph(rng: random.Random, max_subtasks: int = 10) -> TaskGraph:
    graph = build_graph(random_plan(rng, max_subtasks))
    validate(graph)
    return graph
