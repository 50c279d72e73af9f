"""Semantic conflict resolution among rule candidates and the two fusion steps.

Candidates are partitioned into semantic clusters (by a fusion-expert call
or by lexical normalization), then conflicts resolve in layers: most votes
first, highest membership among the tied, lowest rule index as the final
deterministic tie-break. Subtask fusion synthesizes one answer from the
winning cluster; final fusion combines all terminal subtask results into
the answer to the original task.
"""

from __future__ import annotations

import string as _string
from dataclasses import dataclass, replace

from .agents import MalformedFusion, NodeSession, ProviderFailure, ResponseViolation
from .graph import TaskNode
from .membership import MembershipLabel
from .rules import CandidateResult

_PUNCT_TABLE = str.maketrans("", "", _string.punctuation)


@dataclass(frozen=True)
class SemanticCluster:
    key: str
    members: tuple[CandidateResult, ...]

    @property
    def votes(self) -> int:
        return len(self.members)

    @property
    def max_membership(self) -> MembershipLabel:
        return max(m.membership for m in self.members)

    @property
    def min_rule_index(self) -> int:
        return min(m.rule_index for m in self.members)


@dataclass(frozen=True)
class SubtaskResult:
    subtask_id: str
    answer_text: str
    winning_cluster: SemanticCluster
    attempts_used: int = 1
    membership_vs_goal: MembershipLabel | None = None


@dataclass(frozen=True)
class FinalResult:
    answer_text: str
    contributing_nodes: tuple[str, ...]


def lexical_key(text: str) -> str:
    """Lower-cased, punctuation-stripped, whitespace-collapsed cluster key."""
    return " ".join(text.translate(_PUNCT_TABLE).casefold().split())


def cluster_candidates(
    candidates: list[CandidateResult],
    mode: str,
    session: NodeSession | None = None,
) -> list[SemanticCluster]:
    """Partition candidates into semantic clusters.

    model mode asks the fusion expert for one cluster key per candidate and
    falls back to lexical keys (with a trace warning) if that call fails;
    lexical mode is provider-free. Every candidate lands in exactly one
    cluster.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    if mode not in ("model", "lexical"):
        raise ValueError(f"unknown cluster mode {mode!r}")

    keys: list[str] | None = None
    if mode == "model":
        if session is None:
            raise ValueError("model mode needs a session")
        try:
            keys = _model_keys(candidates, session)
        except (ProviderFailure, MalformedFusion) as exc:
            session.emit(
                "warning",
                {"reason": "cluster_fallback_lexical", "detail": str(exc)},
            )
    if keys is None:
        keys = [lexical_key(c.answer_text) for c in candidates]

    grouped: dict[str, list[CandidateResult]] = {}
    for candidate, key in zip(candidates, keys):
        grouped.setdefault(key, []).append(replace(candidate, semantic_key=key))
    return [
        SemanticCluster(key=key, members=tuple(sorted(members, key=lambda c: c.rule_index)))
        for key, members in sorted(grouped.items())
    ]


def _model_keys(candidates: list[CandidateResult], session: NodeSession) -> list[str]:
    listing = "\n".join(f"{i}. {c.answer_text}" for i, c in enumerate(candidates, 1))

    def check(doc: dict) -> None:
        assignments = doc.get("assignments")
        if not isinstance(assignments, list) or len(assignments) != len(candidates):
            raise ResponseViolation(f"need exactly {len(candidates)} cluster assignments")

    doc = session.call(
        "cluster",
        {"candidates": listing},
        "fusion",
        failure=MalformedFusion,
        extra_check=check,
    )
    return [key.strip() for key in doc["assignments"]]


def _rank_key(cluster: SemanticCluster) -> tuple:
    # Layer order: votes, then membership, then lowest rule index; cluster
    # key last so resolution is total even for malformed duplicate indices.
    return (-cluster.votes, -cluster.max_membership.value, cluster.min_rule_index, cluster.key)


def resolve_conflict(clusters: list[SemanticCluster]) -> SemanticCluster:
    """Pick the winning cluster: most votes, then highest membership, then lowest rule index."""
    if not clusters:
        raise ValueError("clusters must be non-empty")
    return min(clusters, key=_rank_key)


def resolution_layer(clusters: list[SemanticCluster]) -> str:
    """Which layer separated the winner from the runner-up: votes, membership or index."""
    if len(clusters) < 2:
        return "votes"
    first, second = sorted(clusters, key=_rank_key)[:2]
    if first.votes != second.votes:
        return "votes"
    if first.max_membership != second.max_membership:
        return "membership"
    return "index"


def fuse_subtask(
    candidates: list[CandidateResult],
    subtask: TaskNode,
    *,
    mode: str = "lexical",
    session: NodeSession,
    attempt: int = 1,
) -> SubtaskResult:
    """Cluster candidates, resolve the conflict and synthesize the subtask answer.

    Scripted providers skip the synthesis call and return the winning
    cluster's strongest member verbatim, which keeps conflict-resolution
    tests byte-exact.
    """
    clusters = cluster_candidates(candidates, mode, session)
    winner = resolve_conflict(clusters)
    layer = resolution_layer(clusters)
    best = sorted(winner.members, key=lambda c: (-c.membership.value, c.rule_index))[0]

    if getattr(session.provider, "scripted", False) or len(winner.members) == 1:
        answer = best.answer_text
    else:
        listing = "\n".join(f"- {m.answer_text}" for m in winner.members)
        doc = session.call(
            "fuse_subtask",
            {"statement": subtask.statement, "candidates": listing},
            "fusion",
            failure=MalformedFusion,
            extra_check=_check_answer,
        )
        answer = doc["answer"]

    session.emit(
        "fusion",
        {
            "node": subtask.id,
            "attempt": attempt,
            "clusters": [
                {
                    "key": c.key,
                    "votes": c.votes,
                    "max_membership": c.max_membership.token,
                    "member_indices": [m.rule_index for m in c.members],
                }
                for c in clusters
            ],
            "winner_key": winner.key,
            "layer": layer,
            "answer_text": answer,
        },
    )
    return SubtaskResult(
        subtask_id=subtask.id,
        answer_text=answer,
        winning_cluster=winner,
        attempts_used=attempt,
    )


def fuse_final(preds: list[object], original_task: str, *, session: NodeSession) -> FinalResult:
    """One final-variant fusion call combining all predecessor results."""
    if not preds:
        raise ValueError("final fusion needs at least one predecessor result")
    listing = "\n".join(
        f"- {getattr(item, 'answer_text', item)}" for item in preds
    )
    doc = session.call(
        "fuse_final",
        {"task": original_task, "results": listing},
        "fusion",
        failure=MalformedFusion,
        extra_check=_check_answer,
    )
    contributing = tuple(
        item.subtask_id for item in preds if isinstance(item, SubtaskResult)
    )
    return FinalResult(answer_text=doc["answer"], contributing_nodes=contributing)


def _check_answer(doc: dict) -> None:
    if not isinstance(doc.get("answer"), str) or not doc["answer"]:
        raise ResponseViolation("fusion response must carry a non-empty 'answer'")
