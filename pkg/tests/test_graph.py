import random

import pytest

from helpers import make_plan, random_graph, random_plan
from rulegraph.graph import (
    FUSION_ID,
    ROOT_ID,
    CyclicPlan,
    DanglingEdge,
    DuplicateNodeId,
    EmptyChain,
    EmptyPlan,
    MissingPredecessor,
    NodeKind,
    NotASubtask,
    TaskNode,
    build_graph,
    export_dot,
    predecessor_results,
    ready_nodes,
    remove_node,
    splice_chain,
    validate,
)

STAR = ["T1", "T2", "T3", "T4"]


def star_graph():
    return build_graph(make_plan(STAR, goal="discussion of an actress's craft"))


class TestBuildGraph:
    def test_star_plan_wires_root_and_fusion(self):
        graph = star_graph()
        assert graph.edges == frozenset(
            {(ROOT_ID, s) for s in STAR} | {(s, FUSION_ID) for s in STAR}
        )
        assert graph.node(ROOT_ID).kind is NodeKind.ORIGINAL
        assert graph.node(FUSION_ID).kind is NodeKind.FUSION

    def test_minimal_single_subtask(self):
        graph = build_graph(make_plan(["T1"]))
        assert graph.edges == frozenset({(ROOT_ID, "T1"), ("T1", FUSION_ID)})

    def test_single_chain_skips_redundant_attachment(self):
        graph = build_graph(make_plan(["T1", "T2"], edges=[("T1", "T2")]))
        assert graph.edges == frozenset(
            {(ROOT_ID, "T1"), ("T1", "T2"), ("T2", FUSION_ID)}
        )

    def test_empty_plan_rejected(self):
        with pytest.raises(EmptyPlan):
            build_graph(make_plan([]))

    def test_dangling_edge_rejected(self):
        with pytest.raises(DanglingEdge):
            build_graph(make_plan(["T1"], edges=[("T1", "T9")]))

    def test_cyclic_plan_rejected(self):
        with pytest.raises(CyclicPlan):
            build_graph(make_plan(["T1", "T2"], edges=[("T1", "T2"), ("T2", "T1")]))

    def test_reserved_ids_rejected(self):
        with pytest.raises(DuplicateNodeId):
            build_graph(make_plan(["T", "T1"]))

    def test_random_plans_satisfy_invariants(self):
        rng = random.Random(11)
        for _ in range(200):
            validate(build_graph(random_plan(rng)))


class TestReadyNodes:
    def test_chain_start(self):
        graph = build_graph(make_plan(["T1", "T2"], edges=[("T1", "T2")]))
        assert ready_nodes(graph, {ROOT_ID}) == {"T1"}

    def test_star_all_subtasks_ready(self):
        graph = star_graph()
        ready = ready_nodes(graph, {ROOT_ID})
        # independent oracle: brute-force predecessor check
        expected = {
            nid
            for nid in graph.nodes
            if nid not in (ROOT_ID,)
            and graph.predecessors(nid) <= {ROOT_ID}
        }
        assert ready == expected == set(STAR)

    def test_nothing_left_when_all_completed(self):
        graph = star_graph()
        assert ready_nodes(graph, set(graph.nodes)) == set()

    def test_fusion_ready_only_after_all_terminals(self):
        graph = star_graph()
        assert FUSION_ID not in ready_nodes(graph, {ROOT_ID, "T1", "T2"})
        assert ready_nodes(graph, {ROOT_ID, *STAR}) == {FUSION_ID}

    def test_any_ready_order_is_a_valid_linearization(self):
        rng = random.Random(5)
        for _ in range(50):
            graph = random_graph(rng)
            completed = {ROOT_ID}
            order = [ROOT_ID]
            while True:
                ready = ready_nodes(graph, completed)
                if not ready:
                    break
                pick = rng.choice(sorted(ready))
                order.append(pick)
                completed.add(pick)
            assert len(order) == len(set(order)) == len(graph.nodes)
            position = {nid: i for i, nid in enumerate(order)}
            for a, b in graph.edges:
                assert position[a] < position[b]


class TestPredecessorResults:
    def test_single_predecessor(self):
        graph = build_graph(make_plan(["T1", "T2"], edges=[("T1", "T2")]))
        assert predecessor_results(graph, "T2", {"T1": "r1"}) == ["r1"]

    def test_fusion_collects_all_in_id_order(self):
        graph = star_graph()
        results = {"T4": "r4", "T2": "r2", "T1": "r1", "T3": "r3"}
        assert predecessor_results(graph, FUSION_ID, results) == ["r1", "r2", "r3", "r4"]

    def test_root_contributes_task_statement(self):
        graph = build_graph(make_plan(["T1"], task="the original task"))
        assert predecessor_results(graph, "T1", {}) == ["the original task"]

    def test_missing_predecessor(self):
        graph = star_graph()
        with pytest.raises(MissingPredecessor):
            predecessor_results(graph, FUSION_ID, {"T1": "r1"})


class TestRemoveNode:
    def test_star_removal_adds_no_root_fusion_bridge(self):
        graph = remove_node(star_graph(), "T2")
        remaining = {"T1", "T3", "T4"}
        assert set(graph.subtask_ids()) == remaining
        assert graph.edges == frozenset(
            {(ROOT_ID, s) for s in remaining} | {(s, FUSION_ID) for s in remaining}
        )

    def test_chain_removal_bridges_neighbours(self):
        graph = build_graph(make_plan(["T1", "T2"], edges=[("T1", "T2")]))
        graph = remove_node(graph, "T1")
        assert graph.edges == frozenset({(ROOT_ID, "T2"), ("T2", FUSION_ID)})

    def test_diamond_removal(self):
        plan = make_plan(["a", "b", "c"], edges=[("a", "c"), ("b", "c")])
        graph = remove_node(build_graph(plan), "a")
        assert graph.edges == frozenset(
            {(ROOT_ID, "b"), (ROOT_ID, "c"), ("b", "c"), ("c", FUSION_ID)}
        )

    def test_only_subtasks_removable(self):
        with pytest.raises(NotASubtask):
            remove_node(star_graph(), ROOT_ID)
        with pytest.raises(NotASubtask):
            remove_node(star_graph(), FUSION_ID)

    def test_random_removals_preserve_invariants(self):
        rng = random.Random(23)
        for _ in range(200):
            graph = random_graph(rng)
            target = rng.choice(graph.subtask_ids())
            validate(remove_node(graph, target))


class TestSpliceChain:
    def chain_nodes(self, ids):
        return [TaskNode(i, NodeKind.SUBTASK, f"do {i}") for i in ids]

    def test_star_splice_wires_linear_chain(self):
        graph = splice_chain(star_graph(), "T3", self.chain_nodes(["T3a", "T3b", "T3c"]))
        assert "T3" not in graph.nodes
        for edge in [(ROOT_ID, "T3a"), ("T3a", "T3b"), ("T3b", "T3c"), ("T3c", FUSION_ID)]:
            assert edge in graph.edges
        assert all(graph.node(n).depth == 1 for n in ("T3a", "T3b", "T3c"))

    def test_single_node_chain_is_replacement(self):
        graph = splice_chain(star_graph(), "T1", self.chain_nodes(["T1x"]))
        assert (ROOT_ID, "T1x") in graph.edges and ("T1x", FUSION_ID) in graph.edges
        assert graph.node("T1x").depth == 1

    def test_diamond_splice_remains_valid(self):
        plan = make_plan(["a", "b", "c"], edges=[("a", "c"), ("b", "c")])
        graph = splice_chain(build_graph(plan), "c", self.chain_nodes(["c1", "c2"]))
        validate(graph)
        assert graph.predecessors("c1") == {"a", "b"}
        assert graph.successors("c2") == {FUSION_ID}

    def test_neighbourhood_preserved(self):
        rng = random.Random(31)
        for _ in range(100):
            graph = random_graph(rng)
            target = rng.choice(graph.subtask_ids())
            preds, succs = graph.predecessors(target), graph.successors(target)
            ids = [f"x{i}" for i in range(1, rng.randint(2, 5))]
            out = splice_chain(graph, target, self.chain_nodes(ids))
            validate(out)
            assert out.predecessors(ids[0]) == preds
            assert out.successors(ids[-1]) == succs
            depth = graph.node(target).depth + 1
            assert all(out.node(i).depth == depth for i in ids)

    def test_empty_chain_rejected(self):
        with pytest.raises(EmptyChain):
            splice_chain(star_graph(), "T1", [])

    def test_stale_ids_rejected(self):
        with pytest.raises(DuplicateNodeId):
            splice_chain(star_graph(), "T1", self.chain_nodes(["T2"]))
        with pytest.raises(NotASubtask):
            splice_chain(star_graph(), FUSION_ID, self.chain_nodes(["x"]))


class TestExportDot:
    def test_edge_line_count_matches_edge_set(self):
        graph = star_graph()
        dot = export_dot(graph)
        edge_lines = [line for line in dot.splitlines() if "->" in line]
        assert len(edge_lines) == len(graph.edges) == 8

    def test_deterministic_output(self):
        graph = star_graph()
        assert export_dot(graph) == export_dot(graph)

    def test_membership_included_when_results_present(self):
        from types import SimpleNamespace

        from rulegraph.membership import MembershipLabel

        graph = build_graph(make_plan(["T1"]))
        result = SimpleNamespace(membership_vs_goal=MembershipLabel.SH)
        dot = export_dot(graph, {"T1": result})
        assert "T1\\nsubtask\\nSH" in dot
