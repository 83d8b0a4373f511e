from __future__ import annotations

import random

import pytest

from explor.curiosity import Transition, VisitCounts
from explor.dfa import Dfa, to_dot
from explor.env import TargetUnreachable

from oracles import bfs_distances


def chain(*hops: tuple[str, str, str]) -> Dfa:
    dfa = Dfa(initial=hops[0][0])
    for prev, action, nxt in hops:
        dfa.add_transition(prev, action, nxt)
    return dfa


# -- construction ---------------------------------------------------------------


def test_add_single_transition() -> None:
    dfa = Dfa(initial="s0")
    dfa.add_transition("s0", "a", "s1")
    assert len(dfa.delta) == 1
    assert dfa.states == {"s0", "s1"}
    assert dfa.actions == {"a"}


def test_readd_is_idempotent() -> None:
    dfa = Dfa(initial="s0")
    dfa.add_transition("s0", "a", "s1")
    dfa.add_transition("s0", "a", "s1")
    assert len(dfa.delta) == 1
    assert dfa.conflict_count == 0


def test_conflicting_successor_overwrites_and_counts() -> None:
    dfa = Dfa(initial="s0")
    dfa.add_transition("s0", "a", "s1")
    dfa.add_transition("s0", "a", "s2")
    assert dfa.delta[("s0", "a")] == "s2"
    assert dfa.conflict_count == 1


def test_determinism_invariant_after_arbitrary_adds() -> None:
    rng = random.Random(1)
    dfa = Dfa(initial="s0")
    for _ in range(500):
        dfa.add_transition(
            f"s{rng.randrange(8)}", f"a{rng.randrange(4)}", f"s{rng.randrange(8)}"
        )
    # delta is a dict keyed by (state, action): determinism holds trivially,
    # but every endpoint must be tracked in the state set.
    for (prev, action), nxt in dfa.delta.items():
        assert prev in dfa.states and nxt in dfa.states and action in dfa.actions


# -- terminal states -------------------------------------------------------------


def test_terminal_states_empty_dfa() -> None:
    assert Dfa(initial="s0").terminal_states() == {"s0"}


def test_terminal_states_chain() -> None:
    dfa = chain(("s0", "a", "s1"), ("s1", "b", "s2"))
    assert dfa.terminal_states() == {"s2"}


def test_terminal_states_match_brute_force_scan() -> None:
    rng = random.Random(7)
    dfa = Dfa(initial="s0")
    for _ in range(120):
        dfa.add_transition(
            f"s{rng.randrange(10)}", f"a{rng.randrange(5)}", f"s{rng.randrange(10)}"
        )
    brute = {
        state
        for state in dfa.states
        if not any(prev == state for (prev, _a) in dfa.delta)
    }
    assert dfa.terminal_states() == brute
    assert dfa.terminal_states() & {prev for (prev, _a) in dfa.delta} == set()


# -- trace selection --------------------------------------------------------------


def test_trace_for_target_at_initial_state() -> None:
    dfa = chain(("s0", "a", "s1"))
    counts = VisitCounts()
    assert dfa.select_trace(counts) == ["a"]


def test_trace_takes_shortest_prefix() -> None:
    # Two routes to s2; the direct one wins. Target hangs off s2.
    dfa = Dfa(initial="s0")
    dfa.add_transition("s0", "a1", "s1")
    dfa.add_transition("s1", "a2", "s2")
    dfa.add_transition("s0", "a3", "s2")
    dfa.add_transition("s2", "a4", "s3")
    counts = VisitCounts()
    for transition in dfa.transitions():
        counts.observe(transition)
    # Make the deep transition the novel one.
    for transition in dfa.transitions():
        if transition.action != "a4":
            counts.observe(transition)
    assert dfa.select_trace(counts) == ["a3", "a4"]


def test_trace_targets_highest_curiosity_transition() -> None:
    dfa = chain(("s0", "a", "s1"), ("s1", "b", "s2"), ("s0", "c", "s0"))
    counts = VisitCounts()
    for transition in dfa.transitions():
        counts.observe(transition)
    counts.observe(Transition("s0", "a", "s1"))
    counts.observe(Transition("s0", "c", "s0"))
    # (s1, b, s2) now has the strictly lowest count.
    assert dfa.select_trace(counts) == ["a", "b"]


def test_equal_curiosity_breaks_toward_most_recent() -> None:
    dfa = chain(("s0", "a", "s1"), ("s0", "b", "s2"))
    counts = VisitCounts()  # both targets tie at count 1
    assert dfa.select_trace(counts) == ["b"]


def test_unreachable_target_raises_with_candidate() -> None:
    dfa = Dfa(initial="s0")
    dfa.add_transition("s0", "a", "s1")
    dfa.add_transition("s9", "z", "s8")  # disconnected island, most recent
    counts = VisitCounts()
    with pytest.raises(TargetUnreachable) as exc:
        dfa.select_trace(counts)
    assert exc.value.transition == Transition("s9", "z", "s8")


def test_exclude_falls_back_to_next_candidate() -> None:
    dfa = Dfa(initial="s0")
    dfa.add_transition("s0", "a", "s1")
    dfa.add_transition("s9", "z", "s8")
    counts = VisitCounts()
    blocked = Transition("s9", "z", "s8")
    assert dfa.select_trace(counts, exclude=[blocked]) == ["a"]


def test_empty_candidate_pool_raises_bare() -> None:
    dfa = Dfa(initial="s0")
    dfa.add_transition("s0", "a", "s1")
    counts = VisitCounts()
    with pytest.raises(TargetUnreachable) as exc:
        dfa.select_trace(counts, exclude=[Transition("s0", "a", "s1")])
    assert exc.value.transition is None


def _random_reachable_dfa(rng: random.Random) -> tuple[Dfa, VisitCounts]:
    n_states = rng.randint(2, 30)
    dfa = Dfa(initial="s0")
    counts = VisitCounts()
    out_degree = {i: 0 for i in range(n_states)}
    # Spanning arborescence guarantees reachability of every state.
    for i in range(1, n_states):
        parent = rng.randrange(i)
        action = f"a{out_degree[parent]}"
        out_degree[parent] += 1
        dfa.add_transition(f"s{parent}", action, f"s{i}")
    for _ in range(rng.randint(0, 2 * n_states)):
        src = rng.randrange(n_states)
        if out_degree[src] >= 4:
            continue
        action = f"a{out_degree[src]}"
        out_degree[src] += 1
        dfa.add_transition(f"s{src}", action, f"s{rng.randrange(n_states)}")
    for transition in dfa.transitions():
        for _ in range(rng.randint(0, 4)):
            counts.observe(transition)
    return dfa, counts


def test_trace_prefix_length_matches_bfs_oracle_on_random_dfas() -> None:
    rng = random.Random(42)
    checked = 0
    for _ in range(50):
        dfa, counts = _random_reachable_dfa(rng)
        trace = dfa.select_trace(counts)
        # Walk the returned trace through delta: it must be executable and
        # end with the argmax-curiosity transition.
        cursor = dfa.initial
        for action in trace:
            cursor = dfa.delta[(cursor, action)]
        best = min(
            dfa.transitions(),
            key=lambda t: (-counts.peek(t), -dfa._recorded_at[(t.prev, t.action)]),
        )
        assert trace[-1] == best.action
        assert cursor == best.next
        adjacency: dict[str, list[str]] = {}
        for (prev, _a), nxt in dfa.delta.items():
            adjacency.setdefault(prev, []).append(nxt)
        distances = bfs_distances(adjacency, dfa.initial)
        assert len(trace) - 1 == distances[best.prev]
        checked += 1
    assert checked == 50


def test_trace_is_executable_and_ends_with_target() -> None:
    rng = random.Random(99)
    for _ in range(25):
        dfa, counts = _random_reachable_dfa(rng)
        trace = dfa.select_trace(counts)
        cursor = dfa.initial
        for action in trace:
            assert (cursor, action) in dfa.delta
            cursor = dfa.delta[(cursor, action)]


# -- dot export -------------------------------------------------------------------


def test_dot_export_structure() -> None:
    dfa = chain(("s0", "click #next", "s1"))
    dot = to_dot(dfa)
    assert dot.startswith("digraph dfa {")
    assert '"s0" -> "s1" [label="click #next"];' in dot
    assert "doublecircle" in dot  # initial state highlighted
    assert dot.rstrip().endswith("}")


def test_dot_export_escapes_quotes() -> None:
    dfa = chain(("s0", 'a"b', "s1"))
    dot = to_dot(dfa)
    assert '\\"' in dot


def test_dot_export_escapes_newlines_in_labels() -> None:
    dfa = chain(("s0", "a", "s1"))
    dot = to_dot(dfa, state_label=lambda s: f"{s}\nhttp://x.test/{s}")
    assert '"s0\\nhttp://x.test/s0"' in dot
    assert all(line.count('"') % 2 == 0 for line in dot.splitlines())


def test_dot_export_custom_labels() -> None:
    dfa = chain(("s0", "a", "s1"))
    dot = to_dot(
        dfa,
        state_label=lambda s: f"{s}|http://x.test/{s}",
        edge_label=lambda t: f"{t.action} x3",
    )
    assert "http://x.test/s0" in dot
    assert "a x3" in dot
