"""Incrementally mined deterministic automaton with curiosity-greedy trace queries.

The automaton records every explored transition. When exploration stalls, the
recorded transition with the highest remaining novelty is chosen and the
shortest action prefix reaching its source (unit edge weights, so Dijkstra
degenerates to breadth-first search) is returned for replay.
"""

from __future__ import annotations

from collections import deque
from typing import Callable, Iterable, Iterator

from .curiosity import Transition, VisitCounts
from .env import TargetUnreachable


class Dfa:
    """Explored-transition automaton: (states, actions, delta, initial)."""

    def __init__(self, initial: str):
        self.initial = initial
        self.states: set[str] = {initial}
        self.actions: set[str] = set()
        self.delta: dict[tuple[str, str], str] = {}
        self.conflict_count = 0
        self._recorded_at: dict[tuple[str, str], int] = {}
        self._clock = 0

    def add_transition(self, prev: str, action: str, next_state: str) -> None:
        """Record delta[(prev, action)] := next.

        A differing earlier successor is overwritten and counted as a
        conflict; dynamic environments make such overwrites harmless because
        replay ignores paths that stop being executable.
        """
        key = (prev, action)
        existing = self.delta.get(key)
        if existing is not None and existing != next_state:
            self.conflict_count += 1
        if existing != next_state:
            self._clock += 1
            self._recorded_at[key] = self._clock
        self.delta[key] = next_state
        self.states.add(prev)
        self.states.add(next_state)
        self.actions.add(action)

    def transitions(self) -> Iterator[Transition]:
        for (prev, action), nxt in self.delta.items():
            yield Transition(prev, action, nxt)

    def terminal_states(self) -> set[str]:
        """States with no outgoing recorded transition."""
        sources = {prev for (prev, _a) in self.delta}
        return self.states - sources

    def shortest_action_path(self, target: str) -> list[str] | None:
        """Fewest-action path from the initial state to ``target``, or None."""
        if target == self.initial:
            return []
        adjacency: dict[str, list[tuple[str, str]]] = {}
        for (prev, action), nxt in self.delta.items():
            adjacency.setdefault(prev, []).append((action, nxt))
        for edges in adjacency.values():
            edges.sort()
        parent: dict[str, tuple[str, str]] = {}
        seen = {self.initial}
        queue = deque([self.initial])
        while queue:
            node = queue.popleft()
            for action, nxt in adjacency.get(node, ()):
                if nxt in seen:
                    continue
                seen.add(nxt)
                parent[nxt] = (node, action)
                if nxt == target:
                    path = []
                    cursor = nxt
                    while cursor != self.initial:
                        cursor, act = parent[cursor]
                        path.append(act)
                    path.reverse()
                    return path
                queue.append(nxt)
        return None

    def ranked_transitions(self, counts: VisitCounts) -> list[Transition]:
        """Recorded transitions by descending novelty.

        Equal-curiosity ties break toward the most recently recorded
        transition: once-visited transitions tie constantly, and recency is
        what points the replay at the live exploration frontier instead of
        sweeping stale leaves. Still fully deterministic under a fixed seed.
        """
        return sorted(
            self.transitions(),
            key=lambda t: (-counts.peek(t), -self._recorded_at[(t.prev, t.action)]),
        )

    def select_trace(
        self,
        counts: VisitCounts,
        exclude: Iterable[Transition] = (),
    ) -> list[str]:
        """Actions replaying the highest-curiosity recorded transition.

        The returned list walks delta from the initial state to the target
        transition's source and ends with the target action itself.
        Raises TargetUnreachable when the best candidate's source has no
        path from the initial state (callers may retry with ``exclude``).
        """
        excluded = set(exclude)
        for candidate in self.ranked_transitions(counts):
            if candidate in excluded:
                continue
            prefix = self.shortest_action_path(candidate.prev)
            if prefix is None:
                raise TargetUnreachable(candidate)
            return prefix + [candidate.action]
        raise TargetUnreachable(None)


def to_dot(
    dfa: Dfa,
    state_label: Callable[[str], str] | None = None,
    edge_label: Callable[[Transition], str] | None = None,
) -> str:
    """DOT rendering of the automaton for graph viewers."""

    def quote(text: str) -> str:
        escaped = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{escaped}"'

    lines = ["digraph dfa {", "  rankdir=LR;"]
    for state in sorted(dfa.states):
        label = state_label(state) if state_label else state
        shape = "doublecircle" if state == dfa.initial else "circle"
        lines.append(f"  {quote(state)} [label={quote(label)} shape={shape}];")
    for transition in sorted(dfa.transitions()):
        label = edge_label(transition) if edge_label else transition.action
        lines.append(
            f"  {quote(transition.prev)} -> {quote(transition.next)} "
            f"[label={quote(label)}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
