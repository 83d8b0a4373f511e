"""Tabular Q-function with assignment-style updates and Gumbel-perturbed selection."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .env import NoValidActions


@dataclass
class PolicyConfig:
    """Learning knobs: discount (lambda), temperature (tau), seed."""

    discount: float = 0.95
    temperature: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


def gumbel(rng: random.Random) -> float:
    """One draw from Gumbel(0, 1)."""
    u = rng.random()
    if u <= 0.0:
        u = 1e-300
    return -math.log(-math.log(u))


class QTable:
    """State-action value table plus per-state valid-action bookkeeping.

    The update is a pure assignment (no learning rate): repeating the same
    update leaves the table unchanged after the first application.
    """

    def __init__(self, config: PolicyConfig):
        self.config = config
        self.q: dict[tuple[str, str], float] = {}
        self.valid: dict[str, list[str]] = {}
        self.rng = random.Random(f"{config.rng_seed}:policy")

    def register_actions(self, state: str, action_ids: list[str]) -> None:
        """Replace the state's valid-action set; learned Q values survive.

        Actions dropped from the list stop being selectable but keep their
        table entries; re-listed actions come back with their old values.
        """
        self.valid[state] = list(action_ids)

    def valid_actions(self, state: str) -> list[str]:
        return self.valid.get(state, [])

    def q_value(self, state: str, action: str) -> float:
        return self.q.get((state, action), 0.0)

    def update(self, prev: str, action: str, reward: float, next_state: str) -> float:
        """Assign Q(prev, action) := reward + discount * max_a Q(next, a)."""
        successor = max(
            (self.q_value(next_state, a) for a in self.valid_actions(next_state)),
            default=0.0,
        )
        value = reward + self.config.discount * successor
        self.q[(prev, action)] = value
        return value

    def select_action(self, state: str) -> str:
        raise NotImplementedError

    def snapshot(self) -> list[dict]:
        return [
            {"state": s, "action": a, "q": v}
            for (s, a), v in sorted(self.q.items())
        ]


class GumbelQPolicy(QTable):
    """Selects argmax of Q/tau perturbed with i.i.d. Gumbel(0, 1) noise.

    By the Gumbel-max identity the marginal selection law is exactly
    softmax(Q/tau), so higher-valued actions are proportionally more likely
    without ever starving the rest.
    """

    def select_action(self, state: str) -> str:
        candidates = self.valid.get(state)
        if not candidates:
            raise NoValidActions(f"state {state} has no valid actions")
        tau = self.config.temperature
        best_id = None
        best_score = -math.inf
        for action_id in candidates:
            score = self.q_value(state, action_id) / tau + gumbel(self.rng)
            # Exact float ties break toward the lowest action id.
            if score > best_score or (score == best_score and action_id < best_id):
                best_score = score
                best_id = action_id
        return best_id


class UniformRandomPolicy(QTable):
    """Ablation baseline: uniform choice over the valid actions."""

    def select_action(self, state: str) -> str:
        candidates = self.valid.get(state)
        if not candidates:
            raise NoValidActions(f"state {state} has no valid actions")
        return self.rng.choice(candidates)
