"""End-to-end exploration engine: episodes, stuck-triggered trace replay,
failure bookkeeping, and the run report.

The loop drives one backend session. Per step it executes the pending action
buffer, abstracts every observed page, records failures against the current
test case, and then either (a) replays the shortest trace to the most novel
recorded transition when no new state appeared for a while, or (b) updates
counts, Q-values and the automaton before selecting the next action.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import random
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlsplit

from . import dfa as dfa_mod
from .abstraction import StateRegistry, retrieve_valid_actions
from .curiosity import Transition, VisitCounts
from .dfa import Dfa
from .env import (
    CLIENT_ERROR,
    EPSILON,
    ActionDescriptor,
    BackendUnavailable,
    BoundAction,
    ConfigError,
    Environment,
    Failure,
    InputConstraints,
    Locator,
    NoValidActions,
    Page,
    Step,
    TargetUnreachable,
    TestCase,
    bind_action,
)
from .policy import GumbelQPolicy, PolicyConfig, QTable, UniformRandomPolicy

SIM = "sim"
BROWSER = "browser"

POLICY_CURIOSITY = "curiosity"
POLICY_RANDOM = "random"

METRICS_FIELDS = ("step", "elapsed_ms", "states", "transitions", "unique_failures")


@dataclass
class RunConfig:
    """Everything a run needs; defaults follow the evaluated configuration."""

    backend: str
    target: str
    time_budget_secs: float = 1800.0
    max_steps_per_episode: int = 100
    stuck_threshold: float | None = None  # secs on browser, steps on sim
    similarity_threshold: float = 0.8
    discount: float = 0.95
    temperature: float = 1.0
    seed: int = 0
    out_dir: str | None = None
    export_dfa: bool = False
    step_budget: int | None = None
    policy: str = POLICY_CURIOSITY
    dfa_guidance: bool = True
    server_errors_only: bool = False
    network_idle_ms: int = 500
    max_wait_ms: int = 10000

    def __post_init__(self):
        if self.backend not in (SIM, BROWSER):
            raise ConfigError(f"backend must be sim or browser, got {self.backend!r}")
        if self.time_budget_secs < 0:
            raise ConfigError("time_budget_secs must be non-negative")
        for name in ("max_steps_per_episode", "network_idle_ms", "max_wait_ms"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.step_budget is not None and self.step_budget <= 0:
            raise ConfigError("step_budget must be positive")
        if self.stuck_threshold is not None and self.stuck_threshold <= 0:
            raise ConfigError("stuck_threshold must be positive")
        if self.policy not in (POLICY_CURIOSITY, POLICY_RANDOM):
            raise ConfigError(f"unknown policy {self.policy!r}")

    @property
    def effective_stuck_threshold(self) -> float:
        if self.stuck_threshold is not None:
            return self.stuck_threshold
        return 120.0 if self.backend == BROWSER else 200.0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def descriptor_to_json(d: ActionDescriptor) -> dict:
    out: dict = {"kind": d.kind}
    if d.locator is not None:
        out["locator"] = {
            "tag": d.locator.tag,
            "attrs": [list(pair) for pair in d.locator.attrs],
            "ordinal": d.locator.ordinal,
        }
    if d.input_constraints is not None:
        c = d.input_constraints
        out["input_constraints"] = {
            "input_type": c.input_type,
            "min": c.min,
            "max": c.max,
            "maxlength": c.maxlength,
            "pattern": c.pattern,
            "options": list(c.options) if c.options else None,
        }
    return out


def descriptor_from_json(raw: dict) -> ActionDescriptor:
    locator = None
    if raw.get("locator"):
        locator = Locator(
            tag=raw["locator"]["tag"],
            attrs=tuple(tuple(pair) for pair in raw["locator"]["attrs"]),
            ordinal=raw["locator"]["ordinal"],
        )
    constraints = None
    if raw.get("input_constraints"):
        c = raw["input_constraints"]
        constraints = InputConstraints(
            input_type=c.get("input_type", "text"),
            min=c.get("min"),
            max=c.get("max"),
            maxlength=c.get("maxlength"),
            pattern=c.get("pattern"),
            options=tuple(c["options"]) if c.get("options") else None,
        )
    return ActionDescriptor(kind=raw["kind"], locator=locator, input_constraints=constraints)


def _test_case_to_json(tc: TestCase) -> dict:
    return {
        "seed": tc.seed,
        "failed": tc.failed,
        "steps": [
            {
                "prev": s.prev,
                "next": s.next,
                "action": {
                    "descriptor": descriptor_to_json(s.action.descriptor),
                    "input_value": s.action.input_value,
                },
            }
            for s in tc.steps
        ],
    }


def load_test_case(raw: dict) -> TestCase:
    steps = [
        Step(
            prev=s["prev"],
            next=s["next"],
            action=BoundAction(
                descriptor=descriptor_from_json(s["action"]["descriptor"]),
                input_value=s["action"]["input_value"],
            ),
        )
        for s in raw["steps"]
    ]
    return TestCase(steps=steps, seed=raw["seed"], failed=raw["failed"])


@dataclass
class FailureRecord:
    failure: Failure
    test_case: TestCase
    env_snapshot: dict | None
    occurrences: int = 1


class MetricsWriter:
    """Append-only metrics stream, flushed per row so crashes lose at most one step."""

    def __init__(self, path: Path | None):
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = path.open("w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(METRICS_FIELDS)
            self._fh.flush()

    def emit(self, **row) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([row[f] for f in METRICS_FIELDS])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Session:
    """One exploration run against one environment."""

    def __init__(self, config: RunConfig, env: Environment):
        self.config = config
        self.env = env
        self.registry = StateRegistry(config.similarity_threshold)
        self.counts = VisitCounts()
        policy_config = PolicyConfig(
            discount=config.discount,
            temperature=config.temperature,
            rng_seed=config.seed,
        )
        policy_cls = GumbelQPolicy if config.policy == POLICY_CURIOSITY else UniformRandomPolicy
        self.policy: QTable = policy_cls(policy_config)
        self.input_rng = random.Random(f"{config.seed}:input")
        self.dfa: Dfa | None = None
        self.descriptors: dict[str, ActionDescriptor] = {EPSILON.action_id: EPSILON}
        self.state_actions: dict[str, dict[str, ActionDescriptor]] = {}
        self.first_seen: dict[str, int] = {}
        self.failures: dict[tuple, FailureRecord] = {}
        self.total_steps = 0
        self.episodes = 0
        self.episode_steps = 0
        self.first_failure_step: int | None = None
        self.scope = self._scope_for(config)
        self._start_ms: int = 0
        self._last_new_state_steps = 0
        self._last_new_state_ms = 0
        self._last_metrics_step = -1

    @staticmethod
    def _scope_for(config: RunConfig) -> str | None:
        if config.backend == BROWSER:
            return urlsplit(config.target).hostname
        return None

    # -- bookkeeping ---------------------------------------------------------

    def _elapsed_ms(self) -> int:
        return self.env.now_ms() - self._start_ms

    def _budget_exhausted(self) -> bool:
        if self._elapsed_ms() >= self.config.time_budget_secs * 1000.0:
            return True
        if self.config.step_budget is not None and self.total_steps >= self.config.step_budget:
            return True
        return False

    def _note_state(self, state_id: str) -> None:
        if state_id not in self.first_seen:
            self.first_seen[state_id] = self.total_steps
            self._last_new_state_steps = self.total_steps
            self._last_new_state_ms = self.env.now_ms()

    def _stuck(self) -> bool:
        threshold = self.config.effective_stuck_threshold
        if self.config.backend == SIM:
            return self.total_steps - self._last_new_state_steps >= threshold
        return self.env.now_ms() - self._last_new_state_ms >= threshold * 1000.0

    def _reset_stuck_timer(self) -> None:
        self._last_new_state_steps = self.total_steps
        self._last_new_state_ms = self.env.now_ms()

    def _emit_metrics(self, metrics: MetricsWriter) -> None:
        if self.total_steps <= self._last_metrics_step:
            return
        self._last_metrics_step = self.total_steps
        metrics.emit(
            step=self.total_steps,
            elapsed_ms=self._elapsed_ms(),
            states=len(self.registry),
            transitions=len(self.dfa.delta) if self.dfa else 0,
            unique_failures=len(self.failures),
        )

    def _bind(self, descriptor: ActionDescriptor) -> BoundAction:
        self.descriptors[descriptor.action_id] = descriptor
        return bind_action(descriptor, self.input_rng)

    def _record_failure(self, failure: Failure, tcase: TestCase, snapshot: dict | None) -> None:
        if self.config.server_errors_only and failure.kind == CLIENT_ERROR:
            return
        tcase.failed = True
        if self.first_failure_step is None:
            self.first_failure_step = self.total_steps
        key = failure.dedup_key()
        existing = self.failures.get(key)
        if existing is not None:
            existing.occurrences += 1
            return
        self.failures[key] = FailureRecord(
            failure=failure,
            test_case=copy.deepcopy(tcase),
            env_snapshot=copy.deepcopy(snapshot),
        )

    # -- trace replay on stuck ------------------------------------------------

    def _select_replay(self) -> list[BoundAction] | None:
        """Trace to the most novel recorded transition, trying 3 candidates.

        Transitions landing in states known to have no valid actions are
        skipped up front: the replay target is the starting point of the next
        exploration, and a dead end cannot be one.
        """
        if self.dfa is None or not self.dfa.delta:
            return None
        exclude: list[Transition] = [
            t for t in self.dfa.transitions() if self.policy.valid.get(t.next) == []
        ]
        for _ in range(3):
            try:
                action_ids = self.dfa.select_trace(self.counts, exclude)
            except TargetUnreachable as exc:
                if exc.transition is None:
                    return None
                exclude.append(exc.transition)
                continue
            bound = []
            for action_id in action_ids:
                descriptor = self.descriptors.get(action_id)
                if descriptor is None:
                    return None
                bound.append(self._bind(descriptor))
            return bound
        return None

    # -- main loop -------------------------------------------------------------

    def run(self) -> dict:
        self._start_ms = self.env.now_ms()
        metrics_path = None
        out_dir = Path(self.config.out_dir) if self.config.out_dir else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = out_dir / "metrics.csv"
        metrics = MetricsWriter(metrics_path)
        started_at = time.strftime("%Y-%m-%dT%H:%M:%S")
        aborted = None
        try:
            self._explore(metrics)
        except BackendUnavailable as exc:
            aborted = str(exc)
        finally:
            metrics.close()
        report = self._build_report(metrics.rows, started_at, aborted)
        if out_dir is not None:
            (out_dir / "report.json").write_text(json.dumps(report, indent=1))
            if self.config.export_dfa and self.dfa is not None:
                (out_dir / "dfa.dot").write_text(self._render_dot())
        if aborted is not None:
            raise BackendUnavailable(aborted)
        return report

    def _reset_to_home(self, snapshot_first: bool = True) -> tuple[Page, str, dict | None]:
        snapshot = self._env_snapshot() if snapshot_first else None
        observation = self.env.reset()
        self.total_steps += 1
        state = self.registry.assign(observation.page)
        self._note_state(state)
        return observation.page, state, snapshot

    def _explore(self, metrics: MetricsWriter) -> None:
        while True:
            current_page, state, tcase_snapshot = self._reset_to_home()
            self.episodes += 1
            if self.dfa is None:
                self.dfa = Dfa(initial=state)
            tcase = TestCase(steps=[], seed=self.config.seed)
            pending: list[BoundAction] = [BoundAction(EPSILON)]
            self.episode_steps = 0
            self._emit_metrics(metrics)

            while self.episode_steps < self.config.max_steps_per_episode and not self._budget_exhausted():
                result = self.env.execute(current_page, pending)
                self.total_steps += result.executed
                executed = pending[: result.executed]

                # Chain every observed page into the test case, attributing
                # failures to the step that surfaced them.
                observed: list[Transition] = []
                failures_by_index: dict[int, list[Failure]] = {}
                for f in result.failures:
                    failures_by_index.setdefault(f.step, []).append(f)
                cursor = state
                for index, (bound, page) in enumerate(zip(executed, result.pages)):
                    next_state = self.registry.assign(page)
                    self._note_state(next_state)
                    tcase.steps.append(Step(prev=cursor, action=bound, next=next_state))
                    for f in failures_by_index.get(index, ()):
                        self._record_failure(
                            dataclasses.replace(f, step=len(tcase.steps)),
                            tcase,
                            tcase_snapshot,
                        )
                    observed.append(Transition(cursor, bound.descriptor.action_id, next_state))
                    cursor = next_state

                current_page = result.page
                state = self.registry.assign(current_page)
                actions = retrieve_valid_actions(current_page, result.elements, self.scope)
                self.policy.register_actions(state, [a.action_id for a in actions])
                self.state_actions[state] = {a.action_id: a for a in actions}
                for a in actions:
                    self.descriptors.setdefault(a.action_id, a)
                self.episode_steps += 1

                if self.config.dfa_guidance and self._stuck():
                    replay = self._select_replay()
                    if replay is None:
                        self._reset_stuck_timer()
                        self._emit_metrics(metrics)
                        break  # fall back to a fresh episode
                    current_page, state, tcase_snapshot = self._reset_to_home()
                    tcase = TestCase(steps=[], seed=self.config.seed)
                    pending = replay
                    self.episode_steps = len(replay)
                    self._reset_stuck_timer()
                    self._emit_metrics(metrics)
                    continue

                reward = None
                for transition in observed:
                    reward = self.counts.observe(transition)
                    self.dfa.add_transition(*transition)
                if observed:
                    last = observed[-1]
                    # Q trains only when the buffer's final action actually
                    # changed the abstract state. Self-transitions would
                    # otherwise bootstrap their own successor term toward
                    # reward/(1-discount) and drown newly valid actions,
                    # inverting the exploration pressure the reward decay is
                    # supposed to create. Counts and the automaton still see
                    # every observed transition.
                    if last.prev != last.next:
                        self.policy.update(last.prev, last.action, reward, last.next)

                try:
                    action_id = self.policy.select_action(state)
                except NoValidActions:
                    self._emit_metrics(metrics)
                    break
                pending = [self._bind(self.state_actions[state][action_id])]
                self._emit_metrics(metrics)

            if self._budget_exhausted():
                break

    def _env_snapshot(self) -> dict | None:
        snapshot_fn = getattr(self.env, "snapshot_state", None)
        return snapshot_fn() if callable(snapshot_fn) else None

    # -- reporting ---------------------------------------------------------------

    def _render_dot(self) -> str:
        def state_label(state_id: str) -> str:
            try:
                return f"{state_id}\n{self.registry.get(state_id).canonical_url}"
            except KeyError:
                return state_id

        def edge_label(t: Transition) -> str:
            descriptor = self.descriptors.get(t.action)
            name = t.action
            if descriptor is not None and descriptor.locator is not None:
                name = f"{descriptor.kind} {descriptor.locator.summary()}"
            return f"{name} x{self.counts.count(t)}"

        return dfa_mod.to_dot(self.dfa, state_label, edge_label)

    def _build_report(self, metrics_rows: list[dict], started_at: str, aborted: str | None) -> dict:
        ordered = sorted(
            self.failures.values(),
            key=lambda r: (r.failure.step, r.failure.kind, r.failure.message),
        )
        failures = [
            {
                "id": i,
                "kind": r.failure.kind,
                "message": r.failure.message,
                "status": r.failure.status,
                "url": r.failure.url,
                "step": r.failure.step,
                "occurrences": r.occurrences,
                "test_case": _test_case_to_json(r.test_case),
                "env_snapshot": r.env_snapshot,
            }
            for i, r in enumerate(ordered)
        ]
        return {
            "config": self.config.to_json(),
            "started_at": started_at,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "aborted": aborted,
            "total_steps": self.total_steps,
            "episodes": self.episodes,
            "states": self.registry.snapshot(self.first_seen),
            "distinct_documents": self.registry.distinct_documents,
            "transitions": self.counts.snapshot(),
            "q_table": self.policy.snapshot(),
            "state_actions": {s: sorted(ids) for s, ids in sorted(self.policy.valid.items())},
            "dfa_conflicts": self.dfa.conflict_count if self.dfa else 0,
            "first_failure_step": self.first_failure_step,
            "failures": failures,
            "metrics": metrics_rows,
        }


def build_environment(config: RunConfig) -> Environment:
    if config.backend == SIM:
        from .sim import SimEnvironment, load_config

        return SimEnvironment(load_config(config.target), seed=config.seed)
    from .browser import BrowserEnvironment

    return BrowserEnvironment(
        target=config.target,
        network_idle_ms=config.network_idle_ms,
        max_wait_ms=config.max_wait_ms,
    )


def run(config: RunConfig, env: Environment | None = None) -> dict:
    """Execute a full exploration run and return the report dict."""
    own_env = env is None
    if env is None:
        env = build_environment(config)
    try:
        return Session(config, env).run()
    finally:
        if own_env:
            env.close()


# -- test case replay -------------------------------------------------------


def replay_failure(report_dir: str | Path, failure_id: int) -> dict:
    """Re-execute a stored failing test case; report reproduction status.

    On the sim backend the stored environment snapshot (flags and visit
    counters captured just before the test case's opening reset) is restored
    first, so the replay sees exactly the server-side state the original run
    saw.
    """
    report_path = Path(report_dir) / "report.json"
    report = json.loads(report_path.read_text())
    entries = [f for f in report["failures"] if f["id"] == failure_id]
    if not entries:
        raise ConfigError(f"failure id {failure_id} not present in {report_path}")
    entry = entries[0]
    config = report["config"]
    if config["backend"] != SIM:
        raise ConfigError("replay currently supports sim-backend reports only")

    from .sim import SimEnvironment, load_config

    env = SimEnvironment(load_config(config["target"]), seed=config["seed"])
    if entry.get("env_snapshot"):
        env.restore_state(entry["env_snapshot"])
    observation = env.reset()
    tcase = load_test_case(entry["test_case"])

    observed: list[dict] = []
    reproduced = False
    diverged_at = None
    page = observation.page
    for position, step in enumerate(tcase.steps, start=1):
        result = env.execute(page, [step.action])
        if result.diverged_at is not None:
            diverged_at = position
            break
        page = result.page
        for f in result.failures:
            observed.append(
                {"kind": f.kind, "status": f.status, "step": position, "message": f.message}
            )
            if position == entry["step"] and f.kind == entry["kind"]:
                reproduced = True
    return {
        "failure_id": failure_id,
        "expected": {"kind": entry["kind"], "step": entry["step"], "status": entry["status"]},
        "observed": observed,
        "diverged_at": diverged_at,
        "reproduced": reproduced,
    }
