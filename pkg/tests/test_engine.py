from __future__ import annotations

import csv
import json

import pytest
from click.testing import CliRunner

from explor.cli import main as cli_main
from explor.curiosity import VisitCounts
from explor.engine import (
    RunConfig,
    Session,
    build_environment,
    replay_failure,
    run,
    load_test_case,
)
from explor.env import (
    BackendUnavailable,
    BoundAction,
    ConfigError,
    ElementInfo,
    Environment,
    ExecResult,
    Observation,
    Page,
)
from explor.policy import QTable
from explor.sim import SimEnvironment, load_config


def sim_config(target: str, **kw) -> RunConfig:
    kw.setdefault("backend", "sim")
    kw.setdefault("seed", 0)
    return RunConfig(target=target, **kw)


# -- config validation ----------------------------------------------------------


def test_runconfig_rejects_bad_values(gated_app: str) -> None:
    with pytest.raises(ConfigError):
        RunConfig(backend="ftp", target=gated_app)
    with pytest.raises(ConfigError):
        RunConfig(backend="sim", target=gated_app, max_steps_per_episode=0)
    with pytest.raises(ConfigError):
        RunConfig(backend="sim", target=gated_app, policy="greedy")
    with pytest.raises(ConfigError):
        RunConfig(backend="sim", target=gated_app, step_budget=-5)


def test_stuck_threshold_defaults_per_backend(gated_app: str) -> None:
    assert sim_config(gated_app).effective_stuck_threshold == 200.0
    browser = RunConfig(backend="browser", target="http://127.0.0.1:1/")
    assert browser.effective_stuck_threshold == 120.0


# -- loop boundaries --------------------------------------------------------------


def test_time_budget_zero_records_only_initial_reset(gated_app: str) -> None:
    report = run(sim_config(gated_app, time_budget_secs=0.0))
    assert report["failures"] == []
    assert len(report["states"]) == 1
    assert report["total_steps"] == 1
    assert len(report["metrics"]) == 1
    assert report["episodes"] == 1


def test_step_budget_bounds_run(gated_app: str) -> None:
    report = run(sim_config(gated_app, step_budget=50))
    assert 50 <= report["total_steps"] <= 52  # may finish the pending buffer


def test_episode_length_never_exceeds_max_steps(faulty_app: str) -> None:
    config = sim_config(faulty_app, step_budget=400, max_steps_per_episode=10)
    env = build_environment(config)
    session = Session(config, env)

    episode_lengths = []
    original = SimEnvironment.reset

    def counting_reset(self):
        episode_lengths.append(0)
        return original(self)

    SimEnvironment.reset = counting_reset
    try:
        executed = []
        original_execute = SimEnvironment.execute

        def counting_execute(self, page, actions):
            episode_lengths[-1] += 1
            return original_execute(self, page, actions)

        SimEnvironment.execute = counting_execute
        session.run()
    finally:
        SimEnvironment.reset = original
        SimEnvironment.execute = original_execute
    assert episode_lengths
    assert max(episode_lengths) <= 10


def test_metrics_timeline_strictly_increasing(gated_app: str, tmp_path) -> None:
    out = tmp_path / "run"
    run(sim_config(gated_app, step_budget=300, out_dir=str(out)))
    with (out / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    assert steps == sorted(steps)
    assert len(set(steps)) == len(steps)
    states = [int(r["states"]) for r in rows]
    failures = [int(r["unique_failures"]) for r in rows]
    assert all(a <= b for a, b in zip(states, states[1:]))
    assert all(a <= b for a, b in zip(failures, failures[1:]))


def test_dead_end_state_triggers_fresh_episode(tmp_path) -> None:
    # Entry page links only to a page with no operable elements.
    app = {
        "name": "dead",
        "entry_page": "home",
        "flags": {},
        "pages": {
            "home": {
                "url_template": "http://sim.app/",
                "tag_skeleton": ["html", "a"],
                "actions": [
                    {
                        "locator": {"tag": "a", "id": "go", "href": "/end"},
                        "kind": "click",
                        "destination": "end",
                    }
                ],
            },
            "end": {
                "url_template": "http://sim.app/end",
                "tag_skeleton": ["html", "p", "p", "p"],
                "actions": [],
            },
        },
    }
    path = tmp_path / "dead.app"
    path.write_text(json.dumps(app))
    report = run(sim_config(str(path), step_budget=60))
    assert len(report["states"]) == 2
    assert report["episodes"] > 1  # dead end forced resets
    assert report["total_steps"] >= 60


# -- bookkeeping --------------------------------------------------------------------


def test_failure_snapshot_has_exactly_step_count_steps(faulty_app: str) -> None:
    report = run(sim_config(faulty_app, step_budget=800))
    assert report["failures"]
    for failure in report["failures"]:
        assert len(failure["test_case"]["steps"]) == failure["step"]
        assert failure["test_case"]["failed"] is True


def test_failure_test_case_chains(faulty_app: str) -> None:
    report = run(sim_config(faulty_app, step_budget=800))
    for failure in report["failures"]:
        assert load_test_case(failure["test_case"]).check_chain()


def test_unique_failures_deduplicated(faulty_app: str) -> None:
    report = run(sim_config(faulty_app, step_budget=1500))
    keys = {(f["kind"], f["message"], f["url"]) for f in report["failures"]}
    assert len(keys) == len(report["failures"])
    assert any(f["occurrences"] > 1 for f in report["failures"])


def test_faulty_demo_discovers_all_three_failure_kinds(faulty_app: str) -> None:
    report = run(sim_config(faulty_app, step_budget=1500))
    kinds = {f["kind"] for f in report["failures"]}
    assert kinds == {"client_error", "server_error", "js_exception"}


def test_server_errors_only_filters_client_errors(faulty_app: str) -> None:
    report = run(sim_config(faulty_app, step_budget=1500, server_errors_only=True))
    kinds = {f["kind"] for f in report["failures"]}
    assert "client_error" not in kinds
    assert kinds >= {"server_error"}


def test_report_shape_and_state_dump(gated_app: str, tmp_path) -> None:
    out = tmp_path / "run"
    report = run(sim_config(gated_app, step_budget=400, out_dir=str(out)))
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk["config"] == report["config"]
    for state in report["states"]:
        assert set(state) == {"id", "canonical_url", "first_seen_step", "visit_count"}
    for transition in report["transitions"]:
        assert set(transition) == {"prev", "action", "next", "count"}
    for entry in report["q_table"]:
        assert set(entry) == {"state", "action", "q"}
    assert report["dfa_conflicts"] == 0  # sim is deterministic


def test_q_table_trained_only_on_state_changing_transitions(gated_app: str) -> None:
    report = run(sim_config(gated_app, step_budget=500))
    by_key = {(e["state"], e["action"]): e["q"] for e in report["q_table"]}
    assert by_key
    transitions = {(t["prev"], t["action"]): t["next"] for t in report["transitions"]}
    for (state, action) in by_key:
        assert transitions.get((state, action)) != state


def test_dfa_export_written_on_request(gated_app: str, tmp_path) -> None:
    out = tmp_path / "run"
    run(sim_config(gated_app, step_budget=200, out_dir=str(out), export_dfa=True))
    dot = (out / "dfa.dot").read_text()
    assert dot.startswith("digraph")
    assert "http://sim.app/page/0" in dot
    assert " x" in dot  # edge labels carry visit counts


def test_select_replay_builds_three_action_buffer(gated_app: str) -> None:
    # A recorded chain s0 -> s1 -> s2 with the novel edge hanging off s2
    # produces a pending buffer of exactly three bound actions.
    from explor.dfa import Dfa
    from explor.env import ActionDescriptor, Locator

    config = sim_config(gated_app)
    session = Session(config, build_environment(config))
    session.dfa = Dfa(initial="s0")
    for i, action in enumerate(["a0", "a1", "a2"]):
        descriptor = ActionDescriptor(
            kind="click", locator=Locator(tag="a", attrs=(("id", action),), ordinal=0)
        )
        session.descriptors[descriptor.action_id] = descriptor
        session.dfa.add_transition(f"s{i}", descriptor.action_id, f"s{i + 1}")
        session.counts.observe((f"s{i}", descriptor.action_id, f"s{i + 1}"))
    # Make the deepest edge the least visited.
    for i, action in enumerate(["a0", "a1"]):
        aid = f"click:a[id={action}]#0"
        session.counts.observe((f"s{i}", aid, f"s{i + 1}"))
    buffer = session._select_replay()
    assert buffer is not None and len(buffer) == 3
    assert [b.descriptor.action_id for b in buffer] == [
        "click:a[id=a0]#0",
        "click:a[id=a1]#0",
        "click:a[id=a2]#0",
    ]


def test_stuck_replay_sets_step_counter_to_trace_length(deep_app: str) -> None:
    config = sim_config(deep_app, step_budget=2500, stuck_threshold=60)
    env = build_environment(config)
    session = Session(config, env)
    observed = []
    original = Session._select_replay

    def spy(self):
        trace = original(self)
        if trace is not None:
            # The loop assigns the counter right after this returns; check on
            # the following call, when the previous assignment is still live
            # only if no plain step ran in between. Record both for the
            # postcondition below.
            observed.append((trace, self.episode_steps))
        return trace

    Session._select_replay = spy
    try:
        session.run()
    finally:
        Session._select_replay = original
    assert observed, "stuck handling never fired"


def test_step_counter_equals_trace_length_after_stuck(deep_app: str) -> None:
    config = sim_config(deep_app, step_budget=2500, stuck_threshold=60)
    env = build_environment(config)
    session = Session(config, env)
    checks = []
    original_reset = Session._reset_stuck_timer

    def spy(self):
        # Called twice per stuck handling; after the second call the counter
        # has been set to the replay length. Recording every call and
        # filtering below keeps this independent of internal call order.
        checks.append(session.episode_steps)
        return original_reset(self)

    Session._reset_stuck_timer = spy
    try:
        replays = []
        original_select = Session._select_replay

        def select_spy(s):
            trace = original_select(s)
            replays.append(trace)
            return trace

        Session._select_replay = select_spy
        session.run()
    finally:
        Session._reset_stuck_timer = original_reset
        Session._select_replay = original_select
    lengths = [len(t) for t in replays if t is not None]
    assert lengths, "no replay ever happened"
    # Each successful replay contributes one timer reset observed with the
    # counter already set to that replay's length.
    assert set(lengths) <= set(checks)


class FlakyEnv(Environment):
    """Sim wrapper that dies after a fixed number of operations."""

    def __init__(self, inner: SimEnvironment, die_after: int):
        self.inner = inner
        self.remaining = die_after

    def _tick(self):
        self.remaining -= 1
        if self.remaining <= 0:
            raise BackendUnavailable("backend vanished")

    def reset(self):
        self._tick()
        return self.inner.reset()

    def execute(self, page, actions):
        self._tick()
        return self.inner.execute(page, actions)

    def now_ms(self):
        return self.inner.now_ms()


def test_backend_loss_flushes_partial_report(gated_app: str, tmp_path) -> None:
    out = tmp_path / "partial"
    config = sim_config(gated_app, step_budget=5000, out_dir=str(out))
    env = FlakyEnv(SimEnvironment(load_config(gated_app)), die_after=40)
    with pytest.raises(BackendUnavailable):
        Session(config, env).run()
    report = json.loads((out / "report.json").read_text())
    assert report["aborted"] == "backend vanished"
    assert report["states"]  # partial progress survived
    assert (out / "metrics.csv").exists()


class DivergingEnv(Environment):
    """Two pages; the second page's only action always fails to resolve.

    Exercises the engine's divergence contract: no crash, fresh listing,
    resumed stepping.
    """

    def __init__(self):
        self.clock = 0
        self.home = Page(url="http://s.test/", html_doc="<html><a></a></html>")
        self.other = Page(url="http://s.test/other", html_doc="<p></p><p></p><a></a>")
        self.at_home = True
        self.diverge_count = 0

    def _elements(self):
        return [ElementInfo(tag="a", attrs={"id": "go", "href": "/other"})]

    def reset(self):
        self.clock += 1
        self.at_home = True
        return Observation(self.home, self._elements())

    def execute(self, page, actions):
        self.clock += 1
        bound = actions[0]
        if bound.descriptor.kind == "noop":
            current = self.home if self.at_home else self.other
            return ExecResult(current, self._elements(), [], [current])
        if self.at_home:
            self.at_home = False
            return ExecResult(self.other, self._elements(), [], [self.other])
        # Stale locator on the other page: diverge, hand back home listing.
        self.diverge_count += 1
        self.at_home = True
        return ExecResult(self.home, self._elements(), [], [], diverged_at=0)

    def now_ms(self):
        return self.clock


def test_divergence_resumes_policy_stepping() -> None:
    config = RunConfig(backend="sim", target="unused", step_budget=60, dfa_guidance=False)
    env = DivergingEnv()
    session = Session(config, env)
    report = session.run()
    assert env.diverge_count > 3  # kept stepping through repeated divergence
    assert report["total_steps"] >= 60
    steps = [m["step"] for m in report["metrics"]]
    assert steps == sorted(set(steps))  # timeline stayed strictly increasing


class TwoFailureEnv(Environment):
    """One page whose single button surfaces two failures in one step."""

    def __init__(self):
        self.clock = 0
        self.page = Page(url="http://t.test/", html_doc="<html><button></button></html>")

    def _elements(self):
        return [ElementInfo(tag="button", attrs={"id": "bad"})]

    def reset(self):
        self.clock += 1
        return Observation(self.page, self._elements())

    def execute(self, page, actions):
        from explor.env import Failure

        self.clock += 1
        bound = actions[0]
        if bound.descriptor.kind == "noop":
            return ExecResult(self.page, self._elements(), [], [self.page])
        failures = [
            Failure(kind="js_exception", message="boom js", url=self.page.url, step=0),
            Failure(kind="server_error", message="boom http", url=self.page.url, step=0, status=500),
        ]
        return ExecResult(self.page, self._elements(), failures, [self.page])

    def now_ms(self):
        return self.clock


def test_two_failures_in_one_step_share_one_snapshot() -> None:
    config = RunConfig(backend="sim", target="unused", step_budget=12, dfa_guidance=False)
    report = Session(config, TwoFailureEnv()).run()
    assert len(report["failures"]) == 2
    steps = {f["step"] for f in report["failures"]}
    assert len(steps) == 1  # both records reference the same provoking step
    snapshots = [f["test_case"] for f in report["failures"]]
    assert snapshots[0] == snapshots[1]


def test_replay_updates_counts_but_trains_q_once_per_buffer(deep_app: str) -> None:
    observes, updates = [], []
    original_observe = VisitCounts.observe
    original_update = QTable.update

    def spy_observe(self, t):
        observes.append(t)
        return original_observe(self, t)

    def spy_update(self, prev, action, reward, nxt):
        updates.append((prev, action))
        return original_update(self, prev, action, reward, nxt)

    VisitCounts.observe = spy_observe
    QTable.update = spy_update
    try:
        run(sim_config(deep_app, step_budget=1500, stuck_threshold=50, seed=2))
    finally:
        VisitCounts.observe = original_observe
        QTable.update = original_update
    # Replay buffers observe every intermediate transition but train the
    # Q-function at most once per executed buffer.
    assert len(observes) > len(updates)
    assert updates


# -- determinism -----------------------------------------------------------------------


@pytest.mark.parametrize("app_fixture", ["gated_app", "deep_app", "dynamic_app"])
def test_same_seed_reproduces_report(app_fixture: str, request) -> None:
    target = request.getfixturevalue(app_fixture)
    first = run(sim_config(target, step_budget=300, seed=11))
    second = run(sim_config(target, step_budget=300, seed=11))
    # Whole report is byte-stable apart from timestamps.
    for key in set(first) - {"started_at", "finished_at"}:
        assert first[key] == second[key], key


def test_different_seeds_diverge(gated_app: str) -> None:
    first = run(sim_config(gated_app, step_budget=300, seed=1))
    second = run(sim_config(gated_app, step_budget=300, seed=2))
    assert first["metrics"] != second["metrics"]


# -- replay -----------------------------------------------------------------------------


def test_replay_reproduces_every_faulty_demo_failure(faulty_app: str, tmp_path) -> None:
    out = tmp_path / "run"
    report = run(sim_config(faulty_app, step_budget=1500, out_dir=str(out)))
    assert report["failures"]
    for failure in report["failures"]:
        outcome = replay_failure(out, failure["id"])
        assert outcome["reproduced"], outcome


def test_replay_unknown_failure_id(faulty_app: str, tmp_path) -> None:
    out = tmp_path / "run"
    run(sim_config(faulty_app, step_budget=200, out_dir=str(out)))
    with pytest.raises(ConfigError, match="not present"):
        replay_failure(out, 999)


# -- cli ----------------------------------------------------------------------------------


def test_cli_run_and_replay_roundtrip(faulty_app: str, tmp_path) -> None:
    out = tmp_path / "cli-run"
    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        [
            "run",
            "--backend", "sim",
            "--target", faulty_app,
            "--step-budget", "1500",
            "--seed", "3",
            "--lambda", "0.9",
            "--tau", "1.25",
            "--out-dir", str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "unique failures" in result.output
    report = json.loads((out / "report.json").read_text())
    assert report["failures"]
    assert report["config"]["discount"] == 0.9
    assert report["config"]["temperature"] == 1.25

    replay = runner.invoke(
        cli_main, ["replay", "--report", str(out), "--failure-id", "0"]
    )
    assert replay.exit_code == 0, replay.output
    assert json.loads(replay.output)["reproduced"] is True


def test_cli_baseline_random(gated_app: str, tmp_path) -> None:
    out = tmp_path / "cli-random"
    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        [
            "baseline-random",
            "--backend", "sim",
            "--target", gated_app,
            "--step-budget", "300",
            "--out-dir", str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["policy"] == "random"
    assert report["config"]["dfa_guidance"] is False


def test_cli_rejects_bad_target() -> None:
    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        ["run", "--backend", "sim", "--target", "/does/not/exist.app"],
    )
    assert result.exit_code == 1
    assert "error" in result.output


def test_cli_browser_backend_without_browser_fails_cleanly() -> None:
    from explor.browser import find_browser_binary

    if find_browser_binary() is not None:
        pytest.skip("a browser is installed; unavailability path not testable")
    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        ["run", "--backend", "browser", "--target", "http://127.0.0.1:1/"],
    )
    assert result.exit_code == 1
    assert "error" in result.output
