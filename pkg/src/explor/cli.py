"""Command-line interface: run explorations, replay stored failures."""

from __future__ import annotations

import json
import sys

import click

from .engine import (
    POLICY_CURIOSITY,
    POLICY_RANDOM,
    RunConfig,
    replay_failure,
    run as run_engine,
)
from .env import BackendUnavailable, ConfigError


def _run_options(fn):
    options = [
        click.option("--backend", type=click.Choice(["sim", "browser"]), required=True),
        click.option("--target", required=True, help="Sim app config path or target URL."),
        click.option("--time-budget-secs", type=float, default=1800.0, show_default=True),
        click.option("--max-steps", type=int, default=100, show_default=True,
                      help="Maximum steps per episode."),
        click.option("--stuck-threshold", type=float, default=None,
                      help="Seconds without a new state (browser) or steps (sim) "
                           "before automaton-guided replay kicks in. "
                           "Defaults: 120 s browser, 200 steps sim."),
        click.option("--similarity-threshold", type=float, default=0.8, show_default=True),
        click.option("--lambda", "discount", type=float, default=0.95, show_default=True,
                      help="Q-learning discount factor."),
        click.option("--tau", "temperature", type=float, default=1.0, show_default=True,
                      help="Selection temperature."),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--out-dir", type=click.Path(), default=None),
        click.option("--export-dfa", is_flag=True, default=False,
                      help="Also write dfa.dot into the out dir."),
        click.option("--step-budget", type=int, default=None,
                      help="Stop after this many total environment steps."),
        click.option("--no-dfa", "no_dfa", is_flag=True, default=False,
                      help="Disable automaton-guided replay (ablation)."),
        click.option("--server-errors-only", is_flag=True, default=False,
                      help="Ignore 4xx responses; record only >=500 and JS exceptions."),
        click.option("--network-idle-ms", type=int, default=500, show_default=True),
        click.option("--max-wait-ms", type=int, default=10000, show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_config(policy: str, **kw) -> RunConfig:
    return RunConfig(
        backend=kw["backend"],
        target=kw["target"],
        time_budget_secs=kw["time_budget_secs"],
        max_steps_per_episode=kw["max_steps"],
        stuck_threshold=kw["stuck_threshold"],
        similarity_threshold=kw["similarity_threshold"],
        discount=kw["discount"],
        temperature=kw["temperature"],
        seed=kw["seed"],
        out_dir=kw["out_dir"],
        export_dfa=kw["export_dfa"],
        step_budget=kw["step_budget"],
        policy=policy,
        dfa_guidance=not kw["no_dfa"],
        server_errors_only=kw["server_errors_only"],
        network_idle_ms=kw["network_idle_ms"],
        max_wait_ms=kw["max_wait_ms"],
    )


def _execute(config: RunConfig) -> None:
    try:
        report = run_engine(config)
    except (ConfigError, BackendUnavailable) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(
        f"done: {report['total_steps']} steps, {report['episodes']} episodes, "
        f"{len(report['states'])} states, {len(report['failures'])} unique failures"
    )
    if config.out_dir:
        click.echo(f"report written to {config.out_dir}")


@click.group()
def main() -> None:
    """Curiosity-driven web exploration and testing engine."""


@main.command("run")
@_run_options
def run_cmd(**kw) -> None:
    """Explore with the learned policy plus automaton guidance."""
    _execute(_build_config(POLICY_CURIOSITY, **kw))


@main.command("baseline-random")
@_run_options
def baseline_random_cmd(**kw) -> None:
    """Ablation: uniform-random action selection, no automaton guidance."""
    kw["no_dfa"] = True
    _execute(_build_config(POLICY_RANDOM, **kw))


@main.command("replay")
@click.option("--report", "report_dir", type=click.Path(exists=True), required=True)
@click.option("--failure-id", type=int, required=True)
def replay_cmd(report_dir: str, failure_id: int) -> None:
    """Re-execute a stored failing test case and print reproduction status."""
    try:
        outcome = replay_failure(report_dir, failure_id)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(json.dumps(outcome, indent=1))
    sys.exit(0 if outcome["reproduced"] else 2)


if __name__ == "__main__":
    main()
