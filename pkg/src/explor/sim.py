"""Deterministic configuration-driven web application simulator.

A sim app is a JSON file describing pages (URL, tag skeleton, optional
per-visit mutation) and actions (locator, kind, guard over flag variables,
flag effects, destination, optional injected failure). Guards model
business-logic gating: a gated action is simply absent from the page's
element listing until its guard becomes true. Everything is a pure function
of (config, action sequence), which is what makes engine runs replayable.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field
from pathlib import Path

from .abstraction import retrieve_valid_actions
from .env import (
    CLICK,
    FILL,
    NOOP,
    SELECT,
    BoundAction,
    ConfigError,
    ElementInfo,
    Environment,
    ExecResult,
    Failure,
    InputConstraints,
    Observation,
    Page,
)

_KIND_TAGS = {
    CLICK: {"a", "button", "input"},
    FILL: {"input", "textarea"},
    SELECT: {"select"},
}

_ALLOWED_GUARD_NODES = (
    ast.Expression,
    ast.BoolOp,
    ast.And,
    ast.Or,
    ast.UnaryOp,
    ast.Not,
    ast.Name,
    ast.Load,
    ast.Compare,
    ast.Eq,
    ast.NotEq,
    ast.Lt,
    ast.LtE,
    ast.Gt,
    ast.GtE,
    ast.Constant,
)


def _parse_guard(expr: str, where: str) -> ast.Expression:
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{where}: guard does not parse: {exc}") from exc
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_GUARD_NODES):
            raise ConfigError(
                f"{where}: guard uses unsupported syntax {type(node).__name__}"
            )
        if isinstance(node, ast.Constant) and not isinstance(node.value, (bool, int)):
            raise ConfigError(f"{where}: guard constants must be bool or int")
    return tree


def _guard_names(tree: ast.Expression) -> set[str]:
    return {node.id for node in ast.walk(tree) if isinstance(node, ast.Name)}


def _eval_guard(tree: ast.Expression, flags: dict[str, bool | int]) -> bool:
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            return flags[node.id]
        if isinstance(node, ast.UnaryOp):
            return not ev(node.operand)
        if isinstance(node, ast.BoolOp):
            values = [ev(v) for v in node.values]
            return all(values) if isinstance(node.op, ast.And) else any(values)
        if isinstance(node, ast.Compare):
            left = ev(node.left)
            for op, comparator in zip(node.ops, node.comparators):
                right = ev(comparator)
                ok = {
                    ast.Eq: left == right,
                    ast.NotEq: left != right,
                    ast.Lt: left < right,
                    ast.LtE: left <= right,
                    ast.Gt: left > right,
                    ast.GtE: left >= right,
                }[type(op)]
                if not ok:
                    return False
                left = right
            return True
        raise ConfigError(f"guard node {type(node).__name__} not evaluable")

    return bool(ev(tree))


@dataclass
class SimAction:
    """One operable element of a sim page and what executing it does."""

    locator_tag: str
    locator_attrs: dict[str, str]
    kind: str
    destination: str
    guard: str | None = None
    guard_tree: ast.Expression | None = None
    effects: dict[str, bool | int] = field(default_factory=dict)
    injected_failure: dict | None = None
    input_constraints: InputConstraints | None = None
    hidden: bool = False

    def open_for(self, flags: dict[str, bool | int]) -> bool:
        if self.guard_tree is None:
            return True
        return _eval_guard(self.guard_tree, flags)


@dataclass
class MutationRule:
    """Per-visit tag appending with bounded growth."""

    tag: str
    per_visit: int = 1
    max_extra: int | None = None

    def extra_tags(self, visits: int) -> int:
        extra = max(0, visits - 1) * self.per_visit
        if self.max_extra is not None:
            extra = min(extra, self.max_extra)
        return extra


@dataclass
class SimPage:
    page_id: str
    url: str
    tag_skeleton: list[str]
    actions: list[SimAction]
    dynamic_mutation: MutationRule | None = None


@dataclass
class SimAppConfig:
    name: str
    entry_page: str
    flags: dict[str, bool | int]
    pages: dict[str, SimPage]


def _parse_action(raw: dict, where: str, declared_flags: set[str]) -> SimAction:
    locator = raw.get("locator")
    if not isinstance(locator, dict) or "tag" not in locator:
        raise ConfigError(f"{where}.locator: must be an object with a tag")
    kind = raw.get("kind")
    if kind not in _KIND_TAGS:
        raise ConfigError(f"{where}.kind: expected one of {sorted(_KIND_TAGS)}, got {kind!r}")
    tag = str(locator["tag"]).lower()
    if tag not in _KIND_TAGS[kind]:
        raise ConfigError(f"{where}.locator.tag: {tag!r} cannot carry kind {kind!r}")
    if "destination" not in raw:
        raise ConfigError(f"{where}.destination: required")

    guard = raw.get("guard")
    guard_tree = None
    if guard is not None:
        guard_tree = _parse_guard(str(guard), f"{where}.guard")
        unknown = _guard_names(guard_tree) - declared_flags
        if unknown:
            raise ConfigError(
                f"{where}.guard: references undeclared flags {sorted(unknown)}"
            )

    effects = raw.get("effects") or {}
    if not isinstance(effects, dict):
        raise ConfigError(f"{where}.effects: must be an object")
    for name, value in effects.items():
        if name not in declared_flags:
            raise ConfigError(f"{where}.effects.{name}: flag not declared")
        if not isinstance(value, (bool, int)):
            raise ConfigError(f"{where}.effects.{name}: value must be bool or int")

    failure = raw.get("injected_failure")
    if failure is not None:
        if not isinstance(failure, dict) or "kind" not in failure:
            raise ConfigError(f"{where}.injected_failure: must declare a kind")
        probe = {
            "kind": failure["kind"],
            "message": failure.get("message", ""),
            "status": failure.get("status"),
        }
        try:
            Failure(url="probe://", step=0, **probe)
        except ValueError as exc:
            raise ConfigError(f"{where}.injected_failure: {exc}") from exc

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

    attrs = {str(k): str(v) for k, v in locator.items() if k != "tag"}
    return SimAction(
        locator_tag=tag,
        locator_attrs=attrs,
        kind=kind,
        destination=str(raw["destination"]),
        guard=guard,
        guard_tree=guard_tree,
        effects=dict(effects),
        injected_failure=failure,
        input_constraints=constraints,
        hidden=bool(raw.get("hidden", False)),
    )


def load_config(path: str | Path) -> SimAppConfig:
    """Parse and eagerly validate a sim app file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    flags = raw.get("flags") or {}
    if not isinstance(flags, dict):
        raise ConfigError("flags: must be an object")
    for name, value in flags.items():
        if not isinstance(value, (bool, int)):
            raise ConfigError(f"flags.{name}: initial value must be bool or int")
    declared = set(flags)

    pages_raw = raw.get("pages")
    if not isinstance(pages_raw, dict) or not pages_raw:
        raise ConfigError("pages: must be a non-empty object")

    pages: dict[str, SimPage] = {}
    for page_id, page_raw in pages_raw.items():
        where = f"pages.{page_id}"
        url = page_raw.get("url_template")
        if not url:
            raise ConfigError(f"{where}.url_template: required")
        skeleton = page_raw.get("tag_skeleton")
        if not isinstance(skeleton, list) or not all(isinstance(t, str) for t in skeleton):
            raise ConfigError(f"{where}.tag_skeleton: must be a list of tag names")
        mutation = None
        if page_raw.get("dynamic_mutation"):
            m = page_raw["dynamic_mutation"]
            if "tag" not in m:
                raise ConfigError(f"{where}.dynamic_mutation.tag: required")
            mutation = MutationRule(
                tag=str(m["tag"]),
                per_visit=int(m.get("per_visit", 1)),
                max_extra=m.get("max_extra"),
            )
        actions = [
            _parse_action(a, f"{where}.actions[{i}]", declared)
            for i, a in enumerate(page_raw.get("actions") or [])
        ]
        pages[page_id] = SimPage(
            page_id=page_id,
            url=str(url),
            tag_skeleton=[t.lower() for t in skeleton],
            actions=actions,
            dynamic_mutation=mutation,
        )

    entry = raw.get("entry_page")
    if entry not in pages:
        raise ConfigError(f"entry_page: {entry!r} is not a declared page")
    for page_id, page in pages.items():
        for i, action in enumerate(page.actions):
            if action.destination not in pages:
                raise ConfigError(
                    f"pages.{page_id}.actions[{i}].destination: "
                    f"{action.destination!r} is not a declared page"
                )

    return SimAppConfig(
        name=str(raw.get("name", path.stem)),
        entry_page=entry,
        flags=dict(flags),
        pages=pages,
    )


class SimEnvironment(Environment):
    """In-process Environment over a sim app config.

    reset() navigates to the entry page without touching flags or visit
    counters: server-side state persists, which is what keeps gated actions
    open once their prerequisites ran. The clock is logical, one millisecond
    per navigation or dispatched action, so whole runs are reproducible.
    """

    def __init__(self, config: SimAppConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.flags: dict[str, bool | int] = dict(config.flags)
        self.visit_counters: dict[str, int] = {p: 0 for p in config.pages}
        self._clock_ms = 0
        self._current_pid = config.entry_page
        self._current_page: Page | None = None

    # -- state snapshots (used for faithful test-case replay) --------------

    def snapshot_state(self) -> dict:
        return {
            "flags": dict(self.flags),
            "visit_counters": dict(self.visit_counters),
        }

    def restore_state(self, snapshot: dict) -> None:
        self.flags = dict(snapshot["flags"])
        self.visit_counters = dict(snapshot["visit_counters"])

    # -- rendering ----------------------------------------------------------

    def render(self, page_id: str) -> Page:
        """Render a page, advancing its visit counter first.

        The document is the tag skeleton plus any mutation-appended tags, so
        raw documents may differ across visits while staying similar.
        """
        spec = self.config.pages[page_id]
        self.visit_counters[page_id] += 1
        tags = list(spec.tag_skeleton)
        if spec.dynamic_mutation:
            extra = spec.dynamic_mutation.extra_tags(self.visit_counters[page_id])
            tags.extend([spec.dynamic_mutation.tag] * extra)
        doc = "".join(f"<{t}></{t}>" for t in tags)
        return Page(url=spec.url, html_doc=doc)

    def _open_actions(self, page_id: str) -> list[SimAction]:
        return [
            a for a in self.config.pages[page_id].actions if a.open_for(self.flags)
        ]

    def _elements(self, page_id: str) -> list[ElementInfo]:
        out = []
        for action in self._open_actions(page_id):
            options = None
            if action.input_constraints and action.input_constraints.options:
                options = list(action.input_constraints.options)
            attrs = dict(action.locator_attrs)
            if action.input_constraints:
                c = action.input_constraints
                if action.locator_tag == "input":
                    attrs.setdefault("type", c.input_type)
                for key, value in (
                    ("min", c.min),
                    ("max", c.max),
                    ("maxlength", c.maxlength),
                    ("pattern", c.pattern),
                ):
                    if value is not None:
                        attrs.setdefault(key, str(value))
            out.append(
                ElementInfo(
                    tag=action.locator_tag,
                    attrs=attrs,
                    visible=not action.hidden,
                )
            )
        return out

    def _dispatch_table(self, page: Page, page_id: str) -> dict[str, SimAction]:
        """Map action ids (as the engine computes them) to sim actions."""
        open_visible = [a for a in self._open_actions(page_id) if not a.hidden]
        descriptors = retrieve_valid_actions(page, self._elements(page_id))
        return {d.action_id: a for d, a in zip(descriptors, open_visible)}

    # -- Environment contract ------------------------------------------------

    def now_ms(self) -> int:
        return self._clock_ms

    def reset(self) -> Observation:
        self._clock_ms += 1
        self._current_pid = self.config.entry_page
        self._current_page = self.render(self._current_pid)
        return Observation(self._current_page, self._elements(self._current_pid))

    def execute(self, page: Page, actions: list[BoundAction]) -> ExecResult:
        if self._current_page is None:
            self.reset()
        failures: list[Failure] = []
        pages: list[Page] = []
        diverged_at = None
        for index, bound in enumerate(actions):
            if bound.descriptor.kind == NOOP:
                self._clock_ms += 1
                pages.append(self._current_page)
                continue
            table = self._dispatch_table(self._current_page, self._current_pid)
            sim_action = table.get(bound.descriptor.action_id)
            if sim_action is None:
                diverged_at = index
                break
            self._clock_ms += 1
            self.flags.update(sim_action.effects)
            destination = sim_action.destination
            if sim_action.injected_failure:
                f = sim_action.injected_failure
                failures.append(
                    Failure(
                        kind=f["kind"],
                        message=f.get("message", ""),
                        status=f.get("status"),
                        url=self.config.pages[destination].url,
                        step=index,
                    )
                )
            self._current_pid = destination
            self._current_page = self.render(destination)
            pages.append(self._current_page)
        return ExecResult(
            page=self._current_page,
            elements=self._elements(self._current_pid),
            failures=failures,
            pages=pages,
            diverged_at=diverged_at,
        )
