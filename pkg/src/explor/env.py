"""Shared environment contract: pages, actions, failures, typed input generation.

Both execution backends (the in-process simulator and the live-browser driver)
implement the :class:`Environment` interface defined here, so the exploration
engine never has to know which one it is talking to.
"""

from __future__ import annotations

import random
import re
import string
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from urllib.parse import urljoin, urlsplit

CLICK = "click"
FILL = "fill"
SELECT = "select"
NOOP = "noop"

JS_EXCEPTION = "js_exception"
CLIENT_ERROR = "client_error"
SERVER_ERROR = "server_error"

FAILURE_KINDS = (JS_EXCEPTION, CLIENT_ERROR, SERVER_ERROR)


class ExplorError(Exception):
    """Base class for engine-level errors."""


class BackendUnavailable(ExplorError):
    """The target application or browser cannot be reached."""


class ConfigError(ExplorError):
    """A configuration file failed validation; the message names the field."""


class NoValidActions(ExplorError):
    """Selection was requested on a state with an empty valid-action set."""


class TargetUnreachable(ExplorError):
    """The chosen replay target has no path from the initial state."""

    def __init__(self, transition=None):
        super().__init__(f"no path to transition {transition!r}")
        self.transition = transition


class UnsupportedType(ExplorError):
    """Input generation saw a type it does not know."""


@dataclass(frozen=True)
class Page:
    """A concrete page observation: absolute URL plus the serialized document."""

    url: str
    html_doc: str

    def __post_init__(self):
        if not self.url:
            raise ValueError("page url must be non-empty")


@dataclass(frozen=True)
class Locator:
    """Stable element signature: tag, identifying attributes, ordinal tiebreak.

    The ordinal counts elements that share the same (tag, attrs) signature in
    document order, so two visually identical buttons stay distinguishable.
    """

    tag: str
    attrs: tuple[tuple[str, str], ...] = ()
    ordinal: int = 0

    def summary(self) -> str:
        inner = ",".join(f"{k}={v}" for k, v in self.attrs)
        return f"{self.tag}[{inner}]#{self.ordinal}"


@dataclass(frozen=True)
class InputConstraints:
    """Declared constraints of an inputtable element (W3C input attributes)."""

    input_type: str = "text"
    min: str | None = None
    max: str | None = None
    maxlength: int | None = None
    pattern: str | None = None
    options: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ActionDescriptor:
    """An operable element plus the interaction kind performed on it."""

    kind: str
    locator: Locator | None = None
    input_constraints: InputConstraints | None = None

    def __post_init__(self):
        if self.kind == NOOP and self.locator is not None:
            raise ValueError("the noop action carries no locator")
        if self.kind != NOOP and self.locator is None:
            raise ValueError(f"{self.kind} action requires a locator")

    @property
    def action_id(self) -> str:
        if self.kind == NOOP:
            return NOOP
        return f"{self.kind}:{self.locator.summary()}"

    @property
    def needs_input(self) -> bool:
        return self.kind in (FILL, SELECT)


EPSILON = ActionDescriptor(kind=NOOP)


@dataclass(frozen=True)
class BoundAction:
    """An action with its input value fixed at dispatch time."""

    descriptor: ActionDescriptor
    input_value: str | None = None

    def __post_init__(self):
        if self.descriptor.needs_input and self.input_value is None:
            raise ValueError("fill/select actions require an input value")
        if not self.descriptor.needs_input and self.input_value is not None:
            raise ValueError(f"{self.descriptor.kind} action takes no input value")


@dataclass(frozen=True)
class Failure:
    """An observed exception or HTTP error, attributed to a step."""

    kind: str
    message: str
    url: str
    step: int
    status: int | None = None

    def __post_init__(self):
        if self.kind not in FAILURE_KINDS:
            raise ValueError(f"unknown failure kind {self.kind!r}")
        if self.kind == JS_EXCEPTION and self.status is not None:
            raise ValueError("js_exception carries no status")
        if self.kind == CLIENT_ERROR and not (400 <= (self.status or 0) <= 499):
            raise ValueError("client_error requires a 4xx status")
        if self.kind == SERVER_ERROR and (self.status or 0) < 500:
            raise ValueError("server_error requires a status >= 500")

    def dedup_key(self) -> tuple[str, str, str]:
        # Unique-failure collapsing: kind + message prefix + url.
        return (self.kind, self.message[:200], self.url)


def classify_status(status: int) -> str | None:
    """Map an HTTP status code to a failure kind, or None when benign."""
    if 400 <= status <= 499:
        return CLIENT_ERROR
    if status >= 500:
        return SERVER_ERROR
    return None


@dataclass(frozen=True)
class Step:
    """One executed transition inside a test case."""

    prev: str
    action: BoundAction
    next: str


@dataclass
class TestCase:
    """An executed state-action sequence with bound inputs."""

    __test__ = False  # domain type, not a pytest class

    steps: list[Step]
    seed: int
    failed: bool = False

    def check_chain(self) -> bool:
        return all(
            a.next == b.prev for a, b in zip(self.steps, self.steps[1:])
        )


@dataclass
class ElementInfo:
    """Backend-supplied description of one DOM element."""

    tag: str
    attrs: dict[str, str] = field(default_factory=dict)
    visible: bool = True
    options: list[str] | None = None
    center: tuple[float, float] | None = None
    node_index: int | None = None


@dataclass
class Observation:
    """A page together with its element listing."""

    page: Page
    elements: list[ElementInfo]


@dataclass
class ExecResult:
    """Outcome of executing an action buffer.

    ``pages`` holds the page observed after each executed action (the last one
    equals ``page`` when at least one action ran); ``diverged_at`` is the index
    of the first action whose target could not be resolved, or None.
    Failure ``step`` fields index into the executed buffer.
    """

    page: Page
    elements: list[ElementInfo]
    failures: list[Failure]
    pages: list[Page]
    diverged_at: int | None = None

    @property
    def executed(self) -> int:
        return len(self.pages)


class Environment(ABC):
    """Synchronous request/response contract between engine and backend."""

    @abstractmethod
    def reset(self) -> Observation:
        """Navigate to the configured entry URL; server-side state is kept."""

    @abstractmethod
    def execute(self, page: Page, actions: list[BoundAction]) -> ExecResult:
        """Apply actions in order against the live application."""

    @abstractmethod
    def now_ms(self) -> int:
        """Current clock in milliseconds (logical on sim, wall on browser)."""

    def close(self) -> None:
        pass


# --- URL handling -----------------------------------------------------------

def normalize_url(url: str) -> str:
    """Canonical URL for state comparison: drop fragment and trailing slash."""
    parts = urlsplit(url)
    path = parts.path.rstrip("/") or ""
    norm = f"{parts.scheme}://{parts.netloc}{path}"
    if parts.query:
        norm += f"?{parts.query}"
    return norm


_IP_RE = re.compile(r"^\d{1,3}(\.\d{1,3}){3}$")


def registrable_host(host: str) -> str:
    """Approximate registrable domain: last two labels of a dotted name.

    IPs and single-label hosts (localhost) compare whole.
    """
    host = host.lower().rstrip(".")
    if _IP_RE.match(host) or "." not in host:
        return host
    return ".".join(host.split(".")[-2:])


def is_external(link_target: str, scope: str, base_url: str | None = None) -> bool:
    """True when following the link would leave the configured target host.

    Malformed or non-HTTP targets count as external so they are never
    dispatched. Relative links resolve against ``base_url`` when given.
    """
    try:
        resolved = urljoin(base_url, link_target) if base_url else link_target
        parts = urlsplit(resolved)
    except ValueError:
        return True
    if not parts.netloc:
        # Relative link with no base: stays on the current host.
        return parts.scheme not in ("", "http", "https")
    if parts.scheme not in ("http", "https"):
        return True
    scope_host = urlsplit(scope).hostname if "//" in scope else scope
    if not scope_host:
        return True
    link_host = parts.hostname or ""
    return registrable_host(link_host) != registrable_host(scope_host)


# --- Input generation -------------------------------------------------------

_WORD_CHARS = string.ascii_lowercase + string.digits


class _PatternUnsupported(Exception):
    pass


def _gen_from_pattern(pattern: str, rng: random.Random) -> str:
    """Produce a string matching a constrained regex subset.

    Supports literals, escapes (\\d \\w \\s .), character classes with ranges,
    groups with alternation, and the quantifiers ? * + {m} {m,n}. Anything
    else raises and the caller falls back.
    """
    pos = 0

    def parse_alternatives(stop_at_paren: bool) -> str:
        nonlocal pos
        branches = [""]
        while pos < len(pattern):
            ch = pattern[pos]
            if ch == ")" and stop_at_paren:
                return rng.choice(branches)
            if ch == "|":
                pos += 1
                branches.append("")
                continue
            branches[-1] += parse_piece()
        if stop_at_paren:
            raise _PatternUnsupported("unbalanced group")
        return rng.choice(branches)

    def parse_piece() -> str:
        nonlocal pos
        ch = pattern[pos]
        if ch in "^$":
            pos += 1
            return ""
        atom = parse_atom()
        lo, hi = 1, 1
        if pos < len(pattern) and pattern[pos] in "?*+{":
            q = pattern[pos]
            if q == "?":
                lo, hi = 0, 1
                pos += 1
            elif q == "*":
                lo, hi = 0, 3
                pos += 1
            elif q == "+":
                lo, hi = 1, 3
                pos += 1
            else:
                end = pattern.find("}", pos)
                if end < 0:
                    raise _PatternUnsupported("unterminated quantifier")
                body = pattern[pos + 1 : end]
                pos = end + 1
                if "," in body:
                    a, b = body.split(",", 1)
                    lo = int(a)
                    hi = int(b) if b else lo + 2
                else:
                    lo = hi = int(body)
        n = rng.randint(lo, hi)
        return "".join(atom() for _ in range(n))

    def parse_atom():
        nonlocal pos
        ch = pattern[pos]
        if ch == "(":
            pos += 1
            depth_start = pos
            # Generate lazily is awkward for repeats; capture the group body
            # and re-generate per repetition.
            depth = 1
            i = pos
            while i < len(pattern) and depth:
                if pattern[i] == "\\":
                    i += 2
                    continue
                if pattern[i] == "(":
                    depth += 1
                elif pattern[i] == ")":
                    depth -= 1
                i += 1
            if depth:
                raise _PatternUnsupported("unbalanced group")
            body = pattern[depth_start : i - 1]
            pos = i
            return lambda: _gen_from_pattern(body, rng)
        if ch == "[":
            end = pos
            while True:
                end = pattern.find("]", end + 1)
                if end < 0:
                    raise _PatternUnsupported("unterminated class")
                if pattern[end - 1] != "\\":
                    break
            body = pattern[pos + 1 : end]
            pos = end + 1
            if body.startswith("^"):
                raise _PatternUnsupported("negated class")
            chars = _expand_class(body)
            return lambda: rng.choice(chars)
        if ch == "\\":
            if pos + 1 >= len(pattern):
                raise _PatternUnsupported("dangling escape")
            esc = pattern[pos + 1]
            pos += 2
            table = {"d": string.digits, "w": string.ascii_letters + string.digits + "_", "s": " "}
            if esc in table:
                choices = table[esc]
                return lambda: rng.choice(choices)
            if esc.isalnum():
                raise _PatternUnsupported(f"escape \\{esc}")
            return lambda: esc
        if ch == ".":
            pos += 1
            return lambda: rng.choice(_WORD_CHARS)
        if ch in "*+?{})":
            raise _PatternUnsupported(f"unexpected {ch!r}")
        pos += 1
        return lambda: ch

    def _expand_class(body: str) -> str:
        out = []
        i = 0
        while i < len(body):
            if body[i] == "\\" and i + 1 < len(body):
                esc = body[i + 1]
                if esc == "d":
                    out.extend(string.digits)
                elif esc == "w":
                    out.extend(string.ascii_letters + string.digits + "_")
                else:
                    out.append(esc)
                i += 2
                continue
            if i + 2 < len(body) and body[i + 1] == "-":
                lo_c, hi_c = body[i], body[i + 2]
                if ord(lo_c) > ord(hi_c):
                    raise _PatternUnsupported("bad range")
                out.extend(chr(c) for c in range(ord(lo_c), ord(hi_c) + 1))
                i += 3
                continue
            out.append(body[i])
            i += 1
        if not out:
            raise _PatternUnsupported("empty class")
        return "".join(out)

    value = parse_alternatives(stop_at_paren=False)
    return value


def _random_word(rng: random.Random, lo: int, hi: int) -> str:
    return "".join(rng.choice(_WORD_CHARS) for _ in range(rng.randint(lo, hi)))


def _bounded_text(rng: random.Random, maxlength: int | None) -> str:
    hi = 12
    if maxlength is not None:
        hi = max(1, min(hi, maxlength))
    return _random_word(rng, 1, hi)


def _gen_number(c: InputConstraints, rng: random.Random) -> str:
    lo = int(float(c.min)) if c.min is not None else 0
    hi = int(float(c.max)) if c.max is not None else max(lo, 100)
    if hi < lo:
        lo, hi = hi, lo
    return str(rng.randint(lo, hi))


def _gen_date(c: InputConstraints, rng: random.Random) -> str:
    lo = date.fromisoformat(c.min) if c.min else date(2000, 1, 1)
    hi = date.fromisoformat(c.max) if c.max else date(2030, 12, 31)
    if hi < lo:
        lo, hi = hi, lo
    span = (hi - lo).days
    return (lo + timedelta(days=rng.randint(0, span))).isoformat()


def _gen_time(c: InputConstraints, rng: random.Random) -> str:
    def minutes(v: str) -> int:
        h, m = v.split(":")[:2]
        return int(h) * 60 + int(m)

    lo = minutes(c.min) if c.min else 0
    hi = minutes(c.max) if c.max else 23 * 60 + 59
    if hi < lo:
        lo, hi = hi, lo
    total = rng.randint(lo, hi)
    return f"{total // 60:02d}:{total % 60:02d}"


def generate_input(constraints: InputConstraints | None, rng: random.Random) -> str:
    """Produce a value valid for the declared input type and its constraints.

    Unknown types fall back to a bounded random ASCII string. Patterns are
    honoured for the documented regex subset; generated values are verified
    with a full match before being returned.
    """
    c = constraints or InputConstraints()
    kind = (c.input_type or "text").lower()

    if c.pattern:
        for _ in range(20):
            try:
                value = _gen_from_pattern(c.pattern, rng)
            except (_PatternUnsupported, ValueError):
                break
            if c.maxlength is not None and len(value) > c.maxlength:
                continue
            try:
                if re.fullmatch(c.pattern, value):
                    return value
            except re.error:
                break
        # Unsupported pattern: fall through to the typed generator.

    if kind in ("text", "password", "search", "tel"):
        return _bounded_text(rng, c.maxlength)
    if kind == "email":
        return f"{_random_word(rng, 3, 8)}@{_random_word(rng, 3, 8)}.{rng.choice(['com', 'org', 'net'])}"
    if kind == "number":
        return _gen_number(c, rng)
    if kind == "date":
        return _gen_date(c, rng)
    if kind == "time":
        return _gen_time(c, rng)
    if kind == "url":
        return f"https://{_random_word(rng, 3, 8)}.{rng.choice(['com', 'org', 'net'])}/{_random_word(rng, 1, 6)}"
    if kind in ("checkbox", "radio"):
        return "on"
    if kind == "select":
        if c.options:
            return rng.choice(list(c.options))
        return _bounded_text(rng, c.maxlength)
    # Documented fallback for unrecognized types.
    return _bounded_text(rng, c.maxlength)


def bind_action(
    descriptor: ActionDescriptor, rng: random.Random
) -> BoundAction:
    """Bind an input value for fill/select descriptors; pass others through."""
    if not descriptor.needs_input:
        return BoundAction(descriptor)
    constraints = descriptor.input_constraints
    if descriptor.kind == SELECT and constraints is not None:
        constraints = replace(constraints, input_type="select")
    return BoundAction(descriptor, generate_input(constraints, rng))
