"""Environment backend driving a real headless browser over the DevTools
wire protocol.

Console exceptions become js_exception failures; HTTP responses with error
statuses become client_error / server_error failures. A dispatched action is
considered complete once the network has been idle for ``network_idle_ms``
(capped by ``max_wait_ms``), the standard crawler quiescence heuristic.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import subprocess
import tempfile
import time
import urllib.request
from dataclasses import dataclass
from urllib.parse import urlsplit

from ._ws import ConnectionClosed, WebSocketClient, WebSocketError
from .abstraction import actions_with_elements
from .env import (
    CLICK,
    FILL,
    NOOP,
    SELECT,
    BackendUnavailable,
    BoundAction,
    ElementInfo,
    Environment,
    ExecResult,
    Failure,
    Observation,
    Page,
    classify_status,
    is_external,
)

_BROWSER_CANDIDATES = (
    "chromium",
    "chromium-browser",
    "google-chrome",
    "google-chrome-stable",
    "chrome",
    "headless_shell",
)

_SNAPSHOT_JS = """
(() => {
  const nodes = Array.from(document.querySelectorAll('a,button,input,select,textarea'));
  const elements = nodes.map((el, index) => {
    const rect = el.getBoundingClientRect();
    const style = window.getComputedStyle(el);
    const visible = rect.width > 0 && rect.height > 0 &&
      style.display !== 'none' && style.visibility !== 'hidden';
    const attrs = {};
    for (const name of ['id', 'name', 'type', 'href', 'min', 'max',
                        'maxlength', 'pattern']) {
      const value = el.getAttribute(name);
      if (value !== null) attrs[name] = value;
    }
    let options = null;
    if (el.tagName === 'SELECT') {
      options = Array.from(el.options).map(o => o.value);
    }
    return {tag: el.tagName.toLowerCase(), attrs: attrs, visible: visible,
            center: [rect.left + rect.width / 2, rect.top + rect.height / 2],
            options: options, index: index};
  });
  const html = document.documentElement ? document.documentElement.outerHTML : '';
  return JSON.stringify({url: document.location.href, html: html, elements: elements});
})()
"""

_FILL_JS = """
(() => {
  const el = document.querySelectorAll('a,button,input,select,textarea')[%(index)d];
  if (!el) return 'missing';
  el.focus();
  el.value = %(value)s;
  el.dispatchEvent(new Event('input', {bubbles: true}));
  el.dispatchEvent(new Event('change', {bubbles: true}));
  return 'ok';
})()
"""


def find_browser_binary() -> str | None:
    """Locate a Chromium-family binary, honouring $EXPLOR_BROWSER."""
    override = os.environ.get("EXPLOR_BROWSER")
    if override:
        return override if shutil.which(override) or os.path.exists(override) else None
    for name in _BROWSER_CANDIDATES:
        path = shutil.which(name)
        if path:
            return path
    return None


def launch_browser(binary: str | None = None, timeout: float = 20.0):
    """Start a headless browser; returns (process, devtools_http_origin)."""
    binary = binary or find_browser_binary()
    if binary is None:
        raise BackendUnavailable("no headless browser binary found")
    profile = tempfile.mkdtemp(prefix="explor-profile-")
    proc = subprocess.Popen(
        [
            binary,
            "--headless=new",
            "--remote-debugging-port=0",
            "--no-sandbox",
            "--disable-gpu",
            "--disable-dev-shm-usage",
            "--no-first-run",
            f"--user-data-dir={profile}",
            "about:blank",
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.PIPE,
    )
    pattern = re.compile(r"DevTools listening on (ws://\S+)")
    deadline = time.monotonic() + timeout
    buffered = ""
    while time.monotonic() < deadline:
        line = proc.stderr.readline().decode("utf-8", "replace")
        if not line:
            if proc.poll() is not None:
                raise BackendUnavailable(f"browser exited early:\n{buffered}")
            time.sleep(0.05)
            continue
        buffered += line
        match = pattern.search(line)
        if match:
            ws = urlsplit(match.group(1))
            return proc, f"http://{ws.hostname}:{ws.port}"
    proc.kill()
    raise BackendUnavailable("browser did not announce a DevTools endpoint")


def page_ws_endpoint(devtools_origin: str, timeout: float = 10.0) -> str:
    """First page target's websocket URL from the /json listing."""
    deadline = time.monotonic() + timeout
    last_error = None
    while time.monotonic() < deadline:
        try:
            with urllib.request.urlopen(f"{devtools_origin}/json/list", timeout=2) as fh:
                targets = json.loads(fh.read().decode())
            for target in targets:
                if target.get("type") == "page" and target.get("webSocketDebuggerUrl"):
                    return target["webSocketDebuggerUrl"]
        except OSError as exc:
            last_error = exc
        time.sleep(0.1)
    raise BackendUnavailable(f"no page target exposed: {last_error}")


class CdpSession:
    """JSON-RPC over one DevTools page websocket, strictly synchronous.

    Asynchronous protocol events arriving between command responses are
    queued through ``on_event`` so the enclosing call can attribute them to
    the correct step.
    """

    def __init__(self, ws_url: str, on_event, timeout: float = 15.0):
        self._timeout = timeout
        self._on_event = on_event
        try:
            self._ws = WebSocketClient(ws_url, timeout=timeout)
        except (OSError, WebSocketError) as exc:
            raise BackendUnavailable(f"cannot reach DevTools endpoint: {exc}") from exc
        self._next_id = 0

    def _dispatch(self, raw: str) -> dict | None:
        message = json.loads(raw)
        if "id" in message:
            return message
        self._on_event(message.get("method", ""), message.get("params", {}))
        return None

    def call(self, method: str, params: dict | None = None, timeout: float | None = None) -> dict:
        """Send one command, pumping events until its response arrives.

        Retried once on a protocol hiccup before giving up, per the session
        error contract.
        """
        last_exc = None
        for _ in range(2):
            try:
                return self._call_once(method, params, timeout)
            except (WebSocketError, OSError, TimeoutError) as exc:
                last_exc = exc
                if isinstance(exc, ConnectionClosed):
                    break
        raise BackendUnavailable(f"DevTools call {method} failed: {last_exc}")

    def _call_once(self, method: str, params: dict | None, timeout: float | None) -> dict:
        self._next_id += 1
        message_id = self._next_id
        payload = {"id": message_id, "method": method}
        if params:
            payload["params"] = params
        self._ws.send_text(json.dumps(payload))
        deadline = time.monotonic() + (timeout or self._timeout)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no response to {method}")
            try:
                raw = self._ws.recv_text(timeout=remaining)
            except TimeoutError as exc:  # covers socket.timeout
                raise TimeoutError(f"no response to {method}") from exc
            response = self._dispatch(raw)
            if response is None:
                continue
            if response["id"] != message_id:
                continue
            if "error" in response:
                raise WebSocketError(f"{method}: {response['error'].get('message')}")
            return response.get("result", {})

    def pump(self, duration: float) -> None:
        """Process incoming events for ``duration`` seconds."""
        deadline = time.monotonic() + duration
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return
            try:
                raw = self._ws.recv_text(timeout=remaining)
            except ConnectionClosed:
                raise
            except (OSError, TimeoutError):
                return
            self._dispatch(raw)

    def close(self) -> None:
        self._ws.close()


@dataclass
class BrowserSession:
    """Connection settings for one page target."""

    endpoint: str
    target_domain: str
    network_idle_ms: int = 500
    max_wait_ms: int = 10000


@dataclass
class _RawFailure:
    kind: str
    message: str
    status: int | None
    url: str


class BrowserEnvironment(Environment):
    """Environment contract against a live browser page."""

    def __init__(
        self,
        target: str,
        endpoint: str | None = None,
        network_idle_ms: int = 500,
        max_wait_ms: int = 10000,
        browser_binary: str | None = None,
    ):
        self.target = target
        self.scope = urlsplit(target).hostname or ""
        self.session = BrowserSession(
            endpoint=endpoint or "",
            target_domain=self.scope,
            network_idle_ms=network_idle_ms,
            max_wait_ms=max_wait_ms,
        )
        self._proc = None
        if endpoint is None:
            self._proc, origin = launch_browser(browser_binary)
            endpoint = page_ws_endpoint(origin)
            self.session.endpoint = endpoint
        self._cdp = CdpSession(endpoint, self._on_event)
        self._inflight: set[str] = set()
        self._last_network_activity = time.monotonic()
        self._step_failures: list[_RawFailure] = []
        self._listeners_ready = False
        self._attach_listeners()
        self._current_page = Page(url="about:blank", html_doc="")
        self._current_elements: list[ElementInfo] = []

    # -- protocol events ------------------------------------------------------

    def _attach_listeners(self) -> None:
        # Listeners must be live before the first dispatch or failures
        # between dispatch and quiescence would be lost silently.
        self._cdp.call("Page.enable")
        self._cdp.call("Runtime.enable")
        self._cdp.call("Network.enable")
        self._listeners_ready = True

    def _on_event(self, method: str, params: dict) -> None:
        if method == "Network.requestWillBeSent":
            self._inflight.add(params.get("requestId", ""))
            self._last_network_activity = time.monotonic()
        elif method in ("Network.loadingFinished", "Network.loadingFailed"):
            self._inflight.discard(params.get("requestId", ""))
            self._last_network_activity = time.monotonic()
        elif method == "Network.responseReceived":
            response = params.get("response", {})
            status = int(response.get("status", 0))
            kind = classify_status(status)
            if kind is not None:
                self._step_failures.append(
                    _RawFailure(
                        kind=kind,
                        message=f"HTTP {status} for {response.get('url', '')}",
                        status=status,
                        url=response.get("url", ""),
                    )
                )
        elif method == "Runtime.exceptionThrown":
            details = params.get("exceptionDetails", {})
            exception = details.get("exception") or {}
            message = (
                exception.get("description")
                or details.get("text", "")
                or "uncaught exception"
            )
            self._step_failures.append(
                _RawFailure(
                    kind="js_exception",
                    message=message,
                    status=None,
                    url=details.get("url") or self._current_page.url,
                )
            )

    # -- quiescence ------------------------------------------------------------

    def _await_quiescence(self) -> None:
        idle = self.session.network_idle_ms / 1000.0
        deadline = time.monotonic() + self.session.max_wait_ms / 1000.0
        self._last_network_activity = time.monotonic()
        while time.monotonic() < deadline:
            self._cdp.pump(0.05)
            settled = time.monotonic() - self._last_network_activity
            if not self._inflight and settled >= idle:
                return

    # -- DOM snapshot ----------------------------------------------------------

    def snapshot_dom(self) -> Observation:
        """Current URL, serialized document, and per-element visibility."""
        result = self._cdp.call(
            "Runtime.evaluate",
            {"expression": _SNAPSHOT_JS, "returnByValue": True},
        )
        value = result.get("result", {}).get("value")
        if not isinstance(value, str):
            raise BackendUnavailable(f"snapshot evaluation failed: {result}")
        data = json.loads(value)
        elements = [
            ElementInfo(
                tag=e["tag"],
                attrs=dict(e["attrs"]),
                visible=bool(e["visible"]),
                options=e.get("options"),
                center=tuple(e["center"]),
                node_index=e["index"],
            )
            for e in data.get("elements", [])
        ]
        page = Page(url=data.get("url") or "about:blank", html_doc=data.get("html", ""))
        self._current_page = page
        self._current_elements = elements
        return Observation(page, elements)

    # -- dispatch ----------------------------------------------------------------

    def _locate(self, bound: BoundAction) -> ElementInfo | None:
        observation = self.snapshot_dom()
        pairs = actions_with_elements(observation.page, observation.elements, self.scope)
        wanted = bound.descriptor.action_id
        for descriptor, element in pairs:
            if descriptor.action_id == wanted:
                return element
        return None

    def dispatch(self, bound: BoundAction) -> bool:
        """Perform one action; False signals an unresolvable locator."""
        assert self._listeners_ready
        element = self._locate(bound)
        if element is None:
            return False
        kind = bound.descriptor.kind
        if kind == CLICK:
            href = element.attrs.get("href")
            if href and is_external(href, self.scope, base_url=self._current_page.url):
                # Second line of defense; externals are filtered upstream.
                return False
            x, y = element.center or (0, 0)
            for event_type in ("mousePressed", "mouseReleased"):
                self._cdp.call(
                    "Input.dispatchMouseEvent",
                    {
                        "type": event_type,
                        "x": x,
                        "y": y,
                        "button": "left",
                        "clickCount": 1,
                    },
                )
        elif kind in (FILL, SELECT):
            expression = _FILL_JS % {
                "index": element.node_index,
                "value": json.dumps(bound.input_value),
            }
            result = self._cdp.call(
                "Runtime.evaluate", {"expression": expression, "returnByValue": True}
            )
            if result.get("result", {}).get("value") != "ok":
                return False
        else:
            return True
        self._await_quiescence()
        self._enforce_scope()
        return True

    def _enforce_scope(self) -> None:
        """Navigate home if something still slipped off the target host."""
        result = self._cdp.call(
            "Runtime.evaluate",
            {"expression": "document.location.href", "returnByValue": True},
        )
        url = result.get("result", {}).get("value", "")
        if url and url != "about:blank" and is_external(url, self.scope):
            self._cdp.call("Page.navigate", {"url": self.target})
            self._await_quiescence()

    def collect_failures(self, step_index: int) -> list[Failure]:
        """Drain failures observed since the step's dispatch, tagged with it."""
        failures = [
            Failure(
                kind=raw.kind,
                message=raw.message,
                status=raw.status,
                url=raw.url,
                step=step_index,
            )
            for raw in self._step_failures
        ]
        self._step_failures.clear()
        return failures

    # -- Environment contract ------------------------------------------------------

    def now_ms(self) -> int:
        return int(time.monotonic() * 1000)

    def reset(self) -> Observation:
        self._step_failures.clear()
        self._cdp.call("Page.navigate", {"url": self.target})
        self._await_quiescence()
        return self.snapshot_dom()

    def execute(self, page: Page, actions: list[BoundAction]) -> ExecResult:
        failures: list[Failure] = []
        pages: list[Page] = []
        diverged_at = None
        for index, bound in enumerate(actions):
            self._step_failures.clear()
            if bound.descriptor.kind == NOOP:
                pages.append(self._current_page)
                continue
            ok = self.dispatch(bound)
            if not ok:
                diverged_at = index
                break
            observation = self.snapshot_dom()
            pages.append(observation.page)
            failures.extend(self.collect_failures(index))
        observation = self.snapshot_dom()
        return ExecResult(
            page=observation.page,
            elements=observation.elements,
            failures=failures,
            pages=pages,
            diverged_at=diverged_at,
        )

    def close(self) -> None:
        try:
            self._cdp.close()
        except Exception:
            pass
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait(timeout=10)
