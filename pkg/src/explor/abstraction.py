"""HTML page clustering into abstract states, plus operable-action extraction.

A page joins an existing state only when its normalized URL matches the
state's canonical URL and its tag sequence is similar enough to the state's
frozen representative. Representatives never mutate, so clusters cannot
drift under dynamically updated content.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from difflib import SequenceMatcher
from html.parser import HTMLParser
from urllib.parse import urljoin, urlsplit

from .env import (
    CLICK,
    FILL,
    SELECT,
    ActionDescriptor,
    ElementInfo,
    InputConstraints,
    Locator,
    Page,
    is_external,
    normalize_url,
)

TagSequence = tuple[str, ...]


class _TagCollector(HTMLParser):
    """Lenient parse that records every element start tag in document order."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.tags: list[str] = []

    def handle_starttag(self, tag, attrs):
        self.tags.append(tag.lower())

    def handle_startendtag(self, tag, attrs):
        self.tags.append(tag.lower())


def extract_tag_sequence(html_doc: str) -> TagSequence:
    """All element tags of the document, lowercased, in document order.

    No filtering is applied; malformed markup is recovered leniently and
    never raises.
    """
    collector = _TagCollector()
    try:
        collector.feed(html_doc)
        collector.close()
    except Exception:
        # Keep whatever was recovered before the parser gave up.
        pass
    return tuple(collector.tags)


def sequence_similarity(a: TagSequence, b: TagSequence) -> float:
    """Gestalt pattern-matching ratio 2M/(|a|+|b|) over matched blocks.

    Two empty sequences count as identical (ratio 1.0). autojunk must stay
    off: the popularity heuristic would silently drop common tags on long
    documents. Arguments are compared in a canonical order because the
    longest-block tie-breaking is direction-sensitive and the similarity
    must be symmetric.
    """
    if not a and not b:
        return 1.0
    a, b = tuple(a), tuple(b)
    if b < a:
        a, b = b, a
    return SequenceMatcher(None, a, b, autojunk=False).ratio()


@dataclass
class AbstractState:
    """A cluster of concrete pages judged to share business logic."""

    id: str
    canonical_url: str
    representative_tags: TagSequence
    visit_count: int = 0


class StateRegistry:
    """Ordered collection of abstract states with first-match assignment."""

    def __init__(self, similarity_threshold: float = 0.8):
        if not 0.0 < similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must be in (0, 1]")
        self.similarity_threshold = similarity_threshold
        self.states: list[AbstractState] = []
        self._by_id: dict[str, AbstractState] = {}
        # Exact-document fast path; sound because states are append-only and
        # scanned in a fixed order, so an identical page always re-resolves
        # to the same state.
        self._exact: dict[tuple[str, str], str] = {}

    def __len__(self) -> int:
        return len(self.states)

    def get(self, state_id: str) -> AbstractState:
        return self._by_id[state_id]

    @property
    def distinct_documents(self) -> int:
        """Number of distinct (url, raw document) pairs seen so far."""
        return len(self._exact)

    def assign(self, page: Page) -> str:
        """Map a page to its abstract state, creating one when nothing matches."""
        norm = normalize_url(page.url)
        doc_key = (norm, hashlib.sha1(page.html_doc.encode("utf-8", "replace")).hexdigest())
        cached = self._exact.get(doc_key)
        if cached is not None:
            self._by_id[cached].visit_count += 1
            return cached

        tags = extract_tag_sequence(page.html_doc)
        for state in self.states:
            if state.canonical_url != norm:
                continue
            if sequence_similarity(state.representative_tags, tags) > self.similarity_threshold:
                state.visit_count += 1
                self._exact[doc_key] = state.id
                return state.id

        state = AbstractState(
            id=f"s{len(self.states)}",
            canonical_url=norm,
            representative_tags=tags,
            visit_count=1,
        )
        self.states.append(state)
        self._by_id[state.id] = state
        self._exact[doc_key] = state.id
        return state.id

    def snapshot(self, first_seen: dict[str, int] | None = None) -> list[dict]:
        first_seen = first_seen or {}
        return [
            {
                "id": s.id,
                "canonical_url": s.canonical_url,
                "first_seen_step": first_seen.get(s.id, 0),
                "visit_count": s.visit_count,
            }
            for s in self.states
        ]


_STABLE_ATTRS = ("id", "name", "type")
_CLICK_INPUT_TYPES = {"submit", "button", "reset", "image", "checkbox", "radio"}
_SKIP_INPUT_TYPES = {"hidden", "file"}


def _stable_attrs(element: ElementInfo, page_url: str) -> tuple[tuple[str, str], ...]:
    out = []
    for key in _STABLE_ATTRS:
        value = element.attrs.get(key)
        if value:
            out.append((key, value))
    href = element.attrs.get("href")
    if href:
        out.append(("href", urlsplit(urljoin(page_url, href)).path))
    return tuple(out)


def _constraints_from(element: ElementInfo, input_type: str) -> InputConstraints:
    attrs = element.attrs
    maxlength = None
    if attrs.get("maxlength", "").isdigit():
        maxlength = int(attrs["maxlength"])
    return InputConstraints(
        input_type=input_type,
        min=attrs.get("min"),
        max=attrs.get("max"),
        maxlength=maxlength,
        pattern=attrs.get("pattern"),
        options=tuple(element.options) if element.options else None,
    )


def actions_with_elements(
    page: Page,
    elements: list[ElementInfo],
    scope: str | None = None,
) -> list[tuple[ActionDescriptor, ElementInfo]]:
    """Like :func:`retrieve_valid_actions` but keeps the source element of
    each descriptor, which backends need to dispatch against live DOMs."""
    ordinals: dict[tuple, int] = {}
    actions: list[tuple[ActionDescriptor, ElementInfo]] = []
    for element in elements:
        if not element.visible:
            continue
        tag = element.tag.lower()
        kind = None
        constraints = None
        if tag == "a":
            href = element.attrs.get("href")
            if not href:
                continue
            if scope is not None and is_external(href, scope, base_url=page.url):
                continue
            kind = CLICK
        elif tag == "button":
            kind = CLICK
        elif tag == "input":
            itype = element.attrs.get("type", "text").lower()
            if itype in _SKIP_INPUT_TYPES:
                continue
            if itype in _CLICK_INPUT_TYPES:
                kind = CLICK
            else:
                kind = FILL
                constraints = _constraints_from(element, itype)
        elif tag == "textarea":
            kind = FILL
            constraints = _constraints_from(element, "text")
        elif tag == "select":
            kind = SELECT
            constraints = _constraints_from(element, "select")
        else:
            continue

        attrs = _stable_attrs(element, page.url)
        ordinal_key = (tag, attrs)
        ordinal = ordinals.get(ordinal_key, 0)
        ordinals[ordinal_key] = ordinal + 1
        descriptor = ActionDescriptor(
            kind=kind,
            locator=Locator(tag=tag, attrs=attrs, ordinal=ordinal),
            input_constraints=constraints,
        )
        actions.append((descriptor, element))
    return actions


def retrieve_valid_actions(
    page: Page,
    elements: list[ElementInfo],
    scope: str | None = None,
) -> list[ActionDescriptor]:
    """Operable, visible elements of the page as action descriptors.

    Keeps clickable buttons, links, input boxes and selectors in document
    order; invisible elements are dropped. Links whose resolved target leaves
    ``scope`` (when given) are marked invalid and excluded.
    """
    return [descriptor for descriptor, _ in actions_with_elements(page, elements, scope)]


def abstract(
    page: Page,
    elements: list[ElementInfo],
    registry: StateRegistry,
    scope: str | None = None,
) -> tuple[str, list[ActionDescriptor]]:
    """Pre-processing step: abstract state id plus the page's valid actions.

    The action list always comes from the current page, never from the
    state's representative.
    """
    state_id = registry.assign(page)
    return state_id, retrieve_valid_actions(page, elements, scope)
