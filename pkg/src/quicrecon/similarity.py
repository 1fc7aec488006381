"""Structural landing-page comparison.

Six metrics over each document: total element count, anchor count,
image count, script count, title, and visible-text length.  Pages are
similar when more than three metrics agree.  Numeric metrics agree
within 10% relative difference (within 2 absolutely when both sides
are small); titles agree on exact match.
"""

from __future__ import annotations

from dataclasses import dataclass
from html.parser import HTMLParser
from typing import Union

SMALL_COUNT = 20
ABSOLUTE_SLACK = 2
RELATIVE_SLACK = 0.10
AGREEMENT_THRESHOLD = 3  # similar iff agreeing metrics exceed this

_INVISIBLE = frozenset({"script", "style"})


@dataclass(frozen=True)
class PageMetrics:
    elements: int
    anchors: int
    images: int
    scripts: int
    title: str | None
    text_length: int


@dataclass(frozen=True)
class MetricComparison:
    name: str
    value_a: object
    value_b: object
    agrees: bool


@dataclass(frozen=True)
class SimilarityReport:
    metrics: tuple[MetricComparison, ...]

    @property
    def agreeing(self) -> int:
        return sum(1 for m in self.metrics if m.agrees)

    @property
    def similar(self) -> bool:
        return self.agreeing > AGREEMENT_THRESHOLD


class _StructureParser(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.elements = 0
        self.anchors = 0
        self.images = 0
        self.scripts = 0
        self.title_parts: list[str] = []
        self.text_parts: list[str] = []
        self._invisible_depth = 0
        self._in_title = False
        self._title_done = False

    def _count(self, tag: str) -> None:
        self.elements += 1
        if tag == "a":
            self.anchors += 1
        elif tag == "img":
            self.images += 1
        elif tag == "script":
            self.scripts += 1

    def handle_starttag(self, tag, attrs) -> None:
        self._count(tag)
        if tag in _INVISIBLE:
            self._invisible_depth += 1
        elif tag == "title" and not self._title_done:
            self._in_title = True

    def handle_startendtag(self, tag, attrs) -> None:
        self._count(tag)

    def handle_endtag(self, tag) -> None:
        if tag in _INVISIBLE and self._invisible_depth:
            self._invisible_depth -= 1
        elif tag == "title" and self._in_title:
            self._in_title = False
            self._title_done = True

    def handle_data(self, data) -> None:
        if self._in_title:
            self.title_parts.append(data)
        elif not self._invisible_depth:
            self.text_parts.append(data)


def page_metrics(document: Union[bytes, str]) -> PageMetrics:
    """Structural metrics; tolerant of arbitrarily broken markup."""
    if isinstance(document, bytes):
        document = document.decode("utf-8", errors="replace")
    parser = _StructureParser()
    parser.feed(document)
    parser.close()
    title = " ".join(" ".join(parser.title_parts).split()) if parser.title_parts else None
    text = " ".join(" ".join(parser.text_parts).split())
    return PageMetrics(
        elements=parser.elements,
        anchors=parser.anchors,
        images=parser.images,
        scripts=parser.scripts,
        title=title,
        text_length=len(text),
    )


def counts_agree(a: int, b: int) -> bool:
    if a == b:
        return True
    larger = max(a, b)
    if larger < SMALL_COUNT:
        return abs(a - b) <= ABSOLUTE_SLACK
    return abs(a - b) / larger <= RELATIVE_SLACK


def compare_landing_pages(
    document_a: Union[bytes, str], document_b: Union[bytes, str]
) -> SimilarityReport:
    a = page_metrics(document_a)
    b = page_metrics(document_b)
    comparisons = (
        MetricComparison("elements", a.elements, b.elements, counts_agree(a.elements, b.elements)),
        MetricComparison("anchors", a.anchors, b.anchors, counts_agree(a.anchors, b.anchors)),
        MetricComparison("images", a.images, b.images, counts_agree(a.images, b.images)),
        MetricComparison("scripts", a.scripts, b.scripts, counts_agree(a.scripts, b.scripts)),
        MetricComparison("title", a.title, b.title, a.title == b.title),
        MetricComparison(
            "text_length", a.text_length, b.text_length, counts_agree(a.text_length, b.text_length)
        ),
    )
    return SimilarityReport(comparisons)
