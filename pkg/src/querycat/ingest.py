"""Click-log parsing, noise filtering, aggregation, and dominance labeling.

A click event attributes one query to one category. Per query, clicks are
summed per category; the category with the most clicks is the dominant
category and per-category conversion rates are counts divided by the
query's total clicks. A seeded synthetic generator stands in for a real
click corpus at desk scale.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidSpec, MalformedRecord
from .fsio import atomic_write_text
from .textprep import normalize

# Default category ids for synthetic logs: eight L1-style ids.
DEFAULT_CATEGORY_IDS = (1, 10, 27, 34, 45, 72, 112, 800)


@dataclass(frozen=True)
class ClickEvent:
    """One user click attributing a query to an L1 category."""

    session_id: str
    timestamp: int
    query_raw: str
    ad_id: str
    category_id: int
    is_bot: bool = False


@dataclass(frozen=True)
class NoisePolicy:
    """Noise-removal rules applied before aggregation.

    ``live_categories=None`` disables the liveness filter. Events with the
    same (session, normalized query, ad) collapse to the earliest of each
    run whose gaps are within ``dedupe_window_seconds`` (boundary
    inclusive); ``dedupe_window_seconds=0`` still collapses same-second
    duplicates.
    """

    drop_bots: bool = True
    dedupe_window_seconds: int = 60
    live_categories: frozenset[int] | None = None
    min_clicks_per_query: int = 3

    def __post_init__(self) -> None:
        if self.dedupe_window_seconds < 0:
            raise InvalidSpec("dedupe_window_seconds must be >= 0")
        if self.min_clicks_per_query < 1:
            raise InvalidSpec("min_clicks_per_query must be >= 1")


@dataclass(frozen=True)
class CategoryCounts:
    """Per-category click counts for one normalized query."""

    query_norm: str
    counts: dict[int, int]


@dataclass(frozen=True)
class QueryRecord:
    """A labeled query: dominant category, conversion rates, top-3 list."""

    query_norm: str
    dominant_category: int
    top3: list[tuple[int, float]]
    rates: dict[int, float]
    total_clicks: int


@dataclass(frozen=True)
class ParsedLog:
    """Events recovered from a click log plus the malformed line numbers
    skipped in lenient mode (always empty in strict mode)."""

    events: list[ClickEvent]
    malformed_lines: list[int]


def _parse_line(obj: object) -> ClickEvent:
    if not isinstance(obj, dict):
        raise ValueError("not an object")
    session = obj.get("session")
    ts = obj.get("ts")
    query = obj.get("query")
    ad = obj.get("ad")
    cat = obj.get("cat")
    bot = obj.get("bot", False)
    if not isinstance(session, str):
        raise ValueError("session must be a string")
    if not isinstance(ts, int) or isinstance(ts, bool) or ts < 0:
        raise ValueError("ts must be a non-negative integer")
    if not isinstance(query, str) or query == "":
        raise ValueError("query must be a non-empty string")
    if not isinstance(ad, str):
        raise ValueError("ad must be a string")
    if not isinstance(cat, int) or isinstance(cat, bool) or cat < 0:
        raise ValueError("cat must be a non-negative integer")
    if not isinstance(bot, bool):
        raise ValueError("bot must be a boolean")
    return ClickEvent(
        session_id=session, timestamp=ts, query_raw=query, ad_id=ad, category_id=cat, is_bot=bot
    )


def parse_click_log(lines: Iterable[str], strict: bool = False) -> ParsedLog:
    """Parse a JSON-lines click log.

    One event per well-formed line, order preserved. Blank lines are
    ignored. In strict mode the first malformed line raises
    MalformedRecord; in lenient mode malformed lines are skipped and their
    line numbers returned.
    """
    events: list[ClickEvent] = []
    malformed: list[int] = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(_parse_line(json.loads(line)))
        except (ValueError, TypeError) as exc:
            if strict:
                raise MalformedRecord(line_no, str(exc)) from exc
            malformed.append(line_no)
    return ParsedLog(events=events, malformed_lines=malformed)


def filter_noise(events: Sequence[ClickEvent], policy: NoisePolicy) -> list[ClickEvent]:
    """Remove bot clicks, redundant repeats, dead categories, and
    low-volume queries, in that order.

    Dedupe is greedy: within each (session, normalized query, ad) key,
    events are scanned in timestamp order and an event is dropped when it
    falls within the window of the last kept event for that key.
    Idempotent. Survivors keep their input order.
    """
    indexed = list(enumerate(events))
    if policy.drop_bots:
        indexed = [(i, e) for i, e in indexed if not e.is_bot]

    if indexed:
        last_kept: dict[tuple[str, str, str], int] = {}
        kept: list[tuple[int, ClickEvent]] = []
        for i, e in sorted(indexed, key=lambda ie: (ie[1].timestamp, ie[0])):
            key = (e.session_id, normalize(e.query_raw), e.ad_id)
            prev = last_kept.get(key)
            if prev is not None and e.timestamp - prev <= policy.dedupe_window_seconds:
                continue
            last_kept[key] = e.timestamp
            kept.append((i, e))
        indexed = sorted(kept, key=lambda ie: ie[0])

    if policy.live_categories is not None:
        indexed = [(i, e) for i, e in indexed if e.category_id in policy.live_categories]

    counts = Counter(normalize(e.query_raw) for _, e in indexed)
    indexed = [(i, e) for i, e in indexed if counts[normalize(e.query_raw)] >= policy.min_clicks_per_query]
    return [e for _, e in indexed]


def aggregate(events: Sequence[ClickEvent]) -> list[CategoryCounts]:
    """Count clicks per (normalized query, category).

    Output is ordered by ascending normalized query. Expects noise-filtered
    input.
    """
    table: dict[str, Counter[int]] = defaultdict(Counter)
    for e in events:
        table[normalize(e.query_raw)][e.category_id] += 1
    return [
        CategoryCounts(query_norm=q, counts=dict(table[q])) for q in sorted(table)
    ]


def label(counts: CategoryCounts) -> QueryRecord:
    """Label one query: dominant category, conversion rates, top-3.

    Dominant is the category with the highest count (lowest id on ties);
    each rate is the category's count divided by the query's total clicks.
    """
    total = sum(counts.counts.values())
    rates = {c: n / total for c, n in counts.counts.items()}
    by_rate = sorted(rates.items(), key=lambda kv: (-kv[1], kv[0]))
    return QueryRecord(
        query_norm=counts.query_norm,
        dominant_category=by_rate[0][0],
        top3=by_rate[:3],
        rates=rates,
        total_clicks=total,
    )


def label_all(events: Sequence[ClickEvent]) -> list[QueryRecord]:
    """Aggregate then label every query in one pass."""
    return [label(c) for c in aggregate(events)]


def merge_counts(*parts: Sequence[CategoryCounts]) -> list[CategoryCounts]:
    """Merge sharded aggregation outputs by summing counts per key."""
    table: dict[str, Counter[int]] = defaultdict(Counter)
    for part in parts:
        for cc in part:
            table[cc.query_norm].update(cc.counts)
    return [CategoryCounts(query_norm=q, counts=dict(table[q])) for q in sorted(table)]


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic click corpus.

    Each class owns a disjoint token sub-pool so the query-to-class map is
    learnable. With ``order_sensitive`` set, classes come in pairs that
    share a marker-token bigram and differ only in its order, mixed with
    filler tokens shared across all classes; ``n_classes`` must be even.
    """

    n_classes: int = 8
    queries_per_class: int = 100
    clicks_per_query: int = 10
    noise_fraction: float = 0.0
    vocab_pool_size: int = 1000
    order_sensitive: bool = False

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise InvalidSpec("n_classes must be >= 2")
        if self.queries_per_class < 1 or self.clicks_per_query < 1 or self.vocab_pool_size < 1:
            raise InvalidSpec("counts must be >= 1")
        if not (0.0 <= self.noise_fraction < 1.0):
            raise InvalidSpec("noise_fraction must be in [0,1)")
        if self.order_sensitive:
            if self.n_classes % 2 != 0:
                raise InvalidSpec("order_sensitive requires an even n_classes")
            if self.vocab_pool_size < self.n_classes + 2:
                raise InvalidSpec("vocab pool too small for marker pairs plus fillers")
        elif self.vocab_pool_size < self.n_classes:
            raise InvalidSpec("vocab pool smaller than n_classes")


def synthetic_category_ids(n_classes: int) -> list[int]:
    """Category ids assigned to synthetic classes, ascending."""
    ids = list(DEFAULT_CATEGORY_IDS[:n_classes])
    ids += [1000 + i for i in range(max(0, n_classes - len(DEFAULT_CATEGORY_IDS)))]
    return sorted(ids)


def _distinct_queries(make, want: int, rng) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    attempts = 0
    cap = 200 * want + 1000
    while len(out) < want:
        attempts += 1
        if attempts > cap:
            raise InvalidSpec("token pool too small to produce enough distinct queries")
        q = make(rng)
        if q not in seen:
            seen.add(q)
            out.append(q)
    return out


def synthetic_queries(spec: SynthSpec, seed: int) -> list[tuple[str, int]]:
    """The ground-truth (normalized query, category id) pairs behind
    ``generate_synthetic_log`` for the same spec and seed."""
    rng = np.random.default_rng([seed, 0])
    cats = synthetic_category_ids(spec.n_classes)
    tokens = [f"w{i:05d}" for i in range(spec.vocab_pool_size)]
    pairs: list[tuple[str, int]] = []

    if spec.order_sensitive:
        n_pairs = spec.n_classes // 2
        markers = [(tokens[2 * j], tokens[2 * j + 1]) for j in range(n_pairs)]
        fillers = tokens[2 * n_pairs:]

        for cls in range(spec.n_classes):
            u, v = markers[cls // 2]
            bigram = [u, v] if cls % 2 == 0 else [v, u]

            def make(r, bigram=bigram):
                n_fill = int(r.integers(0, 4))
                words = [fillers[int(r.integers(0, len(fillers)))] for _ in range(n_fill)]
                pos = int(r.integers(0, n_fill + 1))
                return " ".join(words[:pos] + bigram + words[pos:])

            for q in _distinct_queries(make, spec.queries_per_class, rng):
                pairs.append((q, cats[cls]))
        return pairs

    pool_size = spec.vocab_pool_size // spec.n_classes
    if pool_size < 1:
        raise InvalidSpec("vocab pool smaller than n_classes")
    for cls in range(spec.n_classes):
        pool = tokens[cls * pool_size: (cls + 1) * pool_size]

        def make(r, pool=pool):
            n_words = 1 + int(r.integers(0, 3))
            return " ".join(pool[int(r.integers(0, len(pool)))] for _ in range(n_words))

        for q in _distinct_queries(make, spec.queries_per_class, rng):
            pairs.append((q, cats[cls]))
    return pairs


def generate_synthetic_log(spec: SynthSpec, seed: int) -> list[ClickEvent]:
    """Emit a deterministic synthetic click log.

    Each ground-truth query receives ``clicks_per_query`` clicks; a
    ``noise_fraction`` share of clicks lands on a uniformly random wrong
    class. Session ids are unique per click so deduplication never
    collapses legitimate clicks. Some raw queries are upper-cased to
    exercise normalization downstream.
    """
    truth = synthetic_queries(spec, seed)
    cats = synthetic_category_ids(spec.n_classes)
    rng = np.random.default_rng([seed, 1])
    events: list[ClickEvent] = []
    ts = 1_600_000_000
    serial = 0
    for query, cat in truth:
        raw = query.upper() if rng.random() < 0.1 else query
        for _ in range(spec.clicks_per_query):
            target = cat
            if spec.noise_fraction > 0.0 and rng.random() < spec.noise_fraction:
                others = [c for c in cats if c != cat]
                target = others[int(rng.integers(0, len(others)))]
            events.append(
                ClickEvent(
                    session_id=f"s{serial:08d}",
                    timestamp=ts,
                    query_raw=raw,
                    ad_id=f"ad{target}",
                    category_id=target,
                )
            )
            serial += 1
            ts += 1
    return events


def events_to_jsonl(events: Sequence[ClickEvent]) -> str:
    lines = []
    for e in events:
        obj = {"session": e.session_id, "ts": e.timestamp, "query": e.query_raw, "ad": e.ad_id, "cat": e.category_id}
        if e.is_bot:
            obj["bot"] = True
        lines.append(json.dumps(obj, separators=(",", ":")) + "\n")
    return "".join(lines)


def records_to_tsv(records: Sequence[QueryRecord]) -> str:
    """Serialize labeled records: header then one row per query, rates
    printed to six decimals."""
    lines = ["query\tdominant\ttotal_clicks\ttop3\n"]
    for r in records:
        top3 = ";".join(f"{c}:{rate:.6f}" for c, rate in r.top3)
        lines.append(f"{r.query_norm}\t{r.dominant_category}\t{r.total_clicks}\t{top3}\n")
    return "".join(lines)


def write_records_tsv(records: Sequence[QueryRecord], path: str | Path) -> None:
    atomic_write_text(path, records_to_tsv(records))


def read_records_tsv(text: str) -> list[tuple[str, int]]:
    """Read back the (query, dominant category) pairs of a labeled TSV."""
    from .errors import FormatVersionMismatch

    lines = text.splitlines()
    if not lines or lines[0] != "query\tdominant\ttotal_clicks\ttop3":
        raise FormatVersionMismatch("labeled TSV: bad header")
    pairs: list[tuple[str, int]] = []
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatVersionMismatch(f"labeled TSV: bad row {line_no}")
        try:
            pairs.append((parts[0], int(parts[1])))
        except ValueError as exc:
            raise FormatVersionMismatch(f"labeled TSV: bad row {line_no}") from exc
    return pairs
