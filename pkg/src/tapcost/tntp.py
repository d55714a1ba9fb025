"""TNTP network/trips parsing and CSV persistence for link flows.

The TNTP text format (one file per network, one per trip table) is the
distribution format of the classic traffic-assignment benchmarks.  Only the
fields consumed downstream are retained: link capacity and free-flow time.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from io import StringIO
from typing import IO, Iterator

import numpy as np


class TntpFormatError(ValueError):
    """Malformed TNTP input; message carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class LinkSpec:
    """One directed physical link, node ids 1-based."""

    from_node: int
    to_node: int
    capacity_m: float
    free_flow_time_t0: float

    def __post_init__(self):
        if self.capacity_m <= 0:
            raise ValueError(f"link capacity must be > 0, got {self.capacity_m}")
        if self.free_flow_time_t0 < 0:
            raise ValueError(
                f"free-flow time must be >= 0, got {self.free_flow_time_t0}"
            )
        if self.from_node == self.to_node:
            raise ValueError(f"self-loop at node {self.from_node}")


@dataclass(frozen=True)
class NetworkSpec:
    """Physical directed network; link order is file order."""

    node_count: int
    zone_count: int
    links: tuple[LinkSpec, ...]

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be positive")
        if self.zone_count < 1 or self.zone_count > self.node_count:
            raise ValueError("zone_count must be in [1, node_count]")
        for idx, link in enumerate(self.links):
            for node in (link.from_node, link.to_node):
                if not 1 <= node <= self.node_count:
                    raise ValueError(
                        f"link {idx}: endpoint {node} out of range "
                        f"[1, {self.node_count}]"
                    )

    @property
    def link_count(self) -> int:
        return len(self.links)


@dataclass(frozen=True)
class DemandTable:
    """OD demands keyed by 1-based (origin zone, destination zone)."""

    zone_count: int
    entries: dict[tuple[int, int], float]

    def __post_init__(self):
        for (o, d), v in self.entries.items():
            if v < 0:
                raise ValueError(f"negative demand {v} for OD ({o}, {d})")
            if o == d and v != 0:
                raise ValueError(f"nonzero self-demand at zone {o}")
            if not (1 <= o <= self.zone_count and 1 <= d <= self.zone_count):
                raise ValueError(f"OD ({o}, {d}) outside zone range")

    def total(self) -> float:
        return float(sum(self.entries.values()))


def _data_lines(text: str) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, stripped line), skipping blanks/comments."""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        yield no, line


def _read_text(source: str | IO[str]) -> str:
    return source if isinstance(source, str) else source.read()


def _parse_metadata(lines: Iterator[tuple[int, str]]) -> dict[str, str]:
    meta: dict[str, str] = {}
    for no, line in lines:
        if line.startswith("<END OF METADATA>"):
            return meta
        if line.startswith("<"):
            close = line.find(">")
            if close < 0:
                raise TntpFormatError("unterminated metadata tag", no)
            meta[line[1:close].strip().upper()] = line[close + 1 :].strip()
        else:
            # first data row reached without an explicit end tag
            raise TntpFormatError("data before <END OF METADATA>", no)
    return meta


def _meta_int(meta: dict[str, str], key: str) -> int:
    if key not in meta:
        raise TntpFormatError(f"missing metadata <{key}>")
    try:
        return int(float(meta[key]))
    except ValueError:
        raise TntpFormatError(f"non-numeric metadata <{key}>: {meta[key]!r}") from None


def parse_network(source: str | IO[str]) -> NetworkSpec:
    """Parse a TNTP network file into a :class:`NetworkSpec`.

    Expected layout: metadata headers (``<NUMBER OF NODES>``, ``<NUMBER OF
    ZONES>``, ``<NUMBER OF LINKS>``, ``<END OF METADATA>``), then one row per
    link with at least ``init term capacity length fftt`` followed by
    optional extra columns and a ``;`` terminator.  Extra columns (the
    per-link BPR shape fields among them) are ignored; a single network-wide
    latency function is used downstream.
    """
    text = _read_text(source)
    lines = _data_lines(text)
    meta = _parse_metadata(lines)
    node_count = _meta_int(meta, "NUMBER OF NODES")
    zone_count = _meta_int(meta, "NUMBER OF ZONES")
    declared_links = _meta_int(meta, "NUMBER OF LINKS")

    links: list[LinkSpec] = []
    for no, line in lines:
        body = line[:-1] if line.endswith(";") else line
        fields = body.split()
        if len(fields) < 5:
            raise TntpFormatError(
                f"expected >= 5 fields in link row, got {len(fields)}", no
            )
        try:
            init, term = int(fields[0]), int(fields[1])
            capacity, fftt = float(fields[2]), float(fields[4])
        except ValueError:
            raise TntpFormatError(f"non-numeric field in link row: {body!r}", no)
        for node in (init, term):
            if not 1 <= node <= node_count:
                raise TntpFormatError(
                    f"endpoint {node} out of range [1, {node_count}]", no
                )
        try:
            links.append(LinkSpec(init, term, capacity, fftt))
        except ValueError as exc:
            raise TntpFormatError(str(exc), no)

    if len(links) != declared_links:
        raise TntpFormatError(
            f"declared {declared_links} links but parsed {len(links)}"
        )
    return NetworkSpec(node_count, zone_count, tuple(links))


def parse_trips(source: str | IO[str]) -> DemandTable:
    """Parse a TNTP trips file into a :class:`DemandTable`.

    Layout: ``<NUMBER OF ZONES>`` metadata, then ``Origin o`` blocks with
    ``dest : value;`` pairs.  Explicitly listed zero demands are kept so the
    OD-pair bookkeeping matches the file; origin = destination entries are
    discarded with a warning.
    """
    text = _read_text(source)
    lines = _data_lines(text)
    meta = _parse_metadata(lines)
    zone_count = _meta_int(meta, "NUMBER OF ZONES")

    entries: dict[tuple[int, int], float] = {}
    origin: int | None = None
    for no, line in lines:
        if line.lower().startswith("origin"):
            parts = line.split()
            if len(parts) != 2:
                raise TntpFormatError(f"malformed origin header {line!r}", no)
            try:
                origin = int(parts[1])
            except ValueError:
                raise TntpFormatError(f"non-numeric origin id {parts[1]!r}", no)
            if not 1 <= origin <= zone_count:
                raise TntpFormatError(
                    f"origin {origin} exceeds declared zone count {zone_count}", no
                )
            continue
        if origin is None:
            raise TntpFormatError("demand pair before any Origin header", no)
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise TntpFormatError(f"malformed demand pair {chunk!r}", no)
            dest_s, _, value_s = chunk.partition(":")
            try:
                dest = int(dest_s.strip())
                value = float(value_s.strip())
            except ValueError:
                raise TntpFormatError(f"malformed demand pair {chunk!r}", no)
            if not 1 <= dest <= zone_count:
                raise TntpFormatError(
                    f"destination {dest} exceeds declared zone count {zone_count}",
                    no,
                )
            if value < 0:
                raise TntpFormatError(f"negative demand {value}", no)
            if dest == origin:
                if value != 0:
                    warnings.warn(
                        f"discarding self-demand {value} at zone {origin}",
                        stacklevel=2,
                    )
                continue
            if (origin, dest) in entries:
                raise TntpFormatError(f"duplicate OD pair ({origin}, {dest})", no)
            entries[(origin, dest)] = value
    return DemandTable(zone_count, entries)


def write_network(spec: NetworkSpec, sink: IO[str]) -> None:
    """Serialize a NetworkSpec back to TNTP text (inverse of parse_network)."""
    sink.write(f"<NUMBER OF ZONES> {spec.zone_count}\n")
    sink.write(f"<NUMBER OF NODES> {spec.node_count}\n")
    sink.write("<FIRST THRU NODE> 1\n")
    sink.write(f"<NUMBER OF LINKS> {spec.link_count}\n")
    sink.write("<END OF METADATA>\n\n")
    sink.write(
        "~ \tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\t"
        "b\tpower\tspeed\ttoll\tlink_type\t;\n"
    )
    for link in spec.links:
        sink.write(
            f"\t{link.from_node}\t{link.to_node}\t{link.capacity_m!r}\t"
            f"{link.free_flow_time_t0!r}\t{link.free_flow_time_t0!r}"
            f"\t0.15\t4\t0\t0\t1\t;\n"
        )


def write_trips(table: DemandTable, sink: IO[str]) -> None:
    """Serialize a DemandTable back to TNTP text (inverse of parse_trips)."""
    sink.write(f"<NUMBER OF ZONES> {table.zone_count}\n")
    sink.write(f"<TOTAL OD FLOW> {table.total()!r}\n")
    sink.write("<END OF METADATA>\n\n")
    by_origin: dict[int, list[tuple[int, float]]] = {}
    for (o, d), v in table.entries.items():
        by_origin.setdefault(o, []).append((d, v))
    for o in sorted(by_origin):
        sink.write(f"Origin  {o}\n")
        pairs = sorted(by_origin[o])
        for i in range(0, len(pairs), 5):
            row = "".join(f"    {d} :    {v!r};" for d, v in pairs[i : i + 5])
            sink.write(row + "\n")
        sink.write("\n")


FLOWS_HEADER = "link_index,class_index,flow"


def write_flows_csv(flows, sink: IO[str]) -> None:
    """Write a FlowState as CSV rows ``link_index,class_index,flow``.

    Indices are 0-based; floats use shortest round-trip repr so that
    :func:`read_flows_csv` recovers the array bit-for-bit.
    """
    x = flows.x
    sink.write(FLOWS_HEADER + "\n")
    for i in range(x.shape[0]):
        for u in range(x.shape[1]):
            sink.write(f"{i},{u},{float(x[i, u])!r}\n")


def read_flows_csv(
    source: str | IO[str],
    n_links: int | None = None,
    n_classes: int | None = None,
):
    """Read a flows CSV back into a FlowState.

    The file must contain every (link, class) pair exactly once.  When
    ``n_links``/``n_classes`` are given, the parsed dimensions must match.
    """
    from .network import FlowState

    text = _read_text(source)
    lines = text.splitlines()
    if not lines or lines[0].strip() != FLOWS_HEADER:
        raise ValueError(f"flows CSV must start with header {FLOWS_HEADER!r}")
    seen: dict[tuple[int, int], float] = {}
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"line {no}: expected 3 cells, got {len(parts)}")
        try:
            i, u, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ValueError(f"line {no}: non-numeric cell in {line!r}") from None
        if (i, u) in seen:
            raise ValueError(f"line {no}: duplicate (link, class) pair ({i}, {u})")
        seen[(i, u)] = v

    if not seen:
        shape = (n_links or 0, n_classes or 0)
        return FlowState(np.zeros(shape))
    rows = 1 + max(i for i, _ in seen)
    cols = 1 + max(u for _, u in seen)
    if len(seen) != rows * cols:
        raise ValueError(
            f"flows CSV is not dense: {len(seen)} rows for a {rows}x{cols} grid"
        )
    if n_links is not None and rows != n_links:
        raise ValueError(f"expected {n_links} links, file has {rows}")
    if n_classes is not None and cols != n_classes:
        raise ValueError(f"expected {n_classes} classes, file has {cols}")
    x = np.empty((rows, cols))
    for (i, u), v in seen.items():
        x[i, u] = v
    return FlowState(x)


def network_to_text(spec: NetworkSpec) -> str:
    buf = StringIO()
    write_network(spec, buf)
    return buf.getvalue()


def trips_to_text(table: DemandTable) -> str:
    buf = StringIO()
    write_trips(table, buf)
    return buf.getvalue()
