"""Per-metric interval call trees.

A tree node records the metric sample at call entry and exit; its span is
``end - start`` (time for latency trees, a delta for memory/disk trees).
Finished trees carry the exact tracing overhead spent while building them,
in microseconds, rendered under the root as ``OH: <us>us(<pct>%)``.

Node stacks are strictly per-thread. Finished trees are treated as immutable
and are safe to hand across thread and process boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .metrics import MetricKind, kind_for_name


class TreeError(Exception):
    pass


class TreeStackError(TreeError):
    """The per-thread node stack was used out of open/close order."""


class WireDecodeError(TreeError):
    """A wire payload violated the tree or span schema."""


@dataclass
class TreeNode:
    name: str
    start: float
    end: float = 0.0
    error_flag: bool = False
    extra: dict[str, str] = field(default_factory=dict)
    children: list["TreeNode"] = field(default_factory=list)

    @property
    def span(self) -> float:
        return self.end - self.start

    def walk(self):
        """Yield (depth, node) in depth-first call order."""
        stack = [(0, self)]
        while stack:
            depth, node = stack.pop()
            yield depth, node
            for child in reversed(node.children):
                stack.append((depth + 1, child))

    def count(self) -> int:
        return sum(1 for _ in self.walk())


@dataclass
class HiQTree:
    root: TreeNode
    metric: MetricKind
    overhead_us: int
    tree_id: str
    process_id: int
    thread_id: int
    created_at_us: int
    concise: bool = False


@dataclass(frozen=True)
class SpanRecord:
    """One service span, shipped to the collector for tree reconstruction."""

    trace_id: str
    span_id: str
    parent_span_id: str
    service: str
    name: str
    start_us: int
    end_us: int
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class ServiceNode:
    span: SpanRecord
    children: list["ServiceNode"] = field(default_factory=list)
    orphan: bool = False


# ---------------------------------------------------------------------------
# stack building


def open_node(stack: list[TreeNode], name: str, start_sample: float) -> TreeNode:
    """Push a new node; an empty stack starts a new in-progress tree."""
    node = TreeNode(name=name, start=start_sample)
    if stack:
        stack[-1].children.append(node)
    stack.append(node)
    return node


def close_node(stack: list[TreeNode], end_sample: float, error_flag: bool = False) -> TreeNode:
    """Seal the top node with its end sample.

    Returns the finished node; when it empties the stack, the caller owns
    wrapping it into an HiQTree and emitting it.
    """
    if not stack:
        raise TreeStackError("close_node on an empty stack (open/close mismatch)")
    node = stack.pop()
    node.end = end_sample
    node.error_flag = error_flag
    return node


# ---------------------------------------------------------------------------
# filtering and overhead


def concise_filter(tree: HiQTree, threshold: float) -> HiQTree:
    """Copy the tree dropping every non-root node with span < threshold.

    A dropped node takes its whole subtree with it; the root always survives.
    A threshold of the smallest positive metric unit drops all zero-span
    nodes.
    """
    if threshold < 0:
        raise ValueError(f"concise threshold must be >= 0, got {threshold}")

    def keep(node: TreeNode) -> TreeNode:
        copy = TreeNode(
            name=node.name,
            start=node.start,
            end=node.end,
            error_flag=node.error_flag,
            extra=dict(node.extra),
        )
        copy.children = [keep(c) for c in node.children if c.span >= threshold]
        return copy

    return replace(tree, root=keep(tree.root), concise=True)


def compute_overhead_percent(overhead_us: float, root_span_us: float) -> float:
    """Tracing overhead as a percentage of the root span (both in µs)."""
    if root_span_us <= 0:
        raise ValueError(f"root span must be positive to compute a percentage, got {root_span_us}")
    return 100.0 * overhead_us / root_span_us


def format_percent(pct: float) -> str:
    """Round to 3 decimals and trim trailing zeros: 0.00407 -> '0.004'."""
    text = f"{pct:.3f}".rstrip("0").rstrip(".")
    return text if text else "0"


def overhead_percent_str(overhead_us: float, root_span_us: float) -> str:
    """Rendered overhead percentage, or "n/a" when undefined."""
    try:
        return format_percent(compute_overhead_percent(overhead_us, root_span_us)) + "%"
    except ValueError:
        return "n/a"


# ---------------------------------------------------------------------------
# rendering

FORMAT_ABSOLUTE = "absolute"
FORMAT_PERCENT = "percent"


def _fmt_value(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return f"{value:.3f}".rstrip("0").rstrip(".")


def render_tree(tree: HiQTree, format: str = FORMAT_ABSOLUTE) -> str:
    """Render one line per node, two-space indented, plus the root OH line.

    Absolute format shows each span with the metric unit; percent format
    shows each node's integer-rounded share of the root span.
    """
    if format not in (FORMAT_ABSOLUTE, FORMAT_PERCENT):
        raise ValueError(f"unknown render format '{format}'")
    root_span = tree.root.span
    unit = tree.metric.unit
    lines: list[str] = []
    for depth, node in tree.root.walk():
        indent = "  " * depth
        if format == FORMAT_ABSOLUTE:
            value = f"{_fmt_value(node.span)}{unit}"
        elif root_span > 0:
            value = f"{round(100.0 * node.span / root_span)}%"
        else:
            value = "n/a"
        mark = " !" if node.error_flag else ""
        lines.append(f"{indent}{node.name}: {value}{mark}")
        if depth == 0:
            if tree.metric.kind == "latency":
                pct = overhead_percent_str(tree.overhead_us, root_span)
            else:
                pct = "n/a"
            lines.append(f"  OH: {tree.overhead_us}us({pct})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# wire codecs

_NODE_FIELDS = {"name": str, "start": (int, float), "end": (int, float), "error": bool}
_TREE_FIELDS = {
    "tree_id": str,
    "metric": str,
    "unit": str,
    "overhead_us": int,
    "process_id": int,
    "thread_id": int,
    "created_at_us": int,
    "concise": bool,
}
_SPAN_FIELDS = {
    "trace_id": str,
    "span_id": str,
    "parent_span_id": str,
    "service": str,
    "name": str,
    "start_us": int,
    "end_us": int,
}


def _node_to_wire(node: TreeNode) -> dict:
    return {
        "name": node.name,
        "start": node.start,
        "end": node.end,
        "error": node.error_flag,
        "extra": dict(node.extra),
        "children": [_node_to_wire(c) for c in node.children],
    }


def tree_to_wire(tree: HiQTree) -> dict:
    """Encode a finished tree as its wire-schema JSON object."""
    return {
        "tree_id": tree.tree_id,
        "metric": tree.metric.name,
        "unit": tree.metric.unit,
        "overhead_us": tree.overhead_us,
        "process_id": tree.process_id,
        "thread_id": tree.thread_id,
        "created_at_us": tree.created_at_us,
        "concise": tree.concise,
        "root": _node_to_wire(tree.root),
    }


def _require(obj: dict, name: str, types, where: str):
    if name not in obj:
        raise WireDecodeError(f"{where}: missing field '{name}'")
    value = obj[name]
    if types is bool:
        if not isinstance(value, bool):
            raise WireDecodeError(f"{where}: field '{name}' must be a bool")
    elif types is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise WireDecodeError(f"{where}: field '{name}' must be an int")
    elif not isinstance(value, types):
        raise WireDecodeError(f"{where}: field '{name}' has wrong type")
    return value


def _node_from_wire(obj, where: str = "root") -> TreeNode:
    if not isinstance(obj, dict):
        raise WireDecodeError(f"{where}: node must be an object")
    for name, types in _NODE_FIELDS.items():
        _require(obj, name, types, where)
    extra = _require(obj, "extra", dict, where)
    children = _require(obj, "children", list, where)
    node = TreeNode(
        name=obj["name"],
        start=obj["start"],
        end=obj["end"],
        error_flag=obj["error"],
        extra={str(k): str(v) for k, v in extra.items()},
    )
    node.children = [
        _node_from_wire(c, where=f"{where}.children[{i}]") for i, c in enumerate(children)
    ]
    return node


def wire_to_tree(obj) -> HiQTree:
    """Decode a wire-schema object (dict or JSON text) into an HiQTree."""
    if isinstance(obj, (str, bytes)):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError as exc:
            raise WireDecodeError(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireDecodeError("tree payload must be a JSON object")
    for name, types in _TREE_FIELDS.items():
        _require(obj, name, types, "tree")
    root = _node_from_wire(_require(obj, "root", dict, "tree"))
    return HiQTree(
        root=root,
        metric=kind_for_name(obj["metric"], unit=obj["unit"]),
        overhead_us=obj["overhead_us"],
        tree_id=obj["tree_id"],
        process_id=obj["process_id"],
        thread_id=obj["thread_id"],
        created_at_us=obj["created_at_us"],
        concise=obj["concise"],
    )


def span_to_wire(span: SpanRecord) -> dict:
    return {
        "trace_id": span.trace_id,
        "span_id": span.span_id,
        "parent_span_id": span.parent_span_id,
        "service": span.service,
        "name": span.name,
        "start_us": span.start_us,
        "end_us": span.end_us,
        "attributes": dict(span.attributes),
    }


def span_from_wire(obj) -> SpanRecord:
    if not isinstance(obj, dict):
        raise WireDecodeError("span payload must be a JSON object")
    for name, types in _SPAN_FIELDS.items():
        _require(obj, name, types, "span")
    attributes = _require(obj, "attributes", dict, "span")
    if obj["end_us"] < obj["start_us"]:
        raise WireDecodeError("span: end_us must be >= start_us")
    return SpanRecord(
        trace_id=obj["trace_id"],
        span_id=obj["span_id"],
        parent_span_id=obj["parent_span_id"],
        service=obj["service"],
        name=obj["name"],
        start_us=obj["start_us"],
        end_us=obj["end_us"],
        attributes={str(k): str(v) for k, v in attributes.items()},
    )


# ---------------------------------------------------------------------------
# service-tree reconstruction

ORPHAN_ROOT = "(orphan)"


def reconstruct_service_tree(spans: list[SpanRecord]) -> list[ServiceNode]:
    """Rebuild the service tree of one trace from its shipped spans.

    Spans with an empty parent id become roots. Spans whose parent is absent
    from the set are flagged and grouped under a synthetic "(orphan)" root,
    appended last. Pure function; input order of siblings is preserved.
    """
    if not spans:
        return []
    trace_ids = {s.trace_id for s in spans}
    if len(trace_ids) > 1:
        raise TreeError(f"spans belong to multiple traces: {sorted(trace_ids)}")

    nodes: dict[str, ServiceNode] = {}
    for span in spans:
        if span.span_id in nodes:
            raise TreeError(f"duplicate span_id '{span.span_id}' in trace '{span.trace_id}'")
        nodes[span.span_id] = ServiceNode(span=span)

    roots: list[ServiceNode] = []
    orphans: list[ServiceNode] = []
    for span in spans:
        node = nodes[span.span_id]
        if not span.parent_span_id:
            roots.append(node)
        elif span.parent_span_id in nodes:
            nodes[span.parent_span_id].children.append(node)
        else:
            node.orphan = True
            orphans.append(node)

    if orphans:
        synthetic = ServiceNode(
            span=SpanRecord(
                trace_id=spans[0].trace_id,
                span_id=ORPHAN_ROOT,
                parent_span_id="",
                service="",
                name=ORPHAN_ROOT,
                start_us=0,
                end_us=0,
            ),
            children=orphans,
        )
        roots.append(synthetic)
    return roots


def service_node_to_wire(node: ServiceNode) -> dict:
    out = span_to_wire(node.span)
    if node.orphan:
        out["orphan"] = True
    out["children"] = [service_node_to_wire(c) for c in node.children]
    return out
