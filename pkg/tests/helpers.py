"""Shared test machinery: stub target modules, random trees, oracles."""

from __future__ import annotations

import random
import sys
import types
import uuid

from hiq.metrics import LATENCY_KIND, MetricKind
from hiq.tree import HiQTree, TreeNode


def make_module(name: str, source: str) -> types.ModuleType:
    """Create an importable module from source and register it."""
    module = types.ModuleType(name)
    module.__dict__["__name__"] = name
    exec(compile(source, f"<{name}>", "exec"), module.__dict__)
    sys.modules[name] = module
    return module


def drop_module(name: str) -> None:
    sys.modules.pop(name, None)


# ---------------------------------------------------------------------------
# tree construction


def build_node(spec) -> TreeNode:
    """spec = (name, start, end, [child_spec, ...])"""
    name, start, end, children = spec
    node = TreeNode(name=name, start=start, end=end)
    node.children = [build_node(c) for c in children]
    return node


def build_tree(spec, metric: MetricKind = LATENCY_KIND, overhead_us: int = 0) -> HiQTree:
    return HiQTree(
        root=build_node(spec),
        metric=metric,
        overhead_us=overhead_us,
        tree_id=uuid.uuid4().hex,
        process_id=1,
        thread_id=1,
        created_at_us=0,
    )


def random_tree_spec(rng: random.Random, max_depth: int = 5, max_fanout: int = 4,
                     allow_negative: bool = False):
    """Random (name, start, end, children) spec with non-pathological spans."""
    counter = [0]

    def build(depth: int, lo: float, hi: float):
        name = f"n{counter[0]}"
        counter[0] += 1
        if allow_negative and rng.random() < 0.2:
            start, end = hi, lo  # negative span (counter went down)
        else:
            start, end = lo, hi
        children = []
        if depth < max_depth:
            n = rng.randint(0, max_fanout)
            if n:
                width = (hi - lo) / n
                for i in range(n):
                    if rng.random() < 0.6:
                        c_lo = lo + i * width
                        c_hi = c_lo + rng.uniform(0, width)
                        children.append(build(depth + 1, c_lo, c_hi))
        return (name, start, end, children)

    return build(0, 0.0, rng.uniform(1.0, 1000.0))


def random_tree(rng: random.Random, **kwargs) -> HiQTree:
    return build_tree(random_tree_spec(rng, **kwargs))


# ---------------------------------------------------------------------------
# brute-force oracles


def all_nodes_with_paths(root: TreeNode):
    """Yield (path, node) where path is a tuple of child indices."""
    out = [((), root)]
    i = 0
    while i < len(out):
        path, node = out[i]
        for j, child in enumerate(node.children):
            out.append((path + (j,), child))
        i += 1
    return out


def brute_force_keep_set(root: TreeNode, threshold: float) -> set[tuple[int, ...]]:
    """Paths of nodes surviving the concise rule, computed from scratch:
    span >= threshold and every ancestor kept; root always kept."""
    nodes = dict(all_nodes_with_paths(root))
    kept: set[tuple[int, ...]] = set()
    for path in sorted(nodes, key=len):
        node = nodes[path]
        if path == ():
            kept.add(path)
            continue
        if node.span >= threshold and path[:-1] in kept:
            kept.add(path)
    return kept


def concise_matches_oracle(tree: HiQTree, threshold: float) -> bool:
    """Compare concise_filter output against a from-scratch rebuild that keeps
    exactly the span >= threshold nodes whose ancestors were all kept."""
    from hiq.tree import concise_filter, tree_to_wire

    filtered = concise_filter(tree, threshold)
    kept = brute_force_keep_set(tree.root, threshold)
    nodes = dict(all_nodes_with_paths(tree.root))

    def rebuild(path):
        node = nodes[path]
        return {
            "name": node.name,
            "start": node.start,
            "end": node.end,
            "error": node.error_flag,
            "extra": dict(node.extra),
            "children": [
                rebuild(path + (i,))
                for i, _ in enumerate(node.children)
                if path + (i,) in kept
            ],
        }

    return tree_to_wire(filtered)["root"] == rebuild(())


def brute_force_forest(spans):
    """Adjacency-map reconstruction oracle: span_id -> (parent or None,
    [child span ids in input order]), plus root/orphan id lists."""
    ids = {s.span_id for s in spans}
    children: dict[str, list[str]] = {s.span_id: [] for s in spans}
    roots, orphans = [], []
    for s in spans:
        if not s.parent_span_id:
            roots.append(s.span_id)
        elif s.parent_span_id in ids:
            children[s.parent_span_id].append(s.span_id)
        else:
            orphans.append(s.span_id)
    return children, roots, orphans


# ---------------------------------------------------------------------------
# random call programs with built-in manual instrumentation


def random_program(rng: random.Random, max_depth: int = 6, max_fanout: int = 4,
                   max_nodes: int = 50):
    """Random call structure: (fn_name, [children]), bounded in size."""
    counter = [0]

    def build(depth: int):
        name = f"fn{counter[0]}"
        counter[0] += 1
        children = []
        if depth < max_depth:
            for _ in range(rng.randint(0, max_fanout)):
                if counter[0] >= max_nodes:
                    break
                children.append(build(depth + 1))
        return (name, children)

    return build(0)


def program_source(program) -> str:
    """Emit a module whose functions carry their own explicit timers.

    Each function appends ('open'|'close', name, perf_counter_ns) to EVENTS,
    so one run yields both the interception tree and an independent
    manually-instrumented record of the same calls.
    """
    lines = ["import time", "", "EVENTS = []", ""]

    def emit(node):
        name, children = node
        for child in children:
            emit(child)
        lines.append(f"def {name}():")
        lines.append(f"    EVENTS.append(('open', '{name}', time.perf_counter_ns()))")
        for child in children:
            lines.append(f"    {child[0]}()")
        lines.append(f"    EVENTS.append(('close', '{name}', time.perf_counter_ns()))")
        lines.append("")

    emit(program)
    return "\n".join(lines)


def program_names(program) -> list[str]:
    names = [program[0]]
    for child in program[1]:
        names.extend(program_names(child))
    return names


def events_to_tree(events):
    """Replay manual-timer events into (name, span_us, [children])."""
    top: list = [None, None, []]
    stack = [top]
    for kind, name, t_ns in events:
        if kind == "open":
            frame = [name, t_ns, []]
            stack[-1][2].append(frame)
            stack.append(frame)
        else:
            frame = stack.pop()
            assert frame[0] == name, "manual-timer events are unbalanced"
            frame[1] = (t_ns - frame[1]) / 1000.0  # open time -> span in us

    assert len(stack) == 1 and len(top[2]) == 1

    def freeze(frame):
        return (frame[0], frame[1], [freeze(c) for c in frame[2]])

    return freeze(top[2][0])


def interception_tree_to_shape(node: TreeNode):
    return (node.name, node.span, [interception_tree_to_shape(c) for c in node.children])
