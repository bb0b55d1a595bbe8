"""hiq: declarative, non-intrusive runtime tracing.

Intercept named functions in unmodified code, build per-metric interval
call trees with exact tracing overhead, ship them to sinks, and tune
tracing on a live process through a shared-memory control plane.
"""

from __future__ import annotations

import contextlib

from .control import ControlBlock, ControlView, effective_state, read_control, write_control
from .declaration import (
    Declaration,
    DeclarationError,
    ResolutionError,
    TraceTarget,
    load_declaration,
    parse_declaration,
    resolve_target,
)
from .interceptor import ContextState, InstallError, install, uninstall
from .metrics import MetricKind, MetricProvider, builtin_provider, get_provider, register_provider
from .registry import Sink, TreeBatch, TreeMap
from .tree import (
    HiQTree,
    SpanRecord,
    TreeNode,
    compute_overhead_percent,
    concise_filter,
    reconstruct_service_tree,
    render_tree,
    tree_to_wire,
    wire_to_tree,
)

__version__ = "0.1.0"


@contextlib.contextmanager
def tracing(declaration, metric_names=("latency",), **ctx_kwargs):
    """Install interception for the scope of a ``with`` block.

    Finished trees go to the ``tree_sink`` keyword (a callable); pass
    ``tree_sink=trees.append`` to just collect them.
    """
    if isinstance(declaration, str):
        declaration = parse_declaration(declaration)
    providers = [get_provider(name) for name in metric_names]
    ctx = install(declaration, providers, **ctx_kwargs)
    try:
        yield ctx
    finally:
        uninstall(ctx)
