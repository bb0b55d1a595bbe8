"""Non-intrusive function interception.

Declared callables are rebound at their attachment site to wrappers that
sample the selected metrics before and after delegating to the original,
build the per-thread node stacks, and account their own cost. Return values
and exceptions pass through unchanged.

Measurement semantics: a node's span is taken from samples inside the
wrapper (just before and just after bookkeeping around the original call),
so it slightly exceeds the bare call by the sampling cost. The wrapper's own
pre/post time — (t1 - t0) + (t3 - t2) on the timeline below — is never
folded into node spans; it accumulates per thread and is attached once to
each finished tree as ``overhead_us``::

    t0 | control check, sampling, open nodes | t1 | original | t2 | sampling,
    close nodes | t3

For a root call, t3 is taken just before the finished tree is sealed and
emitted, so emission cost itself stays outside that tree's figure.

All mutable tracing state lives in thread locals; each thread emits its own
trees. Install/uninstall must run while no traced call is in flight.
"""

from __future__ import annotations

import functools
import logging
import os
import random
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable

from .control import ControlBlock, ControlView, DEFAULT_BLOCK, effective_state
from .declaration import Declaration, ResolutionError, ResolvedTarget, TraceTarget, resolve_target
from .metrics import MetricProvider
from .tree import HiQTree, TreeNode, close_node, concise_filter, open_node

logger = logging.getLogger(__name__)


class InstallError(Exception):
    pass


class RestoreError(InstallError):
    """One or more sites could not be restored on uninstall."""


def _clock_us(_pc=time.perf_counter_ns) -> int:
    # default-arg binding keeps the hot path free of a global lookup
    return _pc() // 1000


@dataclass
class Installation:
    target: TraceTarget
    site: tuple[object, str]
    original: Callable[..., Any] = field(repr=False)
    wrapper: Callable[..., Any] = field(repr=False)
    installed: bool = True


class _ThreadState:
    __slots__ = ("stacks", "acc", "skip")

    def __init__(self, metric_names: tuple[str, ...]):
        self.stacks: dict[str, list[TreeNode]] = {m: [] for m in metric_names}
        self.acc: dict[str, int] = {m: 0 for m in metric_names}
        self.skip = 0  # >0 while inside a sampling-rejected root call


class ContextState:
    """Shared state for one tracing session.

    Holds the declaration, the selected providers (one stack and one
    overhead accumulator per provider per thread), the cached control view,
    and the sink that receives finished trees. ``clock`` returns integer
    microseconds and exists so tests can inject a deterministic clock.
    """

    def __init__(
        self,
        declaration: Declaration,
        providers: list[MetricProvider],
        *,
        control: ControlView | None = None,
        tree_sink: Callable[[HiQTree], None] | None = None,
        clock: Callable[[], int] = _clock_us,
        concise_threshold_us: int = 0,
        rng: random.Random | None = None,
    ):
        if not providers:
            raise ValueError("at least one metric provider is required")
        names = [p.name for p in providers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate metric providers: {names}")
        self.declaration = declaration
        self.providers = tuple(providers)
        self.control = control
        self.tree_sink = tree_sink
        self.clock = clock
        self.concise_threshold_us = concise_threshold_us
        self.installations: list[Installation] = []
        self._metric_names = tuple(names)
        self._tls = threading.local()
        self._rng = rng or random.Random()
        self._in_flight = 0
        self._pid = os.getpid()

    def thread_state(self) -> _ThreadState:
        try:
            return self._tls.st
        except AttributeError:
            st = self._tls.st = _ThreadState(self._metric_names)
            return st

    def control_snapshot(self) -> ControlBlock:
        if self.control is None:
            return DEFAULT_BLOCK
        return self.control.current()

    def _emit(self, provider: MetricProvider, root: TreeNode, overhead_us: int) -> None:
        tree = HiQTree(
            root=root,
            metric=provider.kind,
            overhead_us=overhead_us,
            tree_id=uuid.uuid4().hex,
            process_id=self._pid,
            thread_id=threading.get_ident(),
            created_at_us=int(time.time() * 1e6),
        )
        threshold = self.concise_threshold_us
        block_threshold = self.control_snapshot().concise_threshold_us
        if block_threshold > 0:
            threshold = block_threshold
        if threshold > 0 and provider.kind.kind == "latency":
            tree = concise_filter(tree, threshold)
        if self.tree_sink is not None:
            try:
                self.tree_sink(tree)
            except Exception:
                logger.exception("tree sink failed; tree %s dropped", tree.tree_id)


def install(declaration: Declaration, providers: list[MetricProvider],
            ctx: ContextState | None = None, **ctx_kwargs) -> ContextState:
    """Resolve every target and rebind its site to a tracing wrapper.

    All-or-nothing: if any target fails to resolve, no site is touched and
    the error lists every failing target. Installing an already-installed
    context is a no-op.
    """
    if ctx is None:
        ctx = ContextState(declaration, providers, **ctx_kwargs)
    if ctx.installations:
        return ctx

    resolved: list[ResolvedTarget] = []
    failures: list[str] = []
    for target in declaration.targets:
        try:
            resolved.append(resolve_target(target))
        except ResolutionError as exc:
            failures.append(f"{target.name}: {exc}")
    if failures:
        raise InstallError(
            "cannot install, unresolvable targets:\n  " + "\n  ".join(failures)
        )

    for res in resolved:
        wrapper = _make_wrapper(ctx, res.target.name, res.original)
        setattr(res.owner, res.attr_name, wrapper)
        ctx.installations.append(
            Installation(
                target=res.target,
                site=(res.owner, res.attr_name),
                original=res.original,
                wrapper=wrapper,
            )
        )
    return ctx


def uninstall(ctx: ContextState) -> None:
    """Restore every site to its original callable.

    Idempotent. A site rebound by third-party code since install is left as
    found and reported; all other sites are still restored.
    """
    if ctx._in_flight:
        raise InstallError(f"{ctx._in_flight} traced call(s) still in flight")
    conflicts: list[str] = []
    for inst in ctx.installations:
        if not inst.installed:
            continue
        owner, attr = inst.site
        current = getattr(owner, attr, None)
        if current is not inst.wrapper:
            conflicts.append(f"{inst.target.module}.{attr} (rebound by third-party code)")
            continue
        setattr(owner, attr, inst.original)
        inst.installed = False
    if conflicts:
        raise RestoreError("could not restore sites: " + ", ".join(conflicts))


def _make_wrapper(ctx: ContextState, name: str, original: Callable[..., Any]):
    clock = ctx.clock
    thread_state = ctx.thread_state
    snapshot = ctx.control_snapshot
    rng_random = ctx._rng.random

    def _passthrough(st: _ThreadState, t0: int, args, kwargs):
        # Disabled path: delegate directly, still accounting the (near zero)
        # wrapper cost around the call.
        t_call_start = clock()
        try:
            return original(*args, **kwargs)
        finally:
            t_call_end = clock()
            t_exit = clock()
            cost = (t_call_start - t0) + (t_exit - t_call_end)
            for acc_name in st.acc:
                st.acc[acc_name] += cost

    @functools.wraps(original)
    def wrapper(*args, **kwargs):
        t0 = clock()
        st = thread_state()
        if st.skip:
            return _passthrough(st, t0, args, kwargs)

        block = snapshot()
        active = [p for p in ctx.providers if effective_state(block, name, p.name)]
        if not active:
            return _passthrough(st, t0, args, kwargs)

        stacks = st.stacks
        rate = block.sample_rate
        if rate < 1.0 and not any(stacks.values()):  # root-call site
            if rate <= 0.0 or rng_random() >= rate:
                st.skip = 1
                try:
                    return _passthrough(st, t0, args, kwargs)
                finally:
                    st.skip = 0

        ctx._in_flight += 1
        acc = st.acc
        for p in active:
            stack = stacks[p.name]
            if not stack:
                acc[p.name] = 0  # new tree: overhead accounting restarts
            open_node(stack, name, p.sample())
        t1 = clock()
        error = False
        try:
            return original(*args, **kwargs)
        except BaseException:
            error = True
            raise
        finally:
            t2 = clock()
            finished: list[tuple[MetricProvider, TreeNode]] = []
            for p in active:
                stack = stacks[p.name]
                node = close_node(stack, p.sample(), error_flag=error)
                if not stack:
                    finished.append((p, node))
            t3 = clock()
            cost = (t1 - t0) + (t3 - t2)
            for acc_name in acc:
                acc[acc_name] += cost
            for p, root in finished:
                ctx._emit(p, root, acc[p.name])
            ctx._in_flight -= 1

    wrapper.__hiq_wrapped__ = original
    return wrapper
