"""The driver executable.

``hiq run`` loads a declaration, installs interception, invokes the target
entry point unchanged, and on completion flushes buffered trees and renders
the latency tree (with its OH line). The target's exit status is preserved,
and nothing is written to the target's standard output except that final
render, which ``--render-to`` can redirect.

``hiq render`` re-renders trees from a JSONL sink file offline.
"""

from __future__ import annotations

import argparse
import importlib
import json
import os
import queue
import sys
import traceback

from . import control, metrics, registry, tree
from .declaration import DeclarationError, load_declaration, parse_declaration
from .interceptor import ContextState, InstallError, RestoreError, install, uninstall

ENV_DECL = "HIQ_DECL"

EXIT_SETUP_FAILURE = 2


def _split_target_args(argv: list[str]) -> tuple[list[str], list[str]]:
    """Split our args from the target's at the first bare ``--``."""
    if "--" in argv:
        i = argv.index("--")
        return argv[:i], argv[i + 1:]
    return argv, []


def _build_run_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiq run", description="Trace a target entry point."
    )
    parser.add_argument("--decl", default=os.environ.get(ENV_DECL),
                        help="declaration JSON file (env fallback HIQ_DECL)")
    parser.add_argument("--decl-json", metavar="JSON",
                        help="inline declaration JSON (alternative to --decl)")
    parser.add_argument("--entry", required=True, metavar="MOD:FN",
                        help="target entry point, e.g. demo:main")
    parser.add_argument("--metrics", default="latency",
                        help="comma-separated metric names (default: latency)")
    parser.add_argument("--sink", action="append", default=[], metavar="SPEC",
                        help="stdout, file:PATH, or a collector http URL; repeatable")
    parser.add_argument("--ctrl", default=os.environ.get(control.ENV_CTRL_PATH),
                        help="control file path (env fallback HIQ_CTRL_PATH)")
    parser.add_argument("--concise-ms", type=int, default=0,
                        help="drop latency nodes with span below this many ms")
    parser.add_argument("--format", choices=(tree.FORMAT_ABSOLUTE, tree.FORMAT_PERCENT),
                        default=tree.FORMAT_ABSOLUTE)
    parser.add_argument("--render-to", metavar="PATH",
                        help="write the final render here instead of stdout")
    parser.add_argument("--max-size", type=int, default=registry.DEFAULT_MAX_SIZE,
                        help="tree-map flush threshold")
    return parser


def _resolve_entry(entry: str):
    """Validate MOD:FN and return (module, fn_name).

    The attribute itself is fetched again after interception is installed,
    so an entry that is also a declared target routes through its wrapper.
    """
    module_name, sep, func_name = entry.partition(":")
    if not sep or not module_name or not func_name:
        raise DeclarationError(f"entry must look like MOD:FN, got '{entry}'")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise DeclarationError(f"cannot import entry module '{module_name}': {exc}") from exc
    fn = getattr(module, func_name, None)
    if fn is None or not callable(fn):
        raise DeclarationError(f"entry '{func_name}' not found or not callable in '{module_name}'")
    return module, func_name


def cmd_run(argv: list[str]) -> int:
    argv, target_args = _split_target_args(argv)
    args = _build_run_parser().parse_args(argv)

    # -- setup: any failure here exits 2 without running the target
    try:
        if args.decl_json:
            declaration = parse_declaration(args.decl_json)
        elif args.decl:
            declaration = load_declaration(args.decl)
        else:
            raise DeclarationError("no declaration: pass --decl/--decl-json or set HIQ_DECL")
        providers = [metrics.get_provider(n.strip()) for n in args.metrics.split(",") if n.strip()]
        if not providers:
            raise metrics.MetricError("no metrics selected")
        sinks = [registry.Sink.from_spec(s) for s in args.sink]
        entry_module, entry_name = _resolve_entry(args.entry)

        out_queue: queue.Queue = queue.Queue(registry.DEFAULT_QUEUE_CAPACITY)
        tree_map = registry.TreeMap(max_size=args.max_size, out_queue=out_queue)
        worker = registry.ShippingWorker(out_queue, sinks).start() if sinks else None

        last_latency: list[tree.HiQTree] = []

        def sink(finished: tree.HiQTree) -> None:
            if finished.metric.kind == "latency":
                last_latency[:] = [finished]
            if worker is not None:
                tree_map.put_tree(finished)

        view = control.ControlView(args.ctrl) if args.ctrl else None
        ctx = ContextState(
            declaration,
            providers,
            control=view,
            tree_sink=sink,
            concise_threshold_us=args.concise_ms * 1000,
        )
        install(declaration, providers, ctx)
    except (DeclarationError, metrics.MetricError, registry.SinkError, InstallError,
            OSError) as exc:
        print(f"hiq: setup failed: {exc}", file=sys.stderr)
        return EXIT_SETUP_FAILURE

    # -- run the target with its own argv
    entry_fn = getattr(entry_module, entry_name)  # post-install: may be a wrapper
    saved_argv = sys.argv
    sys.argv = [args.entry] + target_args
    status = 0
    try:
        try:
            entry_fn()
        except SystemExit as exc:
            code = exc.code
            if code is None:
                status = 0
            elif isinstance(code, int):
                status = code
            else:
                print(code, file=sys.stderr)
                status = 1
        except BaseException:
            traceback.print_exc()
            status = 1
    finally:
        sys.argv = saved_argv
        try:
            uninstall(ctx)
        except RestoreError as exc:
            print(f"hiq: {exc}", file=sys.stderr)
        tree_map.flush_now()
        if worker is not None:
            worker.stop()

    _render_final(last_latency, args)
    return status


def _render_final(last_latency: list[tree.HiQTree], args) -> None:
    if not last_latency:
        print("hiq: no latency tree captured", file=sys.stderr)
        return
    text = tree.render_tree(last_latency[0], format=args.format)
    if args.render_to:
        with open(args.render_to, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_render(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(
        prog="hiq render", description="Render trees from a JSONL sink file."
    )
    parser.add_argument("file", help="JSONL file written by a file sink")
    parser.add_argument("--tree-id", help="render this tree (default: the last one)")
    parser.add_argument("--format", choices=(tree.FORMAT_ABSOLUTE, tree.FORMAT_PERCENT),
                        default=tree.FORMAT_ABSOLUTE)
    args = parser.parse_args(argv)

    selected: tree.HiQTree | None = None
    with open(args.file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                candidate = tree.wire_to_tree(json.loads(line))
            except (json.JSONDecodeError, tree.WireDecodeError) as exc:
                print(f"hiq: skipping line {lineno}: {exc}", file=sys.stderr)
                continue
            if args.tree_id is None or candidate.tree_id == args.tree_id:
                selected = candidate
    if selected is None:
        print("hiq: no trees", file=sys.stderr)
        return 1
    print(tree.render_tree(selected, format=args.format))
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: hiq {run,render} ...\n\n"
              "  run     trace a target entry point\n"
              "  render  render trees from a JSONL file", file=sys.stderr)
        return 0 if argv else EXIT_SETUP_FAILURE
    command, rest = argv[0], argv[1:]
    if command == "run":
        return cmd_run(rest)
    if command == "render":
        return cmd_render(rest)
    print(f"hiq: unknown command '{command}'", file=sys.stderr)
    return EXIT_SETUP_FAILURE


if __name__ == "__main__":
    sys.exit(main())
