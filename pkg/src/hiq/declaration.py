"""Parse, validate, and resolve declarations of what to trace.

A declaration is a JSON array of entries, each naming one callable to
intercept::

    [{"name": "f1", "module": "my_model_1", "function": "func1", "class": ""}]

``name`` becomes the tree-node label; ``module``/``class``/``function``
locate the callable. ``class`` may be empty or absent for module-level
functions.
"""

from __future__ import annotations

import importlib
import inspect
import json
import logging
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

_REQUIRED_KEYS = ("name", "module", "function")
_KNOWN_KEYS = frozenset(_REQUIRED_KEYS + ("class",))


class DeclarationError(Exception):
    """A declaration could not be parsed or validated."""


class ResolutionError(DeclarationError):
    """A declared target could not be resolved to a live callable."""


@dataclass(frozen=True)
class TraceTarget:
    """One callable to intercept, plus the label its tree nodes carry."""

    name: str
    module: str
    function: str
    class_name: str = ""

    def key(self) -> tuple[str, str, str]:
        return (self.module, self.class_name, self.function)


@dataclass(frozen=True)
class Declaration:
    targets: tuple[TraceTarget, ...]
    source_path: str = "<inline>"

    def to_json(self) -> str:
        """Serialize back to the canonical JSON array form."""
        entries = [
            {
                "name": t.name,
                "module": t.module,
                "function": t.function,
                "class": t.class_name,
            }
            for t in self.targets
        ]
        return json.dumps(entries, indent=2)


@dataclass(frozen=True)
class ResolvedTarget:
    """A target bound to its live attachment site.

    ``owner`` is the module object for module-level functions, or the class
    object when ``class_name`` is set. Rebinding ``owner.<attr_name>`` is how
    interception is installed; resolution itself never mutates anything.
    """

    target: TraceTarget
    owner: object
    attr_name: str
    original: object = field(repr=False)


def parse_declaration(text: str, source_path: str = "<inline>") -> Declaration:
    """Parse a UTF-8 JSON declaration into a validated Declaration.

    Entry order is preserved. Unknown keys are ignored with a warning, and a
    missing "class" key defaults to "" (module-level function).
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DeclarationError(
            f"malformed declaration JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc

    if not isinstance(data, list):
        raise DeclarationError(
            f"declaration must be a top-level array, got {type(data).__name__}"
        )

    targets: list[TraceTarget] = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise DeclarationError(f"entry {i}: expected an object, got {type(entry).__name__}")
        for key in _REQUIRED_KEYS:
            if key not in entry:
                raise DeclarationError(f"entry {i}: missing required key '{key}'")
        for key in _REQUIRED_KEYS:
            if not isinstance(entry[key], str):
                raise DeclarationError(f"entry {i}: '{key}' must be a string")
            if not entry[key]:
                raise DeclarationError(f"entry {i}: '{key}' must be non-empty")
        class_name = entry.get("class", "")
        if not isinstance(class_name, str):
            raise DeclarationError(f"entry {i}: 'class' must be a string")
        unknown = set(entry) - _KNOWN_KEYS
        if unknown:
            logger.warning(
                "declaration entry %d (%r): ignoring unknown keys %s",
                i,
                entry["name"],
                sorted(unknown),
            )
        targets.append(
            TraceTarget(
                name=entry["name"],
                module=entry["module"],
                function=entry["function"],
                class_name=class_name,
            )
        )

    _check_unique(targets)
    return Declaration(targets=tuple(targets), source_path=source_path)


def load_declaration(path: str) -> Declaration:
    with open(path, encoding="utf-8") as fh:
        return parse_declaration(fh.read(), source_path=path)


def _check_unique(targets: list[TraceTarget]) -> None:
    by_name: dict[str, int] = {}
    by_key: dict[tuple[str, str, str], int] = {}
    for i, t in enumerate(targets):
        if t.name in by_name:
            raise DeclarationError(
                f"duplicate name '{t.name}' in entries {by_name[t.name]} and {i}"
            )
        by_name[t.name] = i
        if t.key() in by_key:
            raise DeclarationError(
                f"duplicate target (module, class, function)={t.key()!r} "
                f"in entries {by_key[t.key()]} and {i}"
            )
        by_key[t.key()] = i


def resolve_target(target: TraceTarget) -> ResolvedTarget:
    """Resolve a target to (owner, attribute) plus the original callable.

    Importing the target's module is the only side effect; the module is
    never mutated here. One level of class nesting is supported; dotted
    class names are rejected.
    """
    try:
        module = importlib.import_module(target.module)
    except ImportError as exc:
        raise ResolutionError(f"module '{target.module}' is not importable: {exc}") from exc

    owner: object = module
    where = target.module
    if target.class_name:
        if "." in target.class_name:
            raise ResolutionError(
                f"nested class path '{target.class_name}' is not supported "
                f"(one class level only)"
            )
        cls = getattr(module, target.class_name, None)
        if cls is None:
            raise ResolutionError(f"{target.class_name} not found in {target.module}")
        if not isinstance(cls, type):
            raise ResolutionError(
                f"'{target.class_name}' in {target.module} is not a class"
            )
        owner = cls
        where = f"{target.module}.{target.class_name}"

    if not hasattr(owner, target.function):
        raise ResolutionError(f"{target.function} not found in {where}")
    original = getattr(owner, target.function)
    if not callable(original):
        raise ResolutionError(f"'{target.function}' in {where} is not callable")
    if target.class_name:
        # Rebinding a plain wrapper over these would change their binding
        # behavior, silently corrupting the target class.
        raw = inspect.getattr_static(owner, target.function, None)
        if isinstance(raw, (staticmethod, classmethod)):
            raise ResolutionError(
                f"'{target.function}' in {where} is a "
                f"{type(raw).__name__}; only plain methods are interceptable"
            )

    return ResolvedTarget(target=target, owner=owner, attr_name=target.function, original=original)
