"""Provenance-tagged contexts.

A :class:`Context` is a set of ``(origin, key, value)`` entries.  The origin
is the id of the node whose data produced the entry, or :data:`ORIGIN` for
facts supplied before any computation.  Because every entry keeps its
origin, union never has to pick a winner; :func:`flatten` is the only place
where a single value per key is chosen.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from typing import Any

from . import canonical

ORIGIN = "ORIGIN"
ORIGIN_DEPTH = -1


class ConflictError(ValueError):
    """Two contexts disagree on the value of the same (origin, key)."""

    def __init__(self, origin: str, key: str, left: Any, right: Any):
        super().__init__(f"conflicting values for ({origin!r}, {key!r}): {left!r} != {right!r}")
        self.origin = origin
        self.key = key


class FrozenMap(Mapping):
    """Hashable read-only mapping used for structured context values."""

    __slots__ = ("_data", "_hash")

    def __init__(self, items: Iterable[tuple[str, Any]]):
        self._data = dict(items)
        self._hash = None

    def __getitem__(self, key):
        return self._data[key]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(frozenset(self._data.items()))
        return self._hash

    def __repr__(self):
        return f"FrozenMap({self._data!r})"


def freeze(value: Any) -> Any:
    if isinstance(value, Mapping):
        return FrozenMap((str(k), freeze(v)) for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return tuple(freeze(v) for v in value)
    return value


def thaw(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: thaw(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return [thaw(v) for v in value]
    return value


@dataclass(frozen=True)
class ContextEntry:
    origin: str
    key: str
    value: Any

    def to_dict(self) -> dict:
        return {"origin": self.origin, "key": self.key, "value": thaw(self.value)}


class Context:
    """Immutable set of :class:`ContextEntry` with set-union semantics."""

    __slots__ = ("_items", "_canon", "_hash")

    def __init__(self, entries: Iterable[ContextEntry | tuple] = ()):
        items: dict[tuple[str, str], Any] = {}
        canon: dict[tuple[str, str], str] = {}
        for e in entries:
            if not isinstance(e, ContextEntry):
                e = ContextEntry(*e)
            if not canonical.is_json_value(thaw(e.value)):
                raise TypeError(f"context value for {e.key!r} is not a JSON value: {e.value!r}")
            slot = (str(e.origin), str(e.key))
            text = canonical.dumps(thaw(e.value))
            if slot in canon and canon[slot] != text:
                raise ConflictError(slot[0], slot[1], thaw(items[slot]), thaw(e.value))
            items[slot] = freeze(e.value)
            canon[slot] = text
        self._items = items
        self._canon = canon
        self._hash = None

    @classmethod
    def from_data(cls, origin: str, data: Mapping[str, Any]) -> "Context":
        """Entries contributed by one node (or by the origin) from a plain mapping."""
        return cls(ContextEntry(origin, k, v) for k, v in data.items())

    @classmethod
    def from_list(cls, raw: Iterable[Mapping[str, Any]]) -> "Context":
        return cls(ContextEntry(d["origin"], d["key"], d["value"]) for d in raw)

    @property
    def entries(self) -> tuple[ContextEntry, ...]:
        return tuple(ContextEntry(o, k, self._items[(o, k)]) for o, k in sorted(self._items))

    @property
    def origins(self) -> set[str]:
        return {o for o, _ in self._items}

    def get(self, origin: str, key: str, default: Any = None) -> Any:
        return thaw(self._items.get((origin, key), default))

    def union(self, other: "Context") -> "Context":
        return context_union(self, other)

    __or__ = union

    def to_list(self) -> list[dict]:
        """Wire form: entries sorted by (origin, key)."""
        return [e.to_dict() for e in self.entries]

    def __iter__(self) -> Iterator[ContextEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item) -> bool:
        if isinstance(item, ContextEntry):
            slot = (item.origin, item.key)
            return slot in self._canon and self._canon[slot] == canonical.dumps(thaw(item.value))
        return False

    def __eq__(self, other) -> bool:
        if not isinstance(other, Context):
            return NotImplemented
        return self._canon == other._canon

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self._canon.items()))
        return self._hash

    def __le__(self, other: "Context") -> bool:
        return all(other._canon.get(s) == t for s, t in self._canon.items())

    def __repr__(self) -> str:
        inner = ", ".join(f"({o}, {k!r}, {thaw(v)!r})" for (o, k), v in sorted(self._items.items()))
        return f"Context({{{inner}}})"


EMPTY = Context()


def context_union(a: Context, b: Context) -> Context:
    """Set union of two contexts.

    Raises ConflictError if the same (origin, key) carries different values,
    which can only happen when contexts from different graphs are mixed.
    """
    if not len(b):
        return a
    if not len(a):
        return b
    for slot, text in b._canon.items():
        if slot in a._canon and a._canon[slot] != text:
            raise ConflictError(slot[0], slot[1], thaw(a._items[slot]), thaw(b._items[slot]))
    merged = Context()
    merged._items = {**a._items, **b._items}
    merged._canon = {**a._canon, **b._canon}
    return merged


def union_all(contexts: Iterable[Context]) -> Context:
    out = EMPTY
    for c in contexts:
        out = context_union(out, c)
    return out


def flatten(ctx: Context, node_depths: Mapping[str, int]) -> dict[str, Any]:
    """Collapse a context into a plain key -> value view.

    For each key the entry whose origin is deepest in the graph wins; equal
    depths fall back to the lexicographically greatest origin id. ORIGIN
    sits at depth -1 unless overridden.
    """
    best: dict[str, tuple[int, str]] = {}
    out: dict[str, Any] = {}
    for (origin, key), value in ctx._items.items():
        if origin == ORIGIN:
            depth = node_depths.get(ORIGIN, ORIGIN_DEPTH)
        else:
            depth = node_depths[origin]
        rank = (depth, origin)
        if key not in best or rank > best[key]:
            best[key] = rank
            out[key] = value
    return {k: thaw(v) for k, v in sorted(out.items())}
