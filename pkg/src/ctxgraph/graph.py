"""Graph model, validation, union-node condensation and context propagation."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

from . import canonical
from .context import EMPTY, ORIGIN, ORIGIN_DEPTH, Context, context_union, union_all


class GraphError(ValueError):
    """Base class for graph declaration and validation errors."""


class GraphFormatError(GraphError):
    """The graph document is not shaped like a graph spec."""


class UnknownNodeError(GraphError):
    pass


class DuplicateNodeError(GraphError):
    pass


class OverlappingGroupError(GraphError):
    pass


class InvalidGroupError(GraphError):
    pass


class DanglingInputError(GraphError):
    pass


class CycleError(GraphError):
    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("cycle: " + " -> ".join(self.cycle + self.cycle[:1]))


@dataclass(frozen=True)
class Literal:
    value: Any

    def to_dict(self) -> dict:
        return {"literal": self.value}


@dataclass(frozen=True)
class OutputOf:
    node: str

    def to_dict(self) -> dict:
        return {"output_of": self.node}


def parse_ref(raw: Any) -> Literal | OutputOf:
    if isinstance(raw, (Literal, OutputOf)):
        return raw
    if isinstance(raw, str) and raw.startswith("output-of:"):
        return OutputOf(raw[len("output-of:"):])
    if isinstance(raw, Mapping) and len(raw) == 1:
        if "literal" in raw:
            return Literal(raw["literal"])
        if "output_of" in raw and isinstance(raw["output_of"], str):
            return OutputOf(raw["output_of"])
    raise GraphFormatError(f"bad input reference: {raw!r}")


@dataclass(frozen=True)
class NodeDecl:
    id: str
    task: str
    data: Mapping[str, Any] = field(default_factory=dict)
    inputs: Mapping[str, Literal | OutputOf] = field(default_factory=dict)

    @property
    def psi(self) -> Context:
        return Context.from_data(self.id, self.data)

    def references(self) -> list[str]:
        return [r.node for r in self.inputs.values() if isinstance(r, OutputOf)]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "data": dict(self.data),
            "inputs": {k: v.to_dict() for k, v in self.inputs.items()},
        }


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple[NodeDecl, ...]
    edges: tuple[tuple[str, str], ...] = ()
    codependent_groups: tuple[tuple[str, ...], ...] = ()
    origin_context: Context = EMPTY

    @classmethod
    def build(cls, nodes, edges=(), groups=(), origin=None) -> "GraphSpec":
        """Convenience constructor accepting plain Python values."""
        decls = []
        for n in nodes:
            if isinstance(n, NodeDecl):
                decls.append(n)
            elif isinstance(n, str):
                decls.append(NodeDecl(n, "noop"))
            else:
                decls.append(_node_from_dict(n))
        if origin is None:
            origin_ctx = EMPTY
        elif isinstance(origin, Context):
            origin_ctx = origin
        else:
            origin_ctx = Context.from_data(ORIGIN, origin)
        return cls(
            nodes=tuple(decls),
            edges=tuple((str(a), str(b)) for a, b in edges),
            codependent_groups=tuple(tuple(g) for g in groups),
            origin_context=origin_ctx,
        )

    @classmethod
    def from_dict(cls, doc: Any) -> "GraphSpec":
        if not isinstance(doc, Mapping):
            raise GraphFormatError("graph document must be a JSON object")
        origin = doc.get("origin_context", {})
        if not isinstance(origin, Mapping):
            raise GraphFormatError("origin_context must be an object")
        nodes = doc.get("nodes")
        if not isinstance(nodes, list):
            raise GraphFormatError("nodes must be a list")
        edges = doc.get("edges", [])
        if not isinstance(edges, list) or not all(
            isinstance(e, list) and len(e) == 2 and all(isinstance(x, str) for x in e) for e in edges
        ):
            raise GraphFormatError("edges must be a list of [from, to] pairs")
        groups = doc.get("codependent_groups", [])
        if not isinstance(groups, list) or not all(
            isinstance(g, list) and all(isinstance(x, str) for x in g) for g in groups
        ):
            raise GraphFormatError("codependent_groups must be a list of id lists")
        return cls.build([_node_from_dict(n) for n in nodes], edges, groups, dict(origin))

    @classmethod
    def load(cls, path: str | Path) -> "GraphSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "origin_context": {e.key: e.to_dict()["value"] for e in self.origin_context},
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "codependent_groups": [list(g) for g in self.codependent_groups],
        }

    def node(self, node_id: str) -> NodeDecl:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise UnknownNodeError(node_id)


def _node_from_dict(raw: Any) -> NodeDecl:
    if not isinstance(raw, Mapping) or not isinstance(raw.get("id"), str):
        raise GraphFormatError(f"node declaration needs a string id: {raw!r}")
    data = raw.get("data", {})
    inputs = raw.get("inputs", {})
    if not isinstance(data, Mapping) or not isinstance(inputs, Mapping):
        raise GraphFormatError(f"node {raw['id']!r}: data and inputs must be objects")
    return NodeDecl(
        id=raw["id"],
        task=str(raw.get("task", "noop")),
        data=dict(data),
        inputs={str(k): parse_ref(v) for k, v in inputs.items()},
    )


@dataclass(frozen=True)
class SuperNode:
    id: str
    members: tuple[str, ...]

    @property
    def is_group(self) -> bool:
        return len(self.members) > 1


@dataclass(frozen=True)
class CondensedGraph:
    supernodes: tuple[SuperNode, ...]
    superedges: tuple[tuple[str, str], ...]
    topo_waves: tuple[tuple[str, ...], ...]
    node_to_super: Mapping[str, str]

    def supernode(self, sid: str) -> SuperNode:
        return self._by_id[sid]

    @cached_property
    def _by_id(self) -> dict[str, SuperNode]:
        return {s.id: s for s in self.supernodes}

    @cached_property
    def _parents(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {s.id: [] for s in self.supernodes}
        for a, b in self.superedges:
            out[b].append(a)
        return out

    @cached_property
    def _children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {s.id: [] for s in self.supernodes}
        for a, b in self.superedges:
            out[a].append(b)
        return out

    def parents(self) -> dict[str, list[str]]:
        return self._parents

    def children(self) -> dict[str, list[str]]:
        return self._children

    def depths(self) -> dict[str, int]:
        """Wave index of every original node; ORIGIN at -1."""
        out = {ORIGIN: ORIGIN_DEPTH}
        for i, wave in enumerate(self.topo_waves):
            for sid in wave:
                for m in self.supernode(sid).members:
                    out[m] = i
        return out

    def descendants(self, sid: str) -> set[str]:
        kids = self.children()
        seen: set[str] = set()
        stack = [sid]
        while stack:
            for c in kids[stack.pop()]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def ancestors(self, sid: str) -> set[str]:
        pars = self.parents()
        seen: set[str] = set()
        stack = [sid]
        while stack:
            for p in pars[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def to_dict(self) -> dict:
        return {
            "supernodes": [{"id": s.id, "members": list(s.members)} for s in self.supernodes],
            "superedges": [list(e) for e in self.superedges],
            "topo_waves": [list(w) for w in self.topo_waves],
        }


def _check_structure(spec: GraphSpec) -> None:
    ids = [n.id for n in spec.nodes]
    seen: set[str] = set()
    for i in ids:
        if i == ORIGIN:
            raise GraphFormatError(f"{ORIGIN!r} is reserved and cannot be a node id")
        if i in seen:
            raise DuplicateNodeError(f"duplicate node id {i!r}")
        seen.add(i)
    for a, b in spec.edges:
        for x in (a, b):
            if x not in seen:
                raise UnknownNodeError(f"edge {a}->{b} references undeclared node {x!r}")
        if a == b:
            raise CycleError([a])
    owner: dict[str, int] = {}
    for gi, group in enumerate(spec.codependent_groups):
        if len(set(group)) < 2:
            raise InvalidGroupError(f"codependent group {list(group)} needs at least 2 distinct members")
        for m in group:
            if m not in seen:
                raise UnknownNodeError(f"group {list(group)} references undeclared node {m!r}")
            if m in owner and owner[m] != gi:
                raise OverlappingGroupError(f"node {m!r} is in more than one codependent group")
            owner[m] = gi
    for n in spec.nodes:
        for ref in n.references():
            if ref not in seen:
                raise UnknownNodeError(f"node {n.id!r} input references undeclared node {ref!r}")


def condense(spec: GraphSpec) -> CondensedGraph:
    """Collapse each codependent group into one supernode and layer the result.

    Edges inside a group disappear; every other edge of a member becomes an
    edge of the group's supernode.  Raises CycleError if the quotient
    relation is cyclic.
    """
    _check_structure(spec)
    order = {n.id: i for i, n in enumerate(spec.nodes)}
    node_to_super: dict[str, str] = {}
    supers: list[SuperNode] = []
    grouped: dict[str, tuple[str, ...]] = {}
    for group in spec.codependent_groups:
        members = tuple(sorted(set(group), key=order.__getitem__))
        for m in members:
            grouped[m] = members
    for n in spec.nodes:
        if n.id in node_to_super:
            continue
        members = grouped.get(n.id, (n.id,))
        sid = members[0] if len(members) == 1 else "{" + ",".join(members) + "}"
        supers.append(SuperNode(sid, members))
        for m in members:
            node_to_super[m] = sid

    sorder = {s.id: i for i, s in enumerate(supers)}
    edge_set = set()
    for a, b in spec.edges:
        sa, sb = node_to_super[a], node_to_super[b]
        if sa != sb:
            edge_set.add((sa, sb))
    superedges = tuple(sorted(edge_set, key=lambda e: (sorder[e[0]], sorder[e[1]])))

    indeg = {s.id: 0 for s in supers}
    kids: dict[str, list[str]] = {s.id: [] for s in supers}
    for a, b in superedges:
        indeg[b] += 1
        kids[a].append(b)
    waves: list[tuple[str, ...]] = []
    frontier = [s.id for s in supers if indeg[s.id] == 0]
    placed = 0
    while frontier:
        wave = tuple(sorted(frontier, key=sorder.__getitem__))
        waves.append(wave)
        placed += len(wave)
        nxt = []
        for sid in wave:
            for c in kids[sid]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    nxt.append(c)
        frontier = nxt
    if placed != len(supers):
        remaining = {s for s, d in indeg.items() if d > 0}
        raise CycleError(_witness_cycle(remaining, kids, sorder))
    return CondensedGraph(tuple(supers), superedges, tuple(waves), node_to_super)


def _witness_cycle(remaining: set[str], kids: dict[str, list[str]], sorder) -> list[str]:
    # Every node left after Kahn's pass has a predecessor that is also left,
    # so walking predecessors inside `remaining` must revisit a node.
    preds: dict[str, str] = {}
    for a in sorted(remaining, key=sorder.__getitem__):
        for b in kids[a]:
            if b in remaining and b not in preds:
                preds[b] = a
    start = min(remaining, key=sorder.__getitem__)
    path: list[str] = []
    pos: dict[str, int] = {}
    cur = start
    while cur not in pos:
        pos[cur] = len(path)
        path.append(cur)
        cur = preds[cur]
    cycle = path[pos[cur]:]
    cycle.reverse()
    return cycle


def compute_contexts(
    condensed: CondensedGraph, origin: Context, data: Mapping[str, Context]
) -> dict[str, Context]:
    """Assign every node its context, processing supernodes wave by wave.

    A parentless supernode inherits ``origin``; any other inherits the union
    of its parents' contexts. The supernode then adds the data of all its
    members, and every member receives the same result.
    """
    parents = condensed.parents()
    by_super: dict[str, Context] = {}
    out: dict[str, Context] = {}
    for wave in condensed.topo_waves:
        for sid in wave:
            ps = parents[sid]
            inherited = origin if not ps else union_all(by_super[p] for p in ps)
            members = condensed.supernode(sid).members
            ctx = inherited
            for m in members:
                ctx = context_union(ctx, data.get(m, EMPTY))
            by_super[sid] = ctx
            for m in members:
                out[m] = ctx
    return out


@dataclass(frozen=True)
class ValidatedGraph:
    spec: GraphSpec
    condensed: CondensedGraph
    contexts: Mapping[str, Context]

    @cached_property
    def depths(self) -> dict[str, int]:
        return self.condensed.depths()

    @cached_property
    def nodes(self) -> dict[str, NodeDecl]:
        return {n.id: n for n in self.spec.nodes}

    def origin_depths(self, node_id: str) -> dict[str, int]:
        d = self.depths
        return {o: d[o] for o in sorted(self.contexts[node_id].origins)}

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "condensed": self.condensed.to_dict(),
            "contexts": {n.id: self.contexts[n.id].to_list() for n in self.spec.nodes},
        }

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())


def validate_graph(spec: GraphSpec) -> ValidatedGraph:
    condensed = condense(spec)
    nodes = {n.id: n for n in spec.nodes}
    order = {n.id: i for i, n in enumerate(spec.nodes)}
    for n in spec.nodes:
        sid = condensed.node_to_super[n.id]
        ancestors = condensed.ancestors(sid)
        for ref in n.references():
            rs = condensed.node_to_super[ref]
            if rs in ancestors:
                continue
            # earlier members of the same union node run first in one dispatch
            if rs == sid and order[ref] < order[n.id]:
                continue
            raise DanglingInputError(f"node {n.id!r} reads output of {ref!r}, which is not an ancestor")
    data = {nid: nd.psi for nid, nd in nodes.items()}
    contexts = compute_contexts(condensed, spec.origin_context, data)
    return ValidatedGraph(spec, condensed, contexts)
