"""Seeded random graph generators for property tests, scenarios and scripts."""

from __future__ import annotations

import random

from .graph import GraphSpec, Literal, NodeDecl, OutputOf


def _ids(n: int) -> list[str]:
    return [f"n{i:02d}" for i in range(n)]


def layered_graph(
    rng: random.Random,
    n: int,
    edge_prob: float = 0.2,
    group_prob: float = 0.3,
    max_group: int = 3,
    data_keys: int = 3,
    origin_keys: int = 2,
    computing: bool = False,
) -> GraphSpec:
    """Random acyclic graph with codependent groups that never create cycles.

    Nodes are placed in layers and edges only run from a lower layer to a
    higher one, so the graph is a DAG. Groups are drawn from inside a single
    layer (optionally linked by intra-group edges, which condensation
    absorbs), so collapsing them keeps the quotient layered and acyclic.

    With ``computing=True`` every node runs the ``combine`` task on up to
    three parent outputs, giving graphs whose outputs depend on wiring.
    """
    ids = _ids(n)
    layer = {}
    cur = 0
    for i in ids:
        layer[i] = cur
        if rng.random() < 0.45:
            cur += 1
    edges = set()
    for a in ids:
        for b in ids:
            if layer[a] < layer[b] and rng.random() < edge_prob:
                edges.add((a, b))
    groups: list[list[str]] = []
    by_layer: dict[int, list[str]] = {}
    for i in ids:
        by_layer.setdefault(layer[i], []).append(i)
    for members in by_layer.values():
        pool = members[:]
        rng.shuffle(pool)
        while len(pool) >= 2 and rng.random() < group_prob:
            k = rng.randint(2, min(max_group, len(pool)))
            g, pool = sorted(pool[:k]), pool[k:]
            groups.append(g)
            if rng.random() < 0.5:
                edges.add((g[0], g[1]))
    parents: dict[str, list[str]] = {i: [] for i in ids}
    for a, b in sorted(edges):
        if layer[a] < layer[b]:
            parents[b].append(a)
    nodes = []
    for i in ids:
        data = {f"k{rng.randrange(data_keys * 2)}": rng.randrange(100) for _ in range(rng.randint(0, data_keys))}
        if computing:
            inputs: dict = {}
            ps = parents[i][:]
            rng.shuffle(ps)
            for slot, p in zip("abc", ps[:3]):
                inputs[slot] = OutputOf(p)
            if not inputs:
                inputs["a"] = Literal(rng.randrange(10))
            nodes.append(NodeDecl(i, "combine", data, inputs))
        else:
            nodes.append(NodeDecl(i, "noop", data, {}))
    origin = {f"k{rng.randrange(data_keys * 2)}": rng.randrange(100) for _ in range(rng.randint(0, origin_keys))}
    return GraphSpec.build(nodes, sorted(edges), groups, origin)


def arbitrary_graph(rng: random.Random, n: int, edge_prob: float = 0.15, group_prob: float = 0.2) -> GraphSpec:
    """Random directed graph, cycles allowed, with disjoint random groups."""
    ids = _ids(n)
    edges = [(a, b) for a in ids for b in ids if a != b and rng.random() < edge_prob]
    pool = ids[:]
    rng.shuffle(pool)
    groups = []
    while len(pool) >= 2 and rng.random() < group_prob:
        k = rng.randint(2, min(3, len(pool)))
        groups.append(sorted(pool[:k]))
        pool = pool[k:]
    return GraphSpec.build(ids, edges, groups)


def plant_cycle(rng: random.Random, spec: GraphSpec, length: int = 3) -> tuple[GraphSpec, list[tuple[str, str]]]:
    """Add a directed cycle through ungrouped nodes.

    Returns the new spec and the edges that were added; removing them gives
    back the original graph.
    """
    grouped = {m for g in spec.codependent_groups for m in g}
    free = [n.id for n in spec.nodes if n.id not in grouped]
    if len(free) < 2:
        raise ValueError("need at least two ungrouped nodes to plant a cycle")
    k = max(2, min(length, len(free)))
    ring = rng.sample(free, k)
    existing = set(spec.edges)
    added = []
    for a, b in zip(ring, ring[1:] + ring[:1]):
        if (a, b) not in existing:
            added.append((a, b))
    # the ring must not be already fully present, otherwise input was cyclic
    new = GraphSpec(spec.nodes, spec.edges + tuple(added), spec.codependent_groups, spec.origin_context)
    return new, added
