import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxgraph.context import EMPTY, ORIGIN, ConflictError, Context, ContextEntry, context_union, flatten

from oracles import entry_set, union_oracle


def ctx(*triples):
    return Context(ContextEntry(*t) for t in triples)


def test_union_of_empties_is_empty():
    assert context_union(EMPTY, EMPTY) == EMPTY
    assert len(context_union(Context(), Context())) == 0


def test_union_keeps_both_origins():
    out = context_union(ctx(("A", "k", 1)), ctx(("B", "k", 2)))
    assert entry_set(out) == {("A", "k", "1"), ("B", "k", "2")}


def test_union_conflict_raises():
    with pytest.raises(ConflictError):
        context_union(ctx(("A", "k", 1)), ctx(("A", "k", 2)))


def test_bool_and_int_are_distinct_values():
    with pytest.raises(ConflictError):
        context_union(ctx(("A", "k", 1)), ctx(("A", "k", True)))


def _all_contexts():
    # every context of at most two entries over origins {A, B}, key "k", values {1, 2}
    slots = [("A", "k"), ("B", "k")]
    out = [[]]
    for r in (1, 2):
        for chosen in itertools.combinations(slots, r):
            for vals in itertools.product((1, 2), repeat=r):
                out.append([(o, k, v) for (o, k), v in zip(chosen, vals)])
    return out


def test_union_matches_set_union_oracle_exhaustively():
    contexts = _all_contexts()
    checked = 0
    for left, right in itertools.product(contexts, repeat=2):
        a, b = set(left), set(right)
        merged = union_oracle(a, b)
        slots = [(o, k) for o, k, _ in merged]
        if len(slots) != len(set(slots)):
            with pytest.raises(ConflictError):
                context_union(ctx(*left), ctx(*right))
            continue
        got = context_union(ctx(*left), ctx(*right))
        assert entry_set(got) == {(o, k, str(v)) for o, k, v in merged}
        checked += 1
    assert checked > 20


json_scalars = st.one_of(st.integers(-5, 5), st.booleans(), st.sampled_from(["x", "y"]), st.none())
json_values = st.recursive(
    json_scalars,
    lambda inner: st.one_of(st.lists(inner, max_size=3), st.dictionaries(st.sampled_from("abc"), inner, max_size=3)),
    max_leaves=6,
)


@st.composite
def contexts(draw, origins=("A", "B", "C", ORIGIN), keys=("k", "m", "n")):
    # values are a function of the slot so any two generated contexts are compatible
    slots = draw(st.sets(st.tuples(st.sampled_from(origins), st.sampled_from(keys)), max_size=6))
    table = {s: hash(s) % 7 for s in slots}
    return Context(ContextEntry(o, k, table[(o, k)]) for o, k in slots)


@given(contexts(), contexts())
def test_union_commutative(a, b):
    assert a | b == b | a


@given(contexts(), contexts(), contexts())
def test_union_associative(a, b, c):
    assert (a | b) | c == a | (b | c)


@given(contexts())
def test_union_idempotent_with_identity(a):
    assert a | a == a
    assert a | EMPTY == a
    assert EMPTY | a == a


@given(st.dictionaries(st.sampled_from("kmnp"), json_values, max_size=4))
def test_values_round_trip_and_are_immutable(data):
    c = Context.from_data("A", data)
    assert Context.from_list(c.to_list()) == c
    for e in c.entries:
        with pytest.raises(Exception):
            e.value = 3  # frozen dataclass
        if isinstance(data[e.key], list) and data[e.key]:
            with pytest.raises(TypeError):
                e.value[0] = "changed"


def test_serialization_sorted_by_origin_then_key():
    c = ctx(("B", "a", 1), ("A", "z", 2), ("A", "b", 3), (ORIGIN, "q", 0))
    assert [(d["origin"], d["key"]) for d in c.to_list()] == [("A", "b"), ("A", "z"), ("B", "a"), (ORIGIN, "q")]


def test_non_json_value_rejected():
    with pytest.raises(TypeError):
        Context.from_data("A", {"k": object()})


def test_flatten_deeper_origin_wins():
    c = ctx((ORIGIN, "k", 0), ("A", "k", 5))
    assert flatten(c, {"A": 0}) == {"k": 5}


def test_flatten_equal_depth_lexicographic_independent_of_order():
    entries = [("A", "k", 1), ("B", "k", 2)]
    for order in itertools.permutations(entries):
        assert flatten(ctx(*order), {"A": 3, "B": 3}) == {"k": 2}


def test_flatten_empty():
    assert flatten(EMPTY, {}) == {}


def test_flatten_mixed_keys():
    c = ctx((ORIGIN, "env", "prod"), ("A", "k", 1), ("B", "k", 2), ("B", "only", [1, 2]))
    assert flatten(c, {"A": 2, "B": 1}) == {"env": "prod", "k": 1, "only": [1, 2]}
