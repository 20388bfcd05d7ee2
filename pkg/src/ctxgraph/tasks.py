"""Demo task set loaded by default into workers and local runs."""

import time


def noop(ctx):
    return None


def const(ctx, value):
    return value


def double(ctx, x):
    return x * 2


def add(ctx, a, b):
    return a + b


def mul(ctx, a, b):
    return a * b


def total(ctx, values):
    return sum(values)


def scale(ctx, x, key="factor"):
    """Multiply by a factor read from the context."""
    return x * ctx.get(key, 1)


def combine(ctx, a=0, b=0, c=0):
    # weighted so argument mix-ups change the result
    return a + 2 * b + 3 * c + ctx.get("bias", 0)


def slow_add(ctx, a, b, delay_ms=20):
    time.sleep(delay_ms / 1000)
    return a + b


def context_view(ctx):
    return dict(ctx)


def fail(ctx, **_):
    raise RuntimeError("task configured to fail")


TASKS = {
    "noop": noop,
    "const": const,
    "double": double,
    "add": add,
    "mul": mul,
    "sum": total,
    "scale": scale,
    "combine": combine,
    "slow_add": slow_add,
    "context_view": context_view,
    "fail": fail,
}
