"""Replay the sample outage scenario on the virtual clock and summarise it."""

import sys
from collections import Counter
from pathlib import Path

from ctxgraph.simharness import Scenario, simulate

ROOT = Path(__file__).resolve().parent.parent


def main(path):
    result, trace = simulate(Scenario.load(path))
    print(f"status {result.status}, {len(trace.events)} events")
    for kind, n in sorted(Counter(e["kind"] for e in trace.events).items()):
        print(f"  {kind:<10} {n}")
    acct = trace.accounting()
    print("accounting", acct)
    first = min((e["t"] for e in trace.of_kind("dispatch")), default=None)
    print("first dispatch at", first, "ms")
    return 0 if result.status == "COMPLETED" else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else ROOT / "samples" / "outage_scenario.json"))
