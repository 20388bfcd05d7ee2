"""Start three loopback workers and a gateway, then run a graph through them.

    python scripts/demo_cluster.py [graph.json]
"""

import json
import sys
from pathlib import Path

from ctxgraph.gateway import Gateway, HttpProber, RoutingTable, ServerRecord, serve_gateway
from ctxgraph.graph import GraphSpec, validate_graph
from ctxgraph.orchestrator import GatewayExecutor, LocalExecutor, run_graph
from ctxgraph.worker import Worker, load_registry

ROOT = Path(__file__).resolve().parent.parent


def main(path):
    graph = validate_graph(GraphSpec.load(path))
    workers = [Worker(load_registry(), f"w{i}").start() for i in range(3)]
    table = RoutingTable.of(
        [ServerRecord(w.server_id, w.app_address, w.hb_address) for w in workers],
        refresh_interval_ms=200,
        staleness_bound_ms=1000,
    )
    gw = Gateway(table, "least_cpu,round_robin", HttpProber(timeout_ms=300), multi_task=True).start()
    svc = serve_gateway(0, gw)
    try:
        result = run_graph(graph, GatewayExecutor(svc.address), max_parallel=3)
    finally:
        svc.stop()
        gw.stop()
        for w in workers:
            w.stop()
    local = run_graph(graph, LocalExecutor(load_registry()))
    print(json.dumps({"status": result.status, "outputs": result.outputs}, sort_keys=True, indent=2))
    for d in gw.decisions:
        print(f"  {d.request_id:<24} -> {d.chosen}  ({d.policy_used}, fallback {d.fallback_depth})")
    print("matches local run:", result.outputs == local.outputs)
    return 0 if result.status == "COMPLETED" else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else ROOT / "samples" / "diamond.json"))
