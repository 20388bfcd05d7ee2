"""Command-line entry point.

Exit codes: 0 success, 1 I/O or parse error, 2 validation or semantic
error, 3 connectivity, 4 execution failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import canonical
from .gateway import DEFAULT_CHAIN, Gateway, HttpProber, RoutingTable, TaskQueue, load_servers, make_chain, serve_gateway
from .graph import GraphError, GraphFormatError, GraphSpec, validate_graph
from .heartbeat import PsutilSampler
from .orchestrator import (
    ExecutorUnavailable,
    GatewayExecutor,
    Journal,
    JournalMismatchError,
    JournalWriteError,
    LocalExecutor,
    RetryPolicy,
    RunResult,
    replay,
    run_graph,
)
from .simharness import Scenario, ScenarioError, simulate
from .wire import BindError, TransportError, request_json
from .worker import DEFAULT_CAPACITY, Worker, load_registry

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_CONNECT, EXIT_EXEC = 0, 1, 2, 3, 4

log = logging.getLogger("ctxgraph")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise CliError(EXIT_INVALID, f"environment variable {name} must be an integer, got {raw!r}") from None


def _emit(args, payload, text: str | None = None) -> None:
    if args.json:
        print(canonical.dumps(payload))
    elif text is not None:
        print(text)


def _load_graph(path: str):
    try:
        return GraphSpec.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from exc
    except GraphFormatError as exc:
        raise CliError(EXIT_IO, f"cannot parse {path}: {exc}") from exc


def cmd_validate(args) -> int:
    spec = _load_graph(args.file)
    try:
        g = validate_graph(spec)
    except GraphError as exc:
        cycle = getattr(exc, "cycle", None)
        _emit(args, {"ok": False, "error": type(exc).__name__, "message": str(exc), "cycle": cycle})
        raise CliError(EXIT_INVALID, str(exc)) from exc
    waves = [list(w) for w in g.condensed.topo_waves]
    summary = f"{len(spec.nodes)} nodes, {len(waves)} waves"
    _emit(args, {"ok": True, "nodes": len(spec.nodes), "waves": waves}, summary + "\n" + "\n".join(
        f"  wave {i}: {', '.join(w)}" for i, w in enumerate(waves)
    ))
    return EXIT_OK


def cmd_context(args) -> int:
    spec = _load_graph(args.file)
    try:
        g = validate_graph(spec)
    except GraphError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    if args.node is not None:
        if args.node not in g.contexts:
            raise CliError(EXIT_INVALID, f"unknown node {args.node!r}")
        print(canonical.dumps(g.contexts[args.node].to_list()))
    else:
        print(canonical.dumps({n.id: g.contexts[n.id].to_list() for n in spec.nodes}))
    return EXIT_OK


def _wait_forever(stop: threading.Event) -> None:
    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    try:
        while not stop.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass


def cmd_worker(args) -> int:
    port = args.port if args.port is not None else _env_int("CTXGRAPH_WORKER_PORT", 8100)
    hb_port = args.hb_port if args.hb_port is not None else _env_int("CTXGRAPH_HB_PORT", 8101)
    capacity = args.capacity if args.capacity is not None else _env_int("CTXGRAPH_WORKER_CAPACITY", DEFAULT_CAPACITY)
    if port == hb_port and port != 0:
        raise CliError(EXIT_INVALID, "application port and heartbeat port must differ")
    if capacity < 1:
        raise CliError(EXIT_INVALID, "--capacity must be >= 1")
    try:
        registry = load_registry(args.tasks)
    except (ImportError, AttributeError, OSError) as exc:
        raise CliError(EXIT_IO, f"cannot load task manifest: {exc}") from exc
    worker = Worker(registry, args.server_id, port, hb_port, capacity, PsutilSampler(), args.host)
    try:
        worker.start()
    except BindError as exc:
        worker.stop()
        raise CliError(EXIT_CONNECT, str(exc)) from exc
    print(canonical.dumps(worker.server_entry()), flush=True)
    _wait_forever(threading.Event())
    worker.stop()
    return EXIT_OK


def cmd_gateway(args) -> int:
    port = args.port if args.port is not None else _env_int("CTXGRAPH_GW_PORT", 8000)
    refresh = args.refresh_ms if args.refresh_ms is not None else _env_int("CTXGRAPH_GW_REFRESH_MS", 2000)
    timeout = args.probe_timeout_ms if args.probe_timeout_ms is not None else _env_int("CTXGRAPH_HB_TIMEOUT_MS", 1000)
    policy = args.policy or os.environ.get("CTXGRAPH_GW_POLICY") or ",".join(DEFAULT_CHAIN)
    if args.multi_task and args.task:
        raise CliError(EXIT_INVALID, "--task binds a single task template; it cannot be combined with --multi-task")
    try:
        servers = load_servers(args.servers)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.servers}: {exc.strerror or exc}") from exc
    except (ValueError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot parse {args.servers}: {exc}") from exc
    try:
        chain = make_chain(policy, args.seed or 0)
    except ValueError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    table = RoutingTable.of(servers, refresh_interval_ms=refresh, staleness_bound_ms=max(args.staleness_ms, refresh))
    gw = Gateway(
        table,
        chain,
        prober=HttpProber(timeout),
        queue=TaskQueue(args.queue),
        multi_task=args.multi_task,
        task_template=args.task,
    )
    try:
        svc = serve_gateway(port, gw, args.host)
    except BindError as exc:
        raise CliError(EXIT_CONNECT, str(exc)) from exc
    gw.start()
    print(canonical.dumps({"gateway": svc.address, "servers": len(servers), "policy": [p.name for p in chain]}), flush=True)
    _wait_forever(threading.Event())
    svc.stop()
    gw.stop()
    return EXIT_OK


def _write_result(path: str, result: RunResult) -> None:
    try:
        Path(path).write_text(canonical.dumps(result.export()) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from exc


def cmd_run(args) -> int:
    spec = _load_graph(args.file)
    try:
        g = validate_graph(spec)
    except GraphError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    if args.local:
        try:
            executor = LocalExecutor(load_registry(args.tasks))
        except (ImportError, AttributeError, OSError) as exc:
            raise CliError(EXIT_IO, f"cannot load task manifest: {exc}") from exc
    else:
        try:
            request_json(args.gateway, "GET", "/queue", timeout=5)
        except TransportError as exc:
            raise CliError(EXIT_CONNECT, f"gateway unreachable: {args.gateway}") from exc
        executor = GatewayExecutor(args.gateway)
    retry = RetryPolicy(args.max_attempts, args.backoff_ms)
    run_id = args.run_id or Path(args.file).stem
    try:
        if args.resume:
            if not Path(args.resume).exists():
                raise CliError(EXIT_IO, f"no such journal: {args.resume}")
            journal = Journal.open(args.resume)
        else:
            path = Path(args.journal_dir) / f"{run_id}.journal.ndjson"
            if path.exists() and path.stat().st_size:
                raise CliError(EXIT_INVALID, f"journal {path} already exists; pass --resume {path} to continue it")
            journal = Journal(path)
    except JournalWriteError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    try:
        with journal:
            if args.resume:
                result = replay(journal, g, executor, retry, run_id=run_id, max_parallel=args.parallel)
            else:
                result = run_graph(g, executor, retry, journal, run_id=run_id, max_parallel=args.parallel)
    except JournalMismatchError as exc:
        raise CliError(EXIT_INVALID, f"journal does not match graph: {exc}") from exc
    except JournalWriteError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except ExecutorUnavailable as exc:
        raise CliError(EXIT_CONNECT, "gateway unreachable") from exc
    _write_result(args.out, result)
    summary = f"{result.status}: {sum(v == 'COMPLETED' for v in result.statuses.values())}/{len(result.statuses)} nodes completed"
    _emit(args, result.export(), summary)
    if result.status != "COMPLETED":
        print(summary, file=sys.stderr)
        return EXIT_EXEC
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.scenario}: {exc.strerror or exc}") from exc
    except (ScenarioError, GraphFormatError) as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    try:
        result, trace = simulate(scenario)
    except GraphError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    try:
        trace.write(args.trace)
        if args.out:
            Path(args.out).write_text(canonical.dumps(result.export()) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write output: {exc.strerror or exc}") from exc
    acct = trace.accounting()
    _emit(args, {**result.export(), "accounting": acct, "events": len(trace.events)},
          f"{result.status}: {len(trace.events)} trace events, accounting {acct}")
    return EXIT_OK if result.status == "COMPLETED" else EXIT_EXEC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxgraph", description="Context-aware distributed graph execution")
    p.add_argument("--json", action="store_true", help="machine-readable canonical JSON on stdout")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a graph file")
    s.add_argument("file")
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("context", help="print node contexts")
    s.add_argument("file")
    s.add_argument("--node")
    s.set_defaults(fn=cmd_context)

    s = sub.add_parser("worker", help="run a worker (application + heartbeat services)")
    s.add_argument("--port", type=int)
    s.add_argument("--hb-port", type=int)
    s.add_argument("--tasks", help="task manifest: module path or .py file")
    s.add_argument("--capacity", type=int)
    s.add_argument("--server-id", default="worker")
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(fn=cmd_worker)

    s = sub.add_parser("gateway", help="run the allocating gateway")
    s.add_argument("--port", type=int)
    s.add_argument("--servers", required=True, help="JSON server list")
    s.add_argument("--policy", help="comma-separated policy chain")
    s.add_argument("--refresh-ms", type=int)
    s.add_argument("--staleness-ms", type=int, default=5000)
    s.add_argument("--probe-timeout-ms", type=int)
    s.add_argument("--queue", choices=["single", "silo"], default="single")
    s.add_argument("--multi-task", action="store_true", help="accept any registered task (weaker durability)")
    s.add_argument("--task", help="bind the gateway to this task name")
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(fn=cmd_gateway)

    s = sub.add_parser("run", help="execute a graph")
    s.add_argument("file")
    where = s.add_mutually_exclusive_group(required=True)
    where.add_argument("--gateway", metavar="URL")
    where.add_argument("--local", action="store_true")
    s.add_argument("--resume", metavar="JOURNAL")
    s.add_argument("--out", default="result.json")
    s.add_argument("--run-id")
    s.add_argument("--journal-dir", default=".")
    s.add_argument("--tasks")
    s.add_argument("--max-attempts", type=int, default=3)
    s.add_argument("--backoff-ms", type=int, default=100)
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("simulate", help="run a deterministic fault-injection scenario")
    s.add_argument("scenario")
    s.add_argument("--trace", default="trace.ndjson")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"ctxgraph {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
