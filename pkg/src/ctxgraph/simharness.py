"""Deterministic single-process simulation of a gateway with virtual workers.

The real gateway functions (refresh_routing, allocate, dispatch, TaskQueue)
and the real orchestrator run against a virtual clock. Workers are virtual:
their liveness follows a fault script and their resource readings follow
piecewise-constant load curves. Every request and response still passes
through the wire codecs.
"""

from __future__ import annotations

import json
import random
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import canonical
from .gateway import (
    DispatchError,
    QueuedTask,
    RoutingTable,
    ServerRecord,
    TaskQueue,
    allocate,
    dispatch,
    make_chain,
    refresh_routing,
)
from .graph import GraphSpec, validate_graph
from .heartbeat import HeartbeatReport, Outcome, ProbeResult, ServerStatus
from .orchestrator import ExecutionHalted, Journal, JournalEntry, RetryPolicy, RunResult, run_graph
from .worker import TaskRegistry, TaskRequest, TaskResponse, handle_execute, load_registry

FAULT_KINDS = ("APP_DOWN", "APP_UP", "SYSTEM_DOWN", "SYSTEM_UP")


class ScenarioError(ValueError):
    pass


class SimulationInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class FaultEvent:
    at_ms: int
    target: str
    kind: str

    def to_dict(self) -> dict:
        return {"at_ms": self.at_ms, "target": self.target, "kind": self.kind}


def _curve(raw: Any, name: str) -> tuple[tuple[int, float], ...]:
    """Accept a constant or a list of [t_ms, value] steps."""
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return ((0, float(raw)),)
    if isinstance(raw, list) and raw and all(isinstance(p, list) and len(p) == 2 for p in raw):
        pts = tuple(sorted((int(t), float(v)) for t, v in raw))
        if pts[0][0] != 0:
            pts = ((0, pts[0][1]),) + pts
        if any(not 0 <= v <= 100 for _, v in pts):
            raise ScenarioError(f"{name} load values must lie in [0, 100]")
        return pts
    raise ScenarioError(f"bad {name} load curve: {raw!r}")


@dataclass(frozen=True)
class VirtualServer:
    server_id: str
    capacity: int = 1
    cpu: tuple[tuple[int, float], ...] = ((0, 10.0),)
    memory: tuple[tuple[int, float], ...] = ((0, 10.0),)
    jitter: float = 0.0
    task_ms: int = 100

    @staticmethod
    def level(curve: Sequence[tuple[int, float]], t: int) -> float:
        value = curve[0][1]
        for at, v in curve:
            if at <= t:
                value = v
        return value

    def to_dict(self) -> dict:
        return {
            "server_id": self.server_id,
            "capacity": self.capacity,
            "cpu": [list(p) for p in self.cpu],
            "memory": [list(p) for p in self.memory],
            "jitter": self.jitter,
            "task_ms": self.task_ms,
        }


@dataclass(frozen=True)
class Scenario:
    graph: GraphSpec
    servers: tuple[VirtualServer, ...]
    faults: tuple[FaultEvent, ...] = ()
    seed: int = 0
    policy_chain: tuple[str, ...] = ("least_cpu", "round_robin")
    retry: RetryPolicy = RetryPolicy()
    refresh_interval_ms: int = 2000
    staleness_bound_ms: int = 5000
    probe_timeout_ms: int = 1000
    probe_delay_ms: int = 2
    horizon_ms: int = 3_600_000
    max_dispatch_attempts: int = 8
    tasks: str = "ctxgraph.tasks"

    def __post_init__(self):
        ids = [s.server_id for s in self.servers]
        if not ids:
            raise ScenarioError("scenario needs at least one server")
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate server ids")
        for f in self.faults:
            if not isinstance(f.at_ms, int) or f.at_ms < 0:
                raise ScenarioError(f"fault time must be a non-negative integer: {f}")
            if f.target not in ids:
                raise ScenarioError(f"fault targets unknown server {f.target!r}")
            if f.kind not in FAULT_KINDS:
                raise ScenarioError(f"unknown fault kind {f.kind!r}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Scenario":
        if not isinstance(raw, Mapping):
            raise ScenarioError("scenario must be a JSON object")
        try:
            servers = tuple(
                VirtualServer(
                    server_id=str(s["server_id"]),
                    capacity=int(s.get("capacity", 1)),
                    cpu=_curve(s.get("cpu", 10), "cpu"),
                    memory=_curve(s.get("memory", 10), "memory"),
                    jitter=float(s.get("jitter", 0.0)),
                    task_ms=int(s.get("task_ms", 100)),
                )
                for s in raw["servers"]
            )
            faults = tuple(FaultEvent(f["at_ms"], str(f["target"]), str(f["kind"])) for f in raw.get("faults", []))
            retry = RetryPolicy(**raw.get("retry", {}))
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from exc
        opts = {
            k: raw[k]
            for k in (
                "seed",
                "refresh_interval_ms",
                "staleness_bound_ms",
                "probe_timeout_ms",
                "probe_delay_ms",
                "horizon_ms",
                "max_dispatch_attempts",
                "tasks",
            )
            if k in raw
        }
        chain = raw.get("policy_chain", ["least_cpu", "round_robin"])
        return cls(GraphSpec.from_dict(raw["graph"]), servers, faults, policy_chain=tuple(chain), retry=retry, **opts)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.to_dict(),
            "servers": [s.to_dict() for s in self.servers],
            "faults": [f.to_dict() for f in self.faults],
            "seed": self.seed,
            "policy_chain": list(self.policy_chain),
            "retry": {
                "max_attempts": self.retry.max_attempts,
                "backoff_base_ms": self.retry.backoff_base_ms,
                "backoff_factor": self.retry.backoff_factor,
            },
            "refresh_interval_ms": self.refresh_interval_ms,
            "staleness_bound_ms": self.staleness_bound_ms,
            "probe_timeout_ms": self.probe_timeout_ms,
            "probe_delay_ms": self.probe_delay_ms,
            "horizon_ms": self.horizon_ms,
            "max_dispatch_attempts": self.max_dispatch_attempts,
            "tasks": self.tasks,
        }


@dataclass
class Trace:
    events: list[dict] = field(default_factory=list)

    def emit(self, t: int, kind: str, **fields: Any) -> None:
        self.events.append({"seq": len(self.events), "t": t, "kind": kind, **fields})

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def to_ndjson(self) -> str:
        return "".join(canonical.dumps(e) + "\n" for e in self.events)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ndjson(), encoding="utf-8")

    def accounting(self) -> dict[str, int]:
        """Submitted tasks versus how each one ended.

        The identity ``submitted == completed + failed + refused + queued``
        holds when no task was lost.
        """
        out = {"submitted": len(self.of_kind("submit")), "completed": 0, "failed": 0, "refused": 0, "queued": 0}
        for e in self.of_kind("relay"):
            out[e["status"].lower()] += 1
        ends = self.of_kind("end")
        out["queued"] = ends[-1]["queued"] if ends else 0
        return out


class _SimWorkerClient:
    def __init__(self, sim: "Simulation"):
        self.sim = sim

    def execute(self, address: str, req: TaskRequest) -> TaskResponse:
        sim = self.sim
        sid = address.split(":", 1)[0]
        if not sim.app_reachable(sid):
            raise DispatchError(f"{sid} unreachable")
        # round-trip through the wire encoders, as a real worker would see it
        wire_req = TaskRequest.from_dict(json.loads(canonical.dumps(req.to_dict())))
        resp = handle_execute(wire_req, sim.registry)
        sim.advance_to(sim.now + sim.servers[sid].task_ms)
        if not sim.app_reachable(sid):
            raise DispatchError(f"{sid} lost connection mid-task")
        return TaskResponse.from_dict(json.loads(canonical.dumps(resp.to_dict())))


class _SimProber:
    def __init__(self, sim: "Simulation"):
        self.sim = sim

    def probe_pair(self, rec: ServerRecord) -> tuple[ProbeResult, ProbeResult]:
        sim = self.sim
        sid = rec.server_id
        delay, timeout = sim.scenario.probe_delay_ms, sim.scenario.probe_timeout_ms
        if not sim.system_up[sid]:
            hb = ProbeResult(Outcome.TIMEOUT, timeout, reason="timeout")
            app = ProbeResult(Outcome.TIMEOUT, timeout, reason="timeout")
        else:
            hb = ProbeResult(Outcome.OK, delay, payload=sim.report(sid))
            if sim.app_up[sid]:
                app = ProbeResult(Outcome.OK, delay, payload=sorted(sim.registry.names()))
            else:
                app = ProbeResult(Outcome.FAILED, delay, reason="transport: connection refused")
        return hb, app


class _TracedJournal(Journal):
    def __init__(self, sim: "Simulation"):
        super().__init__()
        self.sim = sim

    def append(self, entry: JournalEntry) -> None:
        super().append(entry)
        self.sim.trace.emit(self.sim.now, "journal", entry=entry.to_dict())


class Simulation:
    def __init__(self, scenario: Scenario, registry: TaskRegistry | None = None):
        self.scenario = scenario
        self.registry = registry if registry is not None else load_registry(scenario.tasks)
        self.registry.close()
        self.rng = random.Random(scenario.seed)
        self.now = 0
        self.trace = Trace()
        self.servers = {s.server_id: s for s in scenario.servers}
        self.app_up = {s: True for s in self.servers}
        self.system_up = {s: True for s in self.servers}
        self._faults = sorted(scenario.faults, key=lambda f: f.at_ms)
        self._fault_idx = 0
        self.table = RoutingTable.of(
            (ServerRecord(s, f"{s}:app", f"{s}:hb", capacity=v.capacity) for s, v in self.servers.items()),
            refresh_interval_ms=scenario.refresh_interval_ms,
            staleness_bound_ms=scenario.staleness_bound_ms,
        )
        self.chain = make_chain(list(scenario.policy_chain), scenario.seed)
        self.queue = TaskQueue()
        self.prober = _SimProber(self)
        self.client = _SimWorkerClient(self)
        self._apply_faults()

    # ---- clock and faults

    def advance_to(self, t: int) -> None:
        t = int(t)
        while self._fault_idx < len(self._faults) and self._faults[self._fault_idx].at_ms <= t:
            f = self._faults[self._fault_idx]
            self.now = max(self.now, f.at_ms)
            self._apply(f)
            self._fault_idx += 1
        self.now = max(self.now, t)

    def _apply_faults(self) -> None:
        self.advance_to(self.now)

    def _apply(self, f: FaultEvent) -> None:
        if f.kind == "APP_DOWN":
            self.app_up[f.target] = False
        elif f.kind == "APP_UP":
            self.app_up[f.target] = True
        elif f.kind == "SYSTEM_DOWN":
            self.system_up[f.target] = False
        else:
            self.system_up[f.target] = True
        self.trace.emit(self.now, "fault", target=f.target, fault=f.kind)

    def app_reachable(self, sid: str) -> bool:
        return self.system_up[sid] and self.app_up[sid]

    def expected_status(self, sid: str) -> ServerStatus:
        if not self.system_up[sid]:
            return ServerStatus.SYSTEM_ERROR
        return ServerStatus.HEALTHY if self.app_up[sid] else ServerStatus.APPLICATION_ERROR

    def report(self, sid: str) -> HeartbeatReport:
        v = self.servers[sid]

        def read(curve):
            x = v.level(curve, self.now)
            if v.jitter:
                x += self.rng.uniform(-v.jitter, v.jitter)
            return round(min(100.0, max(0.0, x)), 3)

        return HeartbeatReport(sid, read(v.cpu), read(v.memory), 0.0, None, self.now)

    def _next_event_time(self) -> int:
        times = []
        if self._fault_idx < len(self._faults):
            times.append(self._faults[self._fault_idx].at_ms)
        for rec in self.table.records.values():
            if rec.last_refresh_ms is not None:
                times.append(rec.last_refresh_ms + self.table.refresh_interval_ms)
        future = [t for t in times if t > self.now]
        return min(future) if future else self.scenario.horizon_ms + 1

    # ---- gateway loop

    def _on_probe(self, rec: ServerRecord, hb: ProbeResult, app: ProbeResult) -> None:
        self.trace.emit(
            self.now, "probe", server=rec.server_id, heartbeat=hb.outcome.value, app=app.outcome.value
        )
        self.trace.emit(self.now, "classify", server=rec.server_id, status=rec.status.value)
        if rec.status is not self.expected_status(rec.server_id):
            raise SimulationInvariantError(
                f"t={self.now}: {rec.server_id} classified {rec.status.value}, "
                f"fault state implies {self.expected_status(rec.server_id).value}"
            )

    def execute(self, req: TaskRequest) -> TaskResponse:
        """Executor entry point used by the orchestrator."""
        self.trace.emit(self.now, "submit", request_id=req.request_id, node=req.node_id, task=req.task)
        qt = self.queue.enqueue(req, now_ms=self.now)
        self.trace.emit(self.now, "enqueue", request_id=req.request_id, attempt=req.attempt, depth=len(self.queue))
        while True:
            if self.now > self.scenario.horizon_ms:
                self.trace.emit(self.now, "halt", request_id=req.request_id)
                raise ExecutionHalted(f"horizon {self.scenario.horizon_ms} ms reached with tasks queued")
            refresh_routing(self.table, self.prober, self.now, task_arrived=True, on_probe=self._on_probe)
            qt = self.queue.peek()
            decision = allocate(qt, self.table, self.chain, self.now)
            self.trace.emit(self.now, "allocate", **decision.to_dict())
            if decision.chosen is None:
                self.advance_to(self._next_event_time())
                continue
            rec = self.table.records[decision.chosen]
            if rec.status is not ServerStatus.HEALTHY or self.table.is_stale(rec, self.now):
                raise SimulationInvariantError(f"t={self.now}: allocated ineligible server {rec.server_id}")
            self.queue.remove(qt)
            self.trace.emit(self.now, "dispatch", request_id=qt.task.request_id, server=decision.chosen, attempt=qt.task.attempt)
            resp = dispatch(
                decision, qt, self.client, self.table, self.queue, self.scenario.max_dispatch_attempts, self.now
            )
            if resp is None:
                requeued: QueuedTask = self.queue.peek()
                self.trace.emit(
                    self.now, "requeue", request_id=requeued.task.request_id, server=decision.chosen, attempt=requeued.task.attempt
                )
                continue
            self.trace.emit(self.now, "relay", request_id=resp.request_id, status=resp.status.value, server=decision.chosen)
            return resp

    def sleep(self, ms: float) -> None:
        self.advance_to(self.now + int(ms))

    def run(self) -> tuple[RunResult, Trace]:
        g = validate_graph(self.scenario.graph)
        self.trace.emit(self.now, "start", nodes=len(g.spec.nodes), servers=sorted(self.servers))
        result = run_graph(
            g,
            self,
            self.scenario.retry,
            _TracedJournal(self),
            run_id=f"sim{self.scenario.seed}",
            clock=lambda: self.now,
            sleep=self.sleep,
        )
        self.trace.emit(self.now, "end", queued=len(self.queue), status=result.status)
        acct = self.trace.accounting()
        ended = acct["completed"] + acct["failed"] + acct["refused"] + acct["queued"]
        if acct["submitted"] != ended:
            raise SimulationInvariantError(f"task accounting broken: {acct}")
        return result, self.trace


def simulate(s: Scenario, registry: TaskRegistry | None = None) -> tuple[RunResult, Trace]:
    return Simulation(s, registry).run()


def random_scenario(seed: int, n_nodes: int = 8, n_servers: int = 3) -> Scenario:
    """Seeded scenario with a random computing graph and a random fault script."""
    from .randgraph import layered_graph

    rng = random.Random(seed)
    graph = layered_graph(rng, n_nodes, edge_prob=0.3, computing=True)
    servers = tuple(
        VirtualServer(
            f"w{i}",
            capacity=rng.randint(1, 3),
            cpu=((0, float(rng.randrange(5, 60))), (rng.randrange(1, 20) * 1000, float(rng.randrange(5, 95)))),
            memory=((0, float(rng.randrange(5, 60))),),
            jitter=rng.choice([0.0, 5.0]),
            task_ms=rng.randrange(10, 500),
        )
        for i in range(n_servers)
    )
    faults = []
    for _ in range(rng.randint(0, 4)):
        target = f"w{rng.randrange(n_servers)}"
        kind = rng.choice(["APP", "SYSTEM"])
        down = rng.randrange(0, 20_000)
        faults.append(FaultEvent(down, target, f"{kind}_DOWN"))
        faults.append(FaultEvent(down + rng.randrange(500, 15_000), target, f"{kind}_UP"))
    chain = rng.choice([("least_cpu", "round_robin"), ("random",), ("round_robin",), ("least_memory", "random")])
    return Scenario(graph, servers, tuple(faults), seed=seed, policy_chain=chain)
