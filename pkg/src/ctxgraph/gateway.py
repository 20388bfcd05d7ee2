"""Central allocator: routing table, task queue, allocation policies, dispatch."""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import os
import random
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from .context import EMPTY, ORIGIN, Context
from .heartbeat import DEFAULT_TIMEOUT_MS, HeartbeatReport, ProbeResult, ServerStatus, classify, probe
from .wire import BadRequest, ServiceHandle, TransportError, request_json, start_service
from .worker import Status, TaskRequest, TaskResponse

logger = logging.getLogger(__name__)

DEFAULT_REFRESH_MS = 2000
DEFAULT_STALENESS_MS = 5000
DEFAULT_CEILING = 90.0
DEFAULT_CHAIN = ("least_cpu", "round_robin")


@dataclass
class ServerRecord:
    server_id: str
    app_address: str
    hb_address: str
    last_report: HeartbeatReport | None = None
    # conservative until the first probe pair comes back
    status: ServerStatus = ServerStatus.SYSTEM_ERROR
    last_refresh_ms: int | None = None
    capacity: int | None = None
    in_flight: int = 0
    force_refresh: bool = False

    def to_dict(self) -> dict:
        return {
            "server_id": self.server_id,
            "app_address": self.app_address,
            "hb_address": self.hb_address,
            "status": self.status.value,
            "last_report": self.last_report.to_dict() if self.last_report else None,
            "last_refresh_ms": self.last_refresh_ms,
            "capacity": self.capacity,
            "in_flight": self.in_flight,
        }


def load_servers(path: str | Path) -> list[ServerRecord]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("server list must be a JSON array")
    out = []
    for entry in raw:
        try:
            out.append(
                ServerRecord(
                    server_id=str(entry["server_id"]),
                    app_address=str(entry["app_address"]),
                    hb_address=str(entry["hb_address"]),
                    capacity=entry.get("capacity"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad server entry {entry!r}: {exc}") from exc
    ids = [r.server_id for r in out]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate server_id in server list")
    return out


@dataclass
class RoutingTable:
    records: dict[str, ServerRecord] = field(default_factory=dict)
    refresh_interval_ms: int = DEFAULT_REFRESH_MS
    staleness_bound_ms: int = DEFAULT_STALENESS_MS
    cpu_ceiling: float = DEFAULT_CEILING
    mem_ceiling: float = DEFAULT_CEILING

    @classmethod
    def of(cls, servers: Iterable[ServerRecord], **kw) -> "RoutingTable":
        return cls(records={s.server_id: s for s in servers}, **kw)

    def age(self, rec: ServerRecord, now_ms: int) -> float:
        if rec.last_refresh_ms is None:
            return float("inf")
        return now_ms - rec.last_refresh_ms

    def is_stale(self, rec: ServerRecord, now_ms: int) -> bool:
        return self.age(rec, now_ms) > self.staleness_bound_ms

    def is_eligible(self, rec: ServerRecord, now_ms: int) -> bool:
        if rec.status is not ServerStatus.HEALTHY or rec.last_report is None:
            return False
        if self.is_stale(rec, now_ms):
            return False
        if rec.capacity is not None and rec.in_flight >= rec.capacity:
            return False
        return rec.last_report.cpu_percent < self.cpu_ceiling and rec.last_report.memory_percent < self.mem_ceiling

    def eligible(self, now_ms: int) -> list[ServerRecord]:
        return [self.records[k] for k in sorted(self.records) if self.is_eligible(self.records[k], now_ms)]

    def snapshot(self) -> list[dict]:
        return [self.records[k].to_dict() for k in sorted(self.records)]


class Prober(Protocol):
    def probe_pair(self, rec: ServerRecord) -> tuple[ProbeResult, ProbeResult]:
        """Probe the heartbeat endpoint and the application liveness path."""


class HttpProber:
    def __init__(self, timeout_ms: int = DEFAULT_TIMEOUT_MS, app_path: str = "/tasks"):
        self.timeout_ms = timeout_ms
        self.app_path = app_path

    def probe_pair(self, rec: ServerRecord) -> tuple[ProbeResult, ProbeResult]:
        return probe(rec.hb_address, "/heartbeat", self.timeout_ms), probe(rec.app_address, self.app_path, self.timeout_ms)


def refresh_routing(
    table: RoutingTable,
    prober: Prober,
    now_ms: int,
    task_arrived: bool = False,
    on_probe: Callable[[ServerRecord, ProbeResult, ProbeResult], None] | None = None,
) -> list[str]:
    """Re-probe records that are due and reclassify them.

    A record is due once its refresh interval has elapsed or it was flagged
    for immediate refresh; on task arrival any record past the staleness
    bound is also re-probed. Returns the ids that were probed.
    """
    probed = []
    for sid in sorted(table.records):
        rec = table.records[sid]
        due = rec.force_refresh or table.age(rec, now_ms) >= table.refresh_interval_ms
        if not due and task_arrived and table.is_stale(rec, now_ms):
            due = True
        if not due:
            continue
        hb, app = prober.probe_pair(rec)
        rec.status = classify(hb, app)
        if hb.ok and isinstance(hb.payload, HeartbeatReport):
            rec.last_report = hb.payload
        rec.last_refresh_ms = now_ms
        rec.force_refresh = False
        probed.append(sid)
        if on_probe:
            on_probe(rec, hb, app)
    return probed


@dataclass
class QueuedTask:
    task: TaskRequest
    enqueue_time_ms: int
    silo_key: str | None = None
    priority: int = 0
    seq: int = 0
    # stable across re-enqueues; identifies the caller waiting on this task
    ticket: int = 0


class QueueFullError(RuntimeError):
    pass


SINGLE_SILO = "default"


class TaskQueue:
    """Priority-then-FIFO queue, either single-level or partitioned into silos."""

    def __init__(self, mode: str = "single", silo_fn: Callable[[TaskRequest], str] | None = None, bound: int | None = None):
        if mode not in ("single", "silo"):
            raise ValueError(f"unknown queue mode {mode!r}")
        self.mode = mode
        self.silo_fn = silo_fn or (lambda t: t.task)
        self.bound = bound
        self._heaps: dict[str, list[tuple[int, int, QueuedTask]]] = {}
        self._seq = itertools.count()
        self._lock = threading.RLock()

    def _key(self, task: TaskRequest) -> str | None:
        return self.silo_fn(task) if self.mode == "silo" else None

    def enqueue(self, task: TaskRequest, priority: int = 0, now_ms: int = 0) -> QueuedTask:
        with self._lock:
            if self.bound is not None and len(self) >= self.bound:
                raise QueueFullError(f"queue bound {self.bound} reached")
            seq = next(self._seq)
            qt = QueuedTask(task, now_ms, self._key(task), priority, seq, ticket=seq)
            self._push(qt)
            return qt

    def requeue(self, qt: QueuedTask, task: TaskRequest | None = None, now_ms: int | None = None) -> QueuedTask:
        """Put a task back at the tail of its priority class; bound is not applied."""
        with self._lock:
            new = QueuedTask(
                task or qt.task,
                qt.enqueue_time_ms if now_ms is None else now_ms,
                qt.silo_key,
                qt.priority,
                next(self._seq),
                qt.ticket,
            )
            self._push(new)
            return new

    def _push(self, qt: QueuedTask) -> None:
        heapq.heappush(self._heaps.setdefault(qt.silo_key or SINGLE_SILO, []), (-qt.priority, qt.seq, qt))

    def peek(self, silo: str | None = None) -> QueuedTask | None:
        with self._lock:
            heads = [h[0] for k, h in self._heaps.items() if h and (silo is None or k == silo)]
            if not heads:
                return None
            return min(heads, key=lambda e: (e[0], e[1]))[2]

    def dequeue(self, silo: str | None = None) -> QueuedTask | None:
        with self._lock:
            qt = self.peek(silo)
            if qt is not None:
                heapq.heappop(self._heaps[qt.silo_key or SINGLE_SILO])
            return qt

    def remove(self, qt: QueuedTask) -> bool:
        with self._lock:
            heap = self._heaps.get(qt.silo_key or SINGLE_SILO, [])
            for i, entry in enumerate(heap):
                if entry[2] is qt:
                    heap[i] = heap[-1]
                    heap.pop()
                    heapq.heapify(heap)
                    return True
            return False

    def silos(self) -> dict[str, list[QueuedTask]]:
        with self._lock:
            return {k: [e[2] for e in sorted(h)] for k, h in sorted(self._heaps.items()) if h}

    def depths(self) -> dict[str, int]:
        with self._lock:
            if self.mode == "single":
                return {SINGLE_SILO: len(self)}
            return {k: len(h) for k, h in sorted(self._heaps.items()) if h}

    def __len__(self) -> int:
        with self._lock:
            return sum(len(h) for h in self._heaps.values())


def enqueue(queue: TaskQueue, task: TaskRequest, priority: int = 0, now_ms: int = 0) -> QueuedTask:
    return queue.enqueue(task, priority, now_ms)


class Policy:
    """Allocation policy. ``choose`` returns a server id, or None to abstain."""

    name = "policy"

    def choose(self, task: QueuedTask, eligible: Sequence[ServerRecord], table: RoutingTable) -> str | None:
        raise NotImplementedError


class LeastCpu(Policy):
    name = "least_cpu"
    metric = "cpu_percent"

    def __init__(self, below: float | None = None):
        # optional tighter ceiling; with nothing under it the policy abstains
        self.below = below

    def choose(self, task, eligible, table):
        cands = [r for r in eligible if self.below is None or getattr(r.last_report, self.metric) < self.below]
        if not cands:
            return None
        return min(cands, key=lambda r: (getattr(r.last_report, self.metric), r.server_id)).server_id


class LeastMemory(LeastCpu):
    name = "least_memory"
    metric = "memory_percent"


class RoundRobin(Policy):
    name = "round_robin"

    def __init__(self) -> None:
        self._last: str | None = None

    def choose(self, task, eligible, table):
        if not eligible:
            return None
        ids = [r.server_id for r in eligible]
        nxt = next((i for i in ids if self._last is None or i > self._last), ids[0])
        self._last = nxt
        return nxt


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def choose(self, task, eligible, table):
        if not eligible:
            return None
        return self.rng.choice([r.server_id for r in eligible])


BUILTIN_POLICIES: dict[str, Callable[[int], Policy]] = {
    "least_cpu": lambda seed: LeastCpu(),
    "least_memory": lambda seed: LeastMemory(),
    "round_robin": lambda seed: RoundRobin(),
    "random": lambda seed: RandomPolicy(seed),
}


def make_chain(spec: str | Sequence[str | Policy], seed: int = 0) -> list[Policy]:
    names = [s.strip() for s in spec.split(",") if s.strip()] if isinstance(spec, str) else list(spec)
    chain = []
    for item in names:
        if isinstance(item, Policy):
            chain.append(item)
            continue
        key = item.lower()
        if key not in BUILTIN_POLICIES:
            raise ValueError(f"unknown policy {item!r}; known: {', '.join(BUILTIN_POLICIES)}")
        chain.append(BUILTIN_POLICIES[key](seed))
    if not chain:
        raise ValueError("policy chain is empty")
    return chain


@dataclass(frozen=True)
class AllocationDecision:
    request_id: str
    chosen: str | None
    policy_used: str
    fallback_depth: int
    eligible_count: int

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "chosen": self.chosen,
            "policy_used": self.policy_used,
            "fallback_depth": self.fallback_depth,
            "eligible_count": self.eligible_count,
        }


FIRST_ELIGIBLE = "first_eligible"


def allocate(task: QueuedTask, table: RoutingTable, chain: Sequence[Policy], now_ms: int) -> AllocationDecision:
    """Pick a server for ``task`` by walking the policy chain.

    Policies that raise, abstain, or name an ineligible server pass the task
    to the next policy. If every policy passes while eligible servers exist,
    the smallest eligible server id is used, so NONE means no server at all
    could take the task.
    """
    eligible = table.eligible(now_ms)
    ids = {r.server_id for r in eligible}
    rid = task.task.request_id
    for depth, policy in enumerate(chain):
        try:
            choice = policy.choose(task, eligible, table)
        except Exception:  # noqa: BLE001 - a broken policy falls through to the next
            logger.warning("policy %s raised; falling back", policy.name, exc_info=True)
            continue
        if choice is not None and choice in ids:
            return AllocationDecision(rid, choice, policy.name, depth, len(eligible))
    if eligible:
        return AllocationDecision(rid, eligible[0].server_id, FIRST_ELIGIBLE, len(chain), len(eligible))
    return AllocationDecision(rid, None, "none", len(chain), 0)


class DispatchError(RuntimeError):
    pass


class WorkerClient(Protocol):
    def execute(self, address: str, req: TaskRequest) -> TaskResponse:
        """Send one request; raise on transport failure."""


class HttpWorkerClient:
    def __init__(self, timeout_s: float = 300.0):
        self.timeout_s = timeout_s

    def execute(self, address: str, req: TaskRequest) -> TaskResponse:
        try:
            status, body = request_json(address, "POST", "/execute", req.to_dict(), timeout=self.timeout_s)
        except TransportError as exc:
            raise DispatchError(f"transport failure to {address}: {exc}") from exc
        if status != 200:
            raise DispatchError(f"worker {address} answered http {status}")
        try:
            return TaskResponse.from_dict(body)
        except ValueError as exc:
            raise DispatchError(str(exc)) from exc


def dispatch(
    decision: AllocationDecision,
    qt: QueuedTask,
    client: WorkerClient,
    table: RoutingTable,
    queue: TaskQueue,
    max_attempts: int = 8,
    now_ms: int | None = None,
) -> TaskResponse | None:
    """Forward a task to its chosen worker.

    Returns the worker's response for the caller, or None when the task was
    put back in the queue (refusal or transport failure) and the server
    flagged for an immediate re-probe. After ``max_attempts`` dispatches a
    refusal or transport failure is relayed instead of re-queued.
    """
    if decision.chosen is None:
        raise ValueError("cannot dispatch an unallocated task")
    rec = table.records[decision.chosen]
    try:
        resp = client.execute(rec.app_address, qt.task)
    except DispatchError as exc:
        rec.force_refresh = True
        if qt.task.attempt >= max_attempts:
            return TaskResponse.failed(qt.task.request_id, f"dispatch failed: {exc}")
        queue.requeue(qt, qt.task.with_attempt(qt.task.attempt + 1), now_ms)
        return None
    if resp.status is Status.REFUSED:
        rec.force_refresh = True
        if qt.task.attempt >= max_attempts:
            return resp
        queue.requeue(qt, qt.task.with_attempt(qt.task.attempt + 1), now_ms)
        return None
    return resp


def _monotonic_ms() -> int:
    return int(time.monotonic() * 1000)


class Gateway:
    """Threaded gateway: one serialized decision loop, concurrent dispatches.

    By default the gateway binds itself to a single task name (the first one
    submitted, or ``task_template``) and refuses others; ``multi_task=True``
    lifts that restriction.
    """

    def __init__(
        self,
        table: RoutingTable,
        chain: Sequence[Policy] | str = DEFAULT_CHAIN,
        prober: Prober | None = None,
        client: WorkerClient | None = None,
        queue: TaskQueue | None = None,
        multi_task: bool = False,
        task_template: str | None = None,
        max_dispatch_attempts: int = 8,
        clock: Callable[[], int] = _monotonic_ms,
        seed: int = 0,
        dispatch_threads: int = 16,
    ):
        self.table = table
        self.chain = make_chain(chain, seed) if isinstance(chain, str) else list(chain)
        self.prober = prober or HttpProber()
        self.client = client or HttpWorkerClient()
        self.queue = queue if queue is not None else TaskQueue()
        self.multi_task = multi_task
        self.task_template = task_template
        self.max_dispatch_attempts = max_dispatch_attempts
        self.clock = clock
        self.decisions: list[AllocationDecision] = []
        self._context = EMPTY
        self._decide = threading.Lock()
        self._wake = threading.Condition()
        self._waiters: dict[int, Future] = {}
        self._pool = ThreadPoolExecutor(max_workers=dispatch_threads, thread_name_prefix="dispatch")
        self._running = False
        self._threads: list[threading.Thread] = []

    # ---- lifecycle

    def start(self) -> "Gateway":
        self._running = True
        for target, name in ((self._decision_loop, "gw-decide"), (self._refresh_loop, "gw-refresh")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._running = False
        with self._wake:
            self._wake.notify_all()
        for t in self._threads:
            t.join()
        self._threads.clear()
        self._pool.shutdown(wait=True)
        # callers still waiting get an answer instead of hanging
        for ticket, fut in list(self._waiters.items()):
            if not fut.done():
                fut.set_result(TaskResponse.refused(f"ticket-{ticket}", "gateway stopped"))
        self._waiters.clear()

    # ---- client surface

    def submit(self, req: TaskRequest, priority: int = 0, timeout: float | None = None) -> TaskResponse:
        if not self.multi_task:
            with self._decide:
                if self.task_template is None:
                    self.task_template = req.task
            if req.task != self.task_template:
                return TaskResponse.refused(req.request_id, f"gateway bound to task {self.task_template!r}")
        fut: Future = Future()
        with self._wake:
            qt = self.queue.enqueue(req, priority, self.clock())
            self._waiters[qt.ticket] = fut
            self._wake.notify_all()
        return fut.result(timeout)

    def put_context(self, ctx: Context) -> None:
        self._context = ctx

    def get_context(self) -> Context:
        return self._context

    def refresh(self, task_arrived: bool = False) -> list[str]:
        with self._decide:
            return refresh_routing(self.table, self.prober, self.clock(), task_arrived)

    # ---- internals

    def _refresh_loop(self) -> None:
        while self._running:
            self.refresh()
            with self._wake:
                self._wake.wait(self.table.refresh_interval_ms / 1000)

    def _decision_loop(self) -> None:
        while self._running:
            with self._wake:
                while self._running and not len(self.queue):
                    self._wake.wait(0.5)
            if not self._running:
                return
            with self._decide:
                now = self.clock()
                refresh_routing(self.table, self.prober, now, task_arrived=True)
                qt = self.queue.peek()
                decision = allocate(qt, self.table, self.chain, now)
                if decision.chosen is not None:
                    self.queue.remove(qt)
                    self.table.records[decision.chosen].in_flight += 1
                    self.decisions.append(decision)
            if decision.chosen is None:
                # wait for the next refresh to change eligibility or a new arrival
                with self._wake:
                    self._wake.wait(min(self.table.refresh_interval_ms, 200) / 1000)
                continue
            self._pool.submit(self._dispatch_one, decision, qt)

    def _dispatch_one(self, decision: AllocationDecision, qt: QueuedTask) -> None:
        try:
            resp = dispatch(decision, qt, self.client, self.table, self.queue, self.max_dispatch_attempts, self.clock())
        except Exception as exc:  # noqa: BLE001
            logger.exception("dispatch crashed")
            resp = TaskResponse.failed(qt.task.request_id, f"gateway error: {exc}")
        finally:
            with self._decide:
                self.table.records[decision.chosen].in_flight -= 1
        if resp is not None:
            fut = self._waiters.pop(qt.ticket, None)
            if fut is not None:
                fut.set_result(resp)
        with self._wake:
            self._wake.notify_all()


def serve_gateway(port: int, gateway: Gateway, host: str = "127.0.0.1") -> ServiceHandle:
    def submit(body):
        try:
            req = TaskRequest.from_dict(body)
        except ValueError as exc:
            raise BadRequest(str(exc)) from exc
        priority = body.get("priority", 0) if isinstance(body, Mapping) else 0
        return 200, gateway.submit(req, int(priority)).to_dict()

    def servers(_body):
        with gateway._decide:
            return 200, gateway.table.snapshot()

    def queue(_body):
        return 200, gateway.queue.depths()

    def put_context(body):
        if isinstance(body, list):
            try:
                ctx = Context.from_list(body)
            except (KeyError, TypeError) as exc:
                raise BadRequest(f"bad context entries: {exc}") from exc
        elif isinstance(body, Mapping):
            ctx = Context.from_data(ORIGIN, body)
        else:
            raise BadRequest("context must be an entry list or an object")
        gateway.put_context(ctx)
        return 200, ctx.to_list()

    def get_context(_body):
        return 200, gateway.get_context().to_list()

    return start_service(
        "gateway",
        host,
        port,
        {
            ("POST", "/submit"): submit,
            ("GET", "/servers"): servers,
            ("GET", "/queue"): queue,
            ("PUT", "/context"): put_context,
            ("GET", "/context"): get_context,
        },
    )


def env_chain(default: Sequence[str] = DEFAULT_CHAIN) -> str:
    return os.environ.get("CTXGRAPH_GW_POLICY", ",".join(default))
