"""Durable graph execution: journaled attempts, retries, memoized replay."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections.abc import Callable, Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from . import canonical
from .context import Context
from .graph import Literal, NodeDecl, OutputOf, ValidatedGraph
from .wire import TransportError, request_json
from .worker import CapacityGate, Status, TaskRegistry, TaskRequest, TaskResponse, handle_execute

logger = logging.getLogger(__name__)


class JournalWriteError(RuntimeError):
    pass


class JournalMismatchError(RuntimeError):
    pass


class MissingDependencyError(RuntimeError):
    pass


class ExecutorUnavailable(RuntimeError):
    """The executor cannot be reached at all; the run stops."""


class ExecutionHalted(RuntimeError):
    """The executor stopped before answering (e.g. a simulation horizon)."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_ms: int = 100
    backoff_factor: float = 2.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay_ms(self, attempt: int) -> float:
        """Wait before ``attempt`` (the first attempt never waits)."""
        if attempt < 2:
            return 0.0
        return self.backoff_base_ms * self.backoff_factor ** (attempt - 2)


@dataclass(frozen=True)
class JournalEntry:
    seq: int
    node_id: str
    attempt: int
    input_hash: str
    status: str
    output: Any = None
    reason: str = ""
    started_ms: int = 0
    ended_ms: int = 0

    def to_dict(self) -> dict:
        out = {
            "seq": self.seq,
            "node_id": self.node_id,
            "attempt": self.attempt,
            "input_hash": self.input_hash,
            "status": self.status,
            "started_ms": self.started_ms,
            "ended_ms": self.ended_ms,
        }
        if self.status == Status.COMPLETED.value:
            out["output"] = self.output
        else:
            out["reason"] = self.reason
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "JournalEntry":
        return cls(
            seq=int(raw["seq"]),
            node_id=str(raw["node_id"]),
            attempt=int(raw["attempt"]),
            input_hash=str(raw["input_hash"]),
            status=str(raw["status"]),
            output=raw.get("output"),
            reason=str(raw.get("reason", "")),
            started_ms=int(raw.get("started_ms", 0)),
            ended_ms=int(raw.get("ended_ms", 0)),
        )

    @property
    def completed(self) -> bool:
        return self.status == Status.COMPLETED.value


class Journal:
    """Append-only attempt log, optionally backed by an NDJSON file.

    Each append is flushed and fsynced before returning. A ``.lock`` marker
    next to the file keeps a second orchestrator off the same journal.
    """

    def __init__(self, path: str | Path | None = None, entries: Iterable[JournalEntry] = (), fsync: bool = True):
        self.path = Path(path) if path is not None else None
        self.entries: list[JournalEntry] = list(entries)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._fh = None
        self._marker: Path | None = None
        if self.path is not None:
            self._marker = self.path.with_name(self.path.name + ".lock")
            try:
                fd = os.open(self._marker, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(fd, str(os.getpid()).encode())
                os.close(fd)
            except FileExistsError as exc:
                raise JournalWriteError(f"journal {self.path} is in use (remove {self._marker} if stale)") from exc
            except OSError as exc:
                raise JournalWriteError(f"cannot lock journal {self.path}: {exc}") from exc
            try:
                self._fh = open(self.path, "a", encoding="utf-8")
            except OSError as exc:
                self._release()
                raise JournalWriteError(f"cannot open journal {self.path}: {exc}") from exc

    @classmethod
    def open(cls, path: str | Path, fsync: bool = True) -> "Journal":
        """Reopen an existing journal for appending, keeping its entries."""
        entries = read_journal(path)
        with open(path, "rb+") as fh:
            data = fh.read()
            if data and not data.endswith(b"\n"):
                cut = data.rfind(b"\n") + 1
                if entries and canonical.dumps(entries[-1].to_dict()).encode() == data[cut:]:
                    fh.write(b"\n")
                else:
                    # torn tail: drop it so the next append starts on a fresh line
                    fh.truncate(cut)
        return cls(path, entries, fsync)

    @property
    def next_seq(self) -> int:
        return self.entries[-1].seq + 1 if self.entries else 0

    def append(self, entry: JournalEntry) -> None:
        with self._lock:
            if self.entries and entry.seq <= self.entries[-1].seq:
                raise JournalWriteError(f"journal seq must increase: {entry.seq} after {self.entries[-1].seq}")
            if self._fh is not None:
                try:
                    self._fh.write(canonical.dumps(entry.to_dict()) + "\n")
                    self._fh.flush()
                    if self.fsync:
                        os.fsync(self._fh.fileno())
                except (OSError, ValueError) as exc:
                    raise JournalWriteError(f"journal append failed: {exc}") from exc
            self.entries.append(entry)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        self._release()

    def _release(self) -> None:
        if self._marker is not None:
            try:
                self._marker.unlink()
            except FileNotFoundError:
                pass
            self._marker = None

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __len__(self) -> int:
        return len(self.entries)


def read_journal(path: str | Path) -> list[JournalEntry]:
    """Load entries; a torn final line from an interrupted write is dropped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(JournalEntry.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            if i >= len(lines) - 2:
                logger.warning("dropping torn last journal line in %s", path)
                break
            raise
    return out


def serialize_journal(entries: Iterable[JournalEntry], normalize_time: bool = False) -> str:
    lines = []
    for e in entries:
        d = e.to_dict()
        if normalize_time:
            d["started_ms"] = d["ended_ms"] = 0
        lines.append(canonical.dumps(d))
    return "\n".join(lines) + ("\n" if lines else "")


def materialize_inputs(node: NodeDecl, completed: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for name, ref in node.inputs.items():
        if isinstance(ref, Literal):
            out[name] = ref.value
        elif isinstance(ref, OutputOf):
            if ref.node not in completed:
                raise MissingDependencyError(f"node {node.id!r} needs output of {ref.node!r}, which has not completed")
            out[name] = completed[ref.node]
    return out


def input_hash(task: str, inputs: Mapping[str, Any], ctx: Context) -> str:
    return canonical.sha256({"task": task, "inputs": dict(inputs), "context": ctx.to_list()})


class Executor(Protocol):
    def execute(self, req: TaskRequest) -> TaskResponse: ...


class LocalExecutor:
    """Runs worker logic in-process, no sockets."""

    def __init__(self, registry: TaskRegistry, capacity: int | None = None):
        self.registry = registry
        self.gate = CapacityGate(capacity) if capacity else None
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def execute(self, req: TaskRequest) -> TaskResponse:
        with self._lock:
            self.calls.append(req.node_id)
        return handle_execute(req, self.registry, self.gate)


class GatewayExecutor:
    """Submits each request to a gateway's ``POST /submit``."""

    def __init__(self, url: str, timeout_s: float = 600.0):
        self.url = url
        self.timeout_s = timeout_s

    def execute(self, req: TaskRequest) -> TaskResponse:
        try:
            status, body = request_json(self.url, "POST", "/submit", req.to_dict(), timeout=self.timeout_s)
        except TransportError as exc:
            raise ExecutorUnavailable(f"gateway unreachable at {self.url}: {exc}") from exc
        if status != 200:
            return TaskResponse.failed(req.request_id, f"gateway http {status}: {body}")
        return TaskResponse.from_dict(body)


COMPLETED = "COMPLETED"
FAILED = "FAILED"
SKIPPED = "SKIPPED"
QUEUED = "QUEUED"
PENDING = "PENDING"

RUN_COMPLETED = "COMPLETED"
RUN_FAILED_PARTIAL = "FAILED-PARTIAL"
RUN_INCOMPLETE = "INCOMPLETE"


@dataclass
class RunResult:
    outputs: dict[str, Any]
    statuses: dict[str, str]
    journal: list[JournalEntry]
    wall_ms: float = 0.0
    executed: list[str] = field(default_factory=list)

    @property
    def status(self) -> str:
        vals = set(self.statuses.values())
        if vals <= {COMPLETED}:
            return RUN_COMPLETED
        if vals & {QUEUED, PENDING}:
            return RUN_INCOMPLETE
        return RUN_FAILED_PARTIAL

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "outputs": self.outputs,
            "statuses": self.statuses,
            "journal": [e.to_dict() for e in self.journal],
            "wall_ms": self.wall_ms,
        }

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())

    def export(self) -> dict:
        """Timing-free view written to result files; equal across replays."""
        return {"status": self.status, "outputs": self.outputs, "statuses": self.statuses}


def _wall_ms() -> int:
    return int(time.time() * 1000)


class _Run:
    def __init__(self, g, executor, retry, journal, clock, sleep, run_id, memo):
        self.g = g
        self.executor = executor
        self.retry = retry
        self.journal = journal
        self.clock = clock
        self.sleep = sleep
        self.run_id = run_id
        self.memo = memo
        self.outputs: dict[str, Any] = {}
        self.statuses: dict[str, str] = {n.id: PENDING for n in g.spec.nodes}
        self.executed: list[str] = []
        self._jlock = threading.Lock()
        self._seq = journal.next_seq

    def _record(self, **kw) -> JournalEntry:
        with self._jlock:
            entry = JournalEntry(seq=self._seq, **kw)
            self.journal.append(entry)
            self._seq += 1
            return entry

    def run_node(self, node: NodeDecl) -> bool:
        ctx = self.g.contexts[node.id]
        try:
            inputs = materialize_inputs(node, self.outputs)
        except MissingDependencyError:
            self.statuses[node.id] = SKIPPED
            return False
        h = input_hash(node.task, inputs, ctx)
        memo = self.memo.get(node.id)
        if memo is not None:
            self.outputs[node.id] = memo.output
            self.statuses[node.id] = COMPLETED
            return True
        depths = self.g.origin_depths(node.id)
        for attempt in range(1, self.retry.max_attempts + 1):
            if attempt > 1:
                self.sleep(self.retry.delay_ms(attempt))
            req = TaskRequest(f"{self.run_id}:{node.id}:{attempt}", node.id, node.task, inputs, ctx, attempt, depths)
            started = self.clock()
            self.statuses[node.id] = QUEUED
            with_exc = None
            try:
                resp = self.executor.execute(req)
            except ExecutionHalted:
                raise
            except ExecutorUnavailable:
                raise
            except Exception as exc:  # noqa: BLE001 - an executor bug counts as a failed attempt
                with_exc = exc
                resp = TaskResponse.failed(req.request_id, f"executor error: {exc}")
            self.executed.append(node.id)
            entry = self._record(
                node_id=node.id,
                attempt=attempt,
                input_hash=h,
                status=resp.status.value,
                output=resp.output if resp.status is Status.COMPLETED else None,
                reason=resp.reason,
                started_ms=started,
                ended_ms=self.clock(),
            )
            if with_exc is not None:
                logger.warning("node %s attempt %d: %s", node.id, attempt, with_exc)
            if entry.completed:
                self.outputs[node.id] = entry.output
                self.statuses[node.id] = COMPLETED
                return True
        self.statuses[node.id] = FAILED
        return False

    def run_supernode(self, sid: str) -> bool:
        ok = True
        for m in self.g.condensed.supernode(sid).members:
            ok = self.run_node(self.g.nodes[m]) and ok
        return ok

    def execute(self, max_parallel: int) -> None:
        cond = self.g.condensed
        blocked: set[str] = set()
        pool = ThreadPoolExecutor(max_parallel) if max_parallel > 1 else None
        try:
            for wave in cond.topo_waves:
                runnable = [s for s in wave if s not in blocked]
                for s in wave:
                    if s in blocked:
                        for m in cond.supernode(s).members:
                            self.statuses[m] = SKIPPED
                if pool is None:
                    results = [self.run_supernode(s) for s in runnable]
                else:
                    results = list(pool.map(self.run_supernode, runnable))
                for s, ok in zip(runnable, results):
                    if not ok:
                        blocked |= cond.descendants(s)
        finally:
            if pool is not None:
                pool.shutdown(wait=True)


def run_graph(
    g: ValidatedGraph,
    executor: Executor,
    retry: RetryPolicy = RetryPolicy(),
    journal: Journal | None = None,
    *,
    run_id: str = "run",
    clock: Callable[[], int] = _wall_ms,
    sleep: Callable[[float], None] = lambda ms: time.sleep(ms / 1000),
    max_parallel: int = 1,
    _memo: Mapping[str, JournalEntry] | None = None,
) -> RunResult:
    """Execute every node wave by wave.

    Inputs are injected from literals and completed ancestor outputs, and
    each request carries the node's full context. Each attempt is journaled
    before its outcome is used. A node that exhausts its retries skips its
    descendants; independent branches still run.
    """
    journal = journal if journal is not None else Journal()
    start = time.monotonic()
    run = _Run(g, executor, retry, journal, clock, sleep, run_id, dict(_memo or {}))
    try:
        run.execute(max_parallel)
    except ExecutionHalted as exc:
        logger.info("run halted: %s", exc)
    return RunResult(
        outputs={n.id: run.outputs[n.id] for n in g.spec.nodes if n.id in run.outputs},
        statuses=dict(run.statuses),
        journal=list(journal.entries),
        wall_ms=round((time.monotonic() - start) * 1000, 3),
        executed=run.executed,
    )


def replay(
    journal: Journal | Iterable[JournalEntry],
    g: ValidatedGraph,
    executor: Executor,
    retry: RetryPolicy = RetryPolicy(),
    **kw,
) -> RunResult:
    """Resume a run from its journal.

    Nodes whose COMPLETED entry still matches the recomputed input hash are
    read back instead of re-executed. Any recorded hash that disagrees with
    the graph raises JournalMismatchError.
    """
    if not isinstance(journal, Journal):
        journal = Journal(entries=journal)
    by_node: dict[str, list[JournalEntry]] = {}
    for e in journal.entries:
        by_node.setdefault(e.node_id, []).append(e)
    known = {n.id for n in g.spec.nodes}
    stray = sorted(set(by_node) - known)
    if stray:
        raise JournalMismatchError(f"journal mentions nodes not in the graph: {stray}")

    # recompute hashes in wave order, feeding recorded outputs forward
    completed: dict[str, Any] = {}
    memo: dict[str, JournalEntry] = {}
    for wave in g.condensed.topo_waves:
        for sid in wave:
            for nid in g.condensed.supernode(sid).members:
                entries = by_node.get(nid, [])
                if not entries:
                    continue
                node = g.nodes[nid]
                try:
                    inputs = materialize_inputs(node, completed)
                except MissingDependencyError as exc:
                    raise JournalMismatchError(f"journal has attempts for {nid!r} before its inputs completed") from exc
                h = input_hash(node.task, inputs, g.contexts[nid])
                done = [e for e in entries if e.completed]
                if len(done) > 1:
                    raise JournalMismatchError(f"node {nid!r} completed more than once")
                for e in entries:
                    if e.input_hash != h:
                        raise JournalMismatchError(f"input hash for {nid!r} changed since the journal was written")
                if done:
                    memo[nid] = done[0]
                    completed[nid] = done[0].output
    return run_graph(g, executor, retry, journal, _memo=memo, **kw)
