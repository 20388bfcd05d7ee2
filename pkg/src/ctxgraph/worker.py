"""Generic worker server: a task registry behind an execute endpoint.

Tasks are plain functions ``fn(ctx, **inputs)``.  ``ctx`` is a read-only
flattened view of the node's context; every other argument is injected
from the request's inputs, so a call is a pure function of its request.
"""

from __future__ import annotations

import copy
import enum
import importlib
import importlib.util
import inspect
import os
import threading
import time
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import canonical
from .context import ORIGIN, Context, flatten
from .heartbeat import HeartbeatMonitor, PsutilSampler, Sampler, serve_heartbeat
from .wire import BadRequest, ServiceHandle, start_service

DEFAULT_CAPACITY = 4


class DuplicateTaskError(ValueError):
    pass


class RegistrationClosedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskDescriptor:
    name: str
    fn: Callable[..., Any]
    params: tuple[str, ...]
    pure: bool = True

    @property
    def arity(self) -> int:
        return len(self.params)

    @classmethod
    def from_callable(cls, name: str, fn: Callable[..., Any], pure: bool = True) -> "TaskDescriptor":
        sig = inspect.signature(fn)
        names = list(sig.parameters)
        if not names:
            raise TypeError(f"task {name!r} must accept the context as its first parameter")
        return cls(name, fn, tuple(names[1:]), pure)


class TaskRegistry:
    def __init__(self) -> None:
        self._entries: dict[str, TaskDescriptor] = {}
        self._closed = False

    def register(self, name: str, fn_or_desc: Callable[..., Any] | TaskDescriptor, pure: bool = True) -> "TaskRegistry":
        if self._closed:
            raise RegistrationClosedError(f"cannot register {name!r}: registry is closed")
        if name in self._entries:
            raise DuplicateTaskError(f"task {name!r} already registered")
        desc = fn_or_desc if isinstance(fn_or_desc, TaskDescriptor) else TaskDescriptor.from_callable(name, fn_or_desc, pure)
        self._entries[name] = desc
        return self

    def task(self, name: str | None = None, pure: bool = True):
        """Decorator form of :meth:`register`."""

        def deco(fn):
            self.register(name or fn.__name__, fn, pure)
            return fn

        return deco

    def close(self) -> None:
        self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed

    def names(self) -> list[str]:
        return sorted(self._entries)

    def get(self, name: str) -> TaskDescriptor | None:
        return self._entries.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)


def register_task(registry: TaskRegistry, name: str, descriptor) -> TaskRegistry:
    return registry.register(name, descriptor)


def load_registry(manifest: str | None = None) -> TaskRegistry:
    """Build a registry from a module path or a ``.py`` file.

    The module must define ``TASKS`` (name -> callable) or
    ``register(registry)``. ``None`` loads the bundled demo tasks.
    """
    if manifest is None:
        manifest = "ctxgraph.tasks"
    if manifest.endswith(".py") or os.path.sep in manifest:
        path = Path(manifest)
        spec = importlib.util.spec_from_file_location(path.stem, path)
        if spec is None or spec.loader is None:
            raise ImportError(f"cannot load task manifest {manifest}")
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
    else:
        module = importlib.import_module(manifest)
    registry = TaskRegistry()
    if hasattr(module, "register"):
        module.register(registry)
    else:
        for name, fn in module.TASKS.items():
            registry.register(name, fn)
    return registry


class Status(str, enum.Enum):
    COMPLETED = "COMPLETED"
    REFUSED = "REFUSED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class TaskRequest:
    request_id: str
    node_id: str
    task: str
    inputs: Mapping[str, Any]
    context: Context
    attempt: int = 1
    # depth of each origin in the graph, needed to flatten the context
    origin_depths: Mapping[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "node_id": self.node_id,
            "task": self.task,
            "inputs": dict(self.inputs),
            "context": self.context.to_list(),
            "attempt": self.attempt,
            "origin_depths": dict(self.origin_depths),
        }

    @classmethod
    def from_dict(cls, raw: Any) -> "TaskRequest":
        if not isinstance(raw, Mapping):
            raise ValueError("request body must be an object")
        try:
            attempt = raw.get("attempt", 1)
            if not isinstance(attempt, int) or attempt < 1:
                raise ValueError("attempt must be an integer >= 1")
            inputs = raw.get("inputs", {})
            if not isinstance(inputs, Mapping):
                raise ValueError("inputs must be an object")
            return cls(
                request_id=str(raw["request_id"]),
                node_id=str(raw.get("node_id", "")),
                task=str(raw["task"]),
                inputs=dict(inputs),
                context=Context.from_list(raw.get("context", [])),
                attempt=attempt,
                origin_depths={str(k): int(v) for k, v in raw.get("origin_depths", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed task request: {exc}") from exc

    def with_attempt(self, attempt: int) -> "TaskRequest":
        return TaskRequest(self.request_id, self.node_id, self.task, self.inputs, self.context, attempt, self.origin_depths)


@dataclass(frozen=True)
class TaskResponse:
    request_id: str
    status: Status
    output: Any = None
    reason: str = ""
    duration_ms: float = 0.0

    @classmethod
    def completed(cls, request_id: str, output: Any, duration_ms: float = 0.0) -> "TaskResponse":
        return cls(request_id, Status.COMPLETED, output=output, duration_ms=duration_ms)

    @classmethod
    def refused(cls, request_id: str, reason: str, duration_ms: float = 0.0) -> "TaskResponse":
        return cls(request_id, Status.REFUSED, reason=reason, duration_ms=duration_ms)

    @classmethod
    def failed(cls, request_id: str, reason: str, duration_ms: float = 0.0) -> "TaskResponse":
        return cls(request_id, Status.FAILED, reason=reason, duration_ms=duration_ms)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"request_id": self.request_id, "status": self.status.value}
        if self.status is Status.COMPLETED:
            out["output"] = self.output
        else:
            out["reason"] = self.reason
        out["duration_ms"] = self.duration_ms
        return out

    @classmethod
    def from_dict(cls, raw: Any) -> "TaskResponse":
        if not isinstance(raw, Mapping) or "request_id" not in raw or "status" not in raw:
            raise ValueError(f"malformed task response: {raw!r}")
        return cls(
            request_id=str(raw["request_id"]),
            status=Status(raw["status"]),
            output=raw.get("output"),
            reason=str(raw.get("reason", "")),
            duration_ms=float(raw.get("duration_ms", 0.0)),
        )


class CapacityGate:
    """Non-blocking admission limit on concurrent executions."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._sem = threading.BoundedSemaphore(capacity)
        self._lock = threading.Lock()
        self.in_flight = 0

    def try_acquire(self) -> bool:
        if not self._sem.acquire(blocking=False):
            return False
        with self._lock:
            self.in_flight += 1
        return True

    def release(self) -> None:
        with self._lock:
            self.in_flight -= 1
        self._sem.release()


class TaskContext(Mapping):
    """Read-only flattened context passed to tasks.

    ``entries`` exposes the raw provenance-tagged context only when the
    worker was started with ``expose_provenance=True``.
    """

    def __init__(self, flat: dict[str, Any], entries: Context | None = None):
        self._flat = flat
        self.entries = entries

    def __getitem__(self, key: str) -> Any:
        return copy.deepcopy(self._flat[key])

    def __iter__(self) -> Iterator[str]:
        return iter(self._flat)

    def __len__(self) -> int:
        return len(self._flat)

    def __repr__(self) -> str:
        return f"TaskContext({self._flat!r})"


# interceptor(request) -> None to admit, or a refusal reason
Interceptor = Callable[[TaskRequest], "str | None"]


def handle_execute(
    req: TaskRequest,
    registry: TaskRegistry,
    gate: CapacityGate | None = None,
    interceptors: tuple[tuple[str, Interceptor], ...] = (),
    expose_provenance: bool = False,
) -> TaskResponse:
    start = time.monotonic()

    def ms() -> float:
        return round((time.monotonic() - start) * 1000, 3)

    desc = registry.get(req.task)
    if desc is None:
        return TaskResponse.refused(req.request_id, "unknown task", ms())
    for name, check in interceptors:
        reason = check(req)
        if reason:
            return TaskResponse.refused(req.request_id, f"{name}: {reason}", ms())
    if gate is not None and not gate.try_acquire():
        return TaskResponse.refused(req.request_id, "at capacity", ms())
    try:
        missing = [p for p in desc.params if p not in req.inputs and _required(desc, p)]
        if missing:
            return TaskResponse.failed(req.request_id, f"missing inputs: {', '.join(missing)}", ms())
        try:
            depths = {o: 0 for o in req.context.origins if o != ORIGIN}
            flat = flatten(req.context, {**depths, **req.origin_depths})
            ctx = TaskContext(flat, req.context if expose_provenance else None)
            output = desc.fn(ctx, **copy.deepcopy(dict(req.inputs)))
        except Exception as exc:  # noqa: BLE001 - task errors become FAILED responses
            return TaskResponse.failed(req.request_id, f"{type(exc).__name__}: {exc}", ms())
        if not canonical.is_json_value(output):
            return TaskResponse.failed(req.request_id, f"task output is not JSON-serializable: {type(output).__name__}", ms())
        return TaskResponse.completed(req.request_id, output, ms())
    finally:
        if gate is not None:
            gate.release()


def _required(desc: TaskDescriptor, param: str) -> bool:
    p = inspect.signature(desc.fn).parameters[param]
    return p.default is inspect.Parameter.empty and p.kind not in (p.VAR_KEYWORD, p.VAR_POSITIONAL)


def serve_worker(
    port: int,
    registry: TaskRegistry,
    capacity: int | CapacityGate = DEFAULT_CAPACITY,
    host: str = "127.0.0.1",
    interceptors: tuple[tuple[str, Interceptor], ...] = (),
    expose_provenance: bool = False,
) -> ServiceHandle:
    """Start the application service. Closes the registry first."""
    registry.close()
    gate = capacity if isinstance(capacity, CapacityGate) else CapacityGate(capacity)

    def execute(body):
        try:
            req = TaskRequest.from_dict(body)
        except ValueError as exc:
            raise BadRequest(str(exc)) from exc
        resp = handle_execute(req, registry, gate, interceptors, expose_provenance)
        return 200, resp.to_dict()

    def tasks(_body):
        return 200, registry.names()

    return start_service("worker", host, port, {("POST", "/execute"): execute, ("GET", "/tasks"): tasks})


class Worker:
    """One server: application service and heartbeat service on separate ports."""

    def __init__(
        self,
        registry: TaskRegistry,
        server_id: str = "worker",
        port: int = 0,
        hb_port: int = 0,
        capacity: int = DEFAULT_CAPACITY,
        sampler: Sampler | None = None,
        host: str = "127.0.0.1",
    ):
        self.registry = registry
        self.server_id = server_id
        self.host = host
        self.port = port
        self.hb_port = hb_port
        self.gate = CapacityGate(capacity)
        self.monitor = HeartbeatMonitor(server_id, sampler or PsutilSampler())
        self.app: ServiceHandle | None = None
        self.heartbeat: ServiceHandle | None = None

    def start(self) -> "Worker":
        self.start_heartbeat()
        self.start_app()
        return self

    def start_app(self) -> ServiceHandle:
        self.app = serve_worker(self.port, self.registry, self.gate, self.host)
        self.port = self.app.port
        return self.app

    def start_heartbeat(self) -> ServiceHandle:
        self.heartbeat = serve_heartbeat(self.hb_port, self.monitor, host=self.host)
        self.hb_port = self.heartbeat.port
        return self.heartbeat

    @property
    def app_address(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def hb_address(self) -> str:
        return f"{self.host}:{self.hb_port}"

    def server_entry(self) -> dict:
        return {"server_id": self.server_id, "app_address": self.app_address, "hb_address": self.hb_address}

    def stop(self) -> None:
        for svc in (self.app, self.heartbeat):
            if svc is not None:
                svc.stop()
