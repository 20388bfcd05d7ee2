"""Heartbeat resource monitor, liveness probing and failure classification.

The heartbeat service runs on its own port, separate from the application
service of the same server.  Comparing the two probes tells a host-level
failure (both silent) apart from an application-level one (heartbeat
answers, application does not).
"""

from __future__ import annotations

import enum
import json
import os
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any, Protocol

from .wire import BindError, ServiceHandle, TransportError, request_json, start_service

__all__ = [
    "BindError",
    "HEARTBEAT_SCHEMA",
    "FakeSampler",
    "HeartbeatMonitor",
    "HeartbeatReport",
    "Outcome",
    "ProbeResult",
    "PsutilSampler",
    "SamplerError",
    "ServerStatus",
    "classify",
    "probe",
    "serve_heartbeat",
    "snapshot",
]

DEFAULT_TIMEOUT_MS = int(os.environ.get("CTXGRAPH_HB_TIMEOUT_MS", "1000"))

HEARTBEAT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["server_id", "cpu_percent", "memory_percent", "disk_percent", "gpu_percent", "timestamp_ms"],
    "properties": {
        "server_id": {"type": "string"},
        "cpu_percent": {"type": "number", "minimum": 0, "maximum": 100},
        "memory_percent": {"type": "number", "minimum": 0, "maximum": 100},
        "disk_percent": {"type": "number", "minimum": 0, "maximum": 100},
        "gpu_percent": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "timestamp_ms": {"type": "integer", "minimum": 0},
    },
}

REPORT_KEYS = ("server_id", "cpu_percent", "memory_percent", "disk_percent", "gpu_percent", "timestamp_ms")


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class HeartbeatReport:
    server_id: str
    cpu_percent: float
    memory_percent: float
    disk_percent: float
    gpu_percent: float | None
    timestamp_ms: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self) -> str:
        # fixed key order, not sorted
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, raw: Any) -> "HeartbeatReport":
        if not isinstance(raw, dict) or set(raw) != set(REPORT_KEYS):
            raise ValueError(f"not a heartbeat report: {raw!r}")
        for k in ("cpu_percent", "memory_percent", "disk_percent", "gpu_percent"):
            v = raw[k]
            if v is None and k == "gpu_percent":
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 <= v <= 100:
                raise ValueError(f"{k} out of range: {v!r}")
        if not isinstance(raw["timestamp_ms"], int) or not isinstance(raw["server_id"], str):
            raise ValueError("bad server_id or timestamp_ms")
        return cls(**{k: raw[k] for k in REPORT_KEYS})


class Sampler(Protocol):
    def sample(self) -> dict[str, float | None]:
        """Return cpu, memory, disk and gpu percentages (gpu may be None)."""


class PsutilSampler:
    """Reads host counters through psutil. GPU usage comes only from ``gpu_sampler``."""

    def __init__(self, disk_path: str = "/", gpu_sampler: Callable[[], float] | None = None):
        self.disk_path = disk_path
        self.gpu_sampler = gpu_sampler

    def sample(self) -> dict[str, float | None]:
        import psutil

        try:
            cpu = psutil.cpu_percent(interval=None)
            mem = psutil.virtual_memory().percent
            disk = psutil.disk_usage(self.disk_path).percent
            gpu = self.gpu_sampler() if self.gpu_sampler else None
        except Exception as exc:
            raise SamplerError(f"cannot read host counters: {exc}") from exc
        return {"cpu": cpu, "memory": mem, "disk": disk, "gpu": gpu}


@dataclass
class FakeSampler:
    cpu: float = 0.0
    memory: float = 0.0
    disk: float = 0.0
    gpu: float | None = None
    fail: bool = False

    def sample(self) -> dict[str, float | None]:
        if self.fail:
            raise SamplerError("fake sampler set to fail")
        return {"cpu": self.cpu, "memory": self.memory, "disk": self.disk, "gpu": self.gpu}


def _pct(name: str, v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 <= v <= 100:
        raise SamplerError(f"{name} reading out of range: {v!r}")
    return v


def snapshot(sampler: Sampler, server_id: str = "local", clock: Callable[[], int] | None = None) -> HeartbeatReport:
    """Build one report from a sampler; nothing is emitted if any reading is bad."""
    raw = sampler.sample()
    gpu = raw.get("gpu")
    ts = clock() if clock else int(time.time() * 1000)
    return HeartbeatReport(
        server_id=server_id,
        cpu_percent=_pct("cpu", raw["cpu"]),
        memory_percent=_pct("memory", raw["memory"]),
        disk_percent=_pct("disk", raw["disk"]),
        gpu_percent=None if gpu is None else _pct("gpu", gpu),
        timestamp_ms=ts,
    )


class HeartbeatMonitor:
    """Thread-safe snapshot source with non-decreasing timestamps."""

    def __init__(self, server_id: str, sampler: Sampler, clock: Callable[[], int] | None = None):
        self.server_id = server_id
        self.sampler = sampler
        self.clock = clock or (lambda: int(time.time() * 1000))
        self._lock = threading.Lock()
        self._last_ms = 0

    def snapshot(self) -> HeartbeatReport:
        with self._lock:
            report = snapshot(self.sampler, self.server_id, self.clock)
            if report.timestamp_ms < self._last_ms:
                report = HeartbeatReport(**{**report.to_dict(), "timestamp_ms": self._last_ms})
            self._last_ms = report.timestamp_ms
            return report


def serve_heartbeat(
    port: int, sampler: Sampler | HeartbeatMonitor, server_id: str = "local", host: str = "127.0.0.1"
) -> ServiceHandle:
    monitor = sampler if isinstance(sampler, HeartbeatMonitor) else HeartbeatMonitor(server_id, sampler)

    def get_heartbeat(_body):
        try:
            return 200, monitor.snapshot().to_json()
        except SamplerError as exc:
            return 503, {"error": str(exc)}

    return start_service("heartbeat", host, port, {("GET", "/heartbeat"): get_heartbeat})


class Outcome(str, enum.Enum):
    OK = "OK"
    FAILED = "FAILED"
    TIMEOUT = "TIMEOUT"


@dataclass(frozen=True)
class ProbeResult:
    outcome: Outcome
    latency_ms: float
    payload: Any = None
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.OK

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.value, "latency_ms": self.latency_ms, "reason": self.reason}


def probe(address: str, path: str = "/heartbeat", timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ProbeResult:
    if timeout_ms <= 0:
        raise ValueError("timeout_ms must be positive")
    start = time.monotonic()

    def elapsed() -> float:
        return (time.monotonic() - start) * 1000

    try:
        status, body = request_json(address, "GET", path, timeout=timeout_ms / 1000)
    except TimeoutError:
        remaining = timeout_ms - elapsed()
        if remaining > 0:
            time.sleep(remaining / 1000)
        return ProbeResult(Outcome.TIMEOUT, elapsed(), reason="timeout")
    except TransportError as exc:
        return ProbeResult(Outcome.FAILED, elapsed(), reason=f"transport: {exc}")
    if elapsed() >= timeout_ms:
        return ProbeResult(Outcome.TIMEOUT, elapsed(), reason="timeout")
    if not 200 <= status < 300:
        return ProbeResult(Outcome.FAILED, elapsed(), reason=f"http {status}")
    if isinstance(body, str):
        return ProbeResult(Outcome.FAILED, elapsed(), reason="malformed body")
    if path == "/heartbeat":
        try:
            body = HeartbeatReport.from_dict(body)
        except ValueError as exc:
            return ProbeResult(Outcome.FAILED, elapsed(), reason=f"malformed body: {exc}")
    return ProbeResult(Outcome.OK, elapsed(), payload=body)


class ServerStatus(str, enum.Enum):
    HEALTHY = "HEALTHY"
    APPLICATION_ERROR = "APPLICATION_ERROR"
    SYSTEM_ERROR = "SYSTEM_ERROR"
    DEGRADED = "DEGRADED"


def classify(hb: ProbeResult, app: ProbeResult) -> ServerStatus:
    """Combine heartbeat and application probes of one server.

    Heartbeat down with the application answering is not an expected state;
    it is reported as DEGRADED, which keeps the server out of allocation
    without declaring it dead.
    """
    if hb.ok:
        return ServerStatus.HEALTHY if app.ok else ServerStatus.APPLICATION_ERROR
    return ServerStatus.DEGRADED if app.ok else ServerStatus.SYSTEM_ERROR
