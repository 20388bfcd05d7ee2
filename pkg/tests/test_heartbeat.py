import itertools
import json
import os
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import jsonschema
import pytest

from ctxgraph.heartbeat import (
    HEARTBEAT_SCHEMA,
    REPORT_KEYS,
    FakeSampler,
    HeartbeatMonitor,
    Outcome,
    ProbeResult,
    PsutilSampler,
    SamplerError,
    ServerStatus,
    classify,
    probe,
    serve_heartbeat,
    snapshot,
)
from ctxgraph.wire import BindError, request_json, start_service
from ctxgraph.worker import Worker, load_registry


def test_fake_sampler_no_gpu():
    r = snapshot(FakeSampler(10, 20, 30), "s1")
    assert (r.cpu_percent, r.memory_percent, r.disk_percent, r.gpu_percent) == (10, 20, 30, None)
    assert r.to_dict()["gpu_percent"] is None


def test_fake_sampler_with_gpu():
    assert snapshot(FakeSampler(1, 2, 3, gpu=55)).gpu_percent == 55


def test_sampler_failure_emits_nothing():
    with pytest.raises(SamplerError):
        snapshot(FakeSampler(fail=True))
    with pytest.raises(SamplerError):
        snapshot(FakeSampler(cpu=101))


def _meminfo_percent():
    fields = {}
    with open("/proc/meminfo") as fh:
        for line in fh:
            name, value = line.split(":", 1)
            fields[name] = int(value.split()[0])
    return 100 * (fields["MemTotal"] - fields["MemAvailable"]) / fields["MemTotal"]


def _statvfs_percent(path="/"):
    st = os.statvfs(path)
    used = (st.f_blocks - st.f_bfree) * st.f_frsize
    free = st.f_bavail * st.f_frsize
    return 100 * used / (used + free) if used + free else 0.0


@pytest.mark.skipif(not os.path.exists("/proc/meminfo"), reason="needs /proc")
def test_real_sampler_agrees_with_independent_readings():
    r = snapshot(PsutilSampler())
    jsonschema.validate(r.to_dict(), HEARTBEAT_SCHEMA)
    assert abs(r.timestamp_ms - time.time() * 1000) <= 5000
    assert abs(r.memory_percent - _meminfo_percent()) < 5
    assert abs(r.disk_percent - _statvfs_percent()) < 1
    assert r.gpu_percent is None


def test_monitor_timestamps_never_decrease():
    ticks = iter([100, 90, 120, 110])
    mon = HeartbeatMonitor("s", FakeSampler(), clock=lambda: next(ticks))
    stamps = [mon.snapshot().timestamp_ms for _ in range(4)]
    assert stamps == sorted(stamps) == [100, 100, 120, 120]


@pytest.fixture
def hb():
    handle = serve_heartbeat(0, FakeSampler(12.5, 40, 70), server_id="hb-test")
    yield handle
    handle.stop()


def test_serve_heartbeat_report(hb):
    status, body = request_json(hb.address, "GET", "/heartbeat")
    assert status == 200
    jsonschema.validate(body, HEARTBEAT_SCHEMA)
    assert body["server_id"] == "hb-test" and body["cpu_percent"] == 12.5


def test_unknown_path_is_404(hb):
    assert request_json(hb.address, "GET", "/unknown")[0] == 404


def test_wire_key_order_and_content_type(hb):
    import http.client

    conn = http.client.HTTPConnection(hb.host, hb.port, timeout=5)
    conn.request("GET", "/heartbeat")
    resp = conn.getresponse()
    raw = resp.read().decode()
    conn.close()
    assert resp.getheader("Content-Type").startswith("application/json")
    assert list(json.loads(raw)) == list(REPORT_KEYS)
    assert raw.startswith('{"server_id":')


def test_hundred_concurrent_gets(hb):
    def fetch(_):
        return request_json(hb.address, "GET", "/heartbeat")

    with ThreadPoolExecutor(max_workers=32) as pool:
        results = list(pool.map(fetch, range(100)))
    assert len(results) == 100
    for status, body in results:
        assert status == 200
        jsonschema.validate(body, HEARTBEAT_SCHEMA)
        assert list(body) == list(REPORT_KEYS)


def test_sampler_error_gives_503():
    handle = serve_heartbeat(0, FakeSampler(fail=True))
    try:
        assert request_json(handle.address, "GET", "/heartbeat")[0] == 503
        assert probe(handle.address).outcome is Outcome.FAILED
    finally:
        handle.stop()


def test_bind_error_on_taken_port(hb):
    with pytest.raises(BindError):
        serve_heartbeat(hb.port, FakeSampler())


def test_probe_live(hb):
    r = probe(hb.address, timeout_ms=2000)
    assert r.outcome is Outcome.OK
    assert r.payload.server_id == "hb-test"


def test_probe_http_500():
    def boom(_):
        return 500, {"error": "x"}

    handle = start_service("t", "127.0.0.1", 0, {("GET", "/heartbeat"): boom})
    try:
        r = probe(handle.address, timeout_ms=2000)
        assert r.outcome is Outcome.FAILED and r.reason == "http 500"
    finally:
        handle.stop()


def test_probe_malformed_body():
    handle = start_service("t", "127.0.0.1", 0, {("GET", "/heartbeat"): lambda _: (200, {"cpu": 1})})
    try:
        r = probe(handle.address, timeout_ms=2000)
        assert r.outcome is Outcome.FAILED and "malformed" in r.reason
    finally:
        handle.stop()


def test_probe_refused_is_failed():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert probe(f"127.0.0.1:{port}", timeout_ms=500).outcome is Outcome.FAILED


def test_probe_timeout_latency_at_least_timeout():
    # a listening socket that never accepts: the connection completes but nothing answers
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen(8)
    try:
        t0 = time.monotonic()
        r = probe(f"127.0.0.1:{s.getsockname()[1]}", timeout_ms=100)
        wall = (time.monotonic() - t0) * 1000
    finally:
        s.close()
    assert r.outcome is Outcome.TIMEOUT
    assert r.latency_ms >= 100 and wall >= 100


def test_probe_rejects_nonpositive_timeout():
    with pytest.raises(ValueError):
        probe("127.0.0.1:1", timeout_ms=0)


OUTCOMES = {
    Outcome.OK: ProbeResult(Outcome.OK, 1.0, payload={}),
    Outcome.FAILED: ProbeResult(Outcome.FAILED, 1.0, reason="http 500"),
    Outcome.TIMEOUT: ProbeResult(Outcome.TIMEOUT, 1000.0, reason="timeout"),
}


def expected_status(hb_ok: bool, app_ok: bool) -> ServerStatus:
    table = {
        (True, True): ServerStatus.HEALTHY,
        (True, False): ServerStatus.APPLICATION_ERROR,
        (False, False): ServerStatus.SYSTEM_ERROR,
        (False, True): ServerStatus.DEGRADED,
    }
    return table[(hb_ok, app_ok)]


@pytest.mark.parametrize("hb_out,app_out", list(itertools.product(Outcome, repeat=2)))
def test_classification_grid(hb_out, app_out):
    got = classify(OUTCOMES[hb_out], OUTCOMES[app_out])
    assert got is expected_status(hb_out is Outcome.OK, app_out is Outcome.OK)


def test_classification_named_examples():
    assert classify(OUTCOMES[Outcome.OK], OUTCOMES[Outcome.OK]) is ServerStatus.HEALTHY
    assert classify(OUTCOMES[Outcome.OK], OUTCOMES[Outcome.TIMEOUT]) is ServerStatus.APPLICATION_ERROR
    assert classify(OUTCOMES[Outcome.TIMEOUT], OUTCOMES[Outcome.TIMEOUT]) is ServerStatus.SYSTEM_ERROR
    assert classify(OUTCOMES[Outcome.FAILED], OUTCOMES[Outcome.OK]) is ServerStatus.DEGRADED


@pytest.mark.integration
@pytest.mark.parametrize("stop_first", ["app", "heartbeat"])
def test_services_stop_independently(stop_first):
    w = Worker(load_registry(), "w", sampler=FakeSampler(5, 5, 5)).start()
    try:
        getattr(w, stop_first).stop()
        hb_r = probe(w.hb_address, "/heartbeat", 1000)
        app_r = probe(w.app_address, "/tasks", 1000)
        if stop_first == "app":
            assert hb_r.ok and not app_r.ok
            assert classify(hb_r, app_r) is ServerStatus.APPLICATION_ERROR
        else:
            assert app_r.ok and not hb_r.ok
            assert classify(hb_r, app_r) is ServerStatus.DEGRADED
    finally:
        w.stop()


def test_concurrent_snapshots_are_untorn():
    class Flipping:
        """Sampler whose fields move together; a torn read would mix them."""

        def __init__(self):
            self.n = 0
            self.lock = threading.Lock()

        def sample(self):
            with self.lock:
                self.n = (self.n + 1) % 50
                v = float(self.n)
            return {"cpu": v, "memory": v, "disk": v, "gpu": v}

    handle = serve_heartbeat(0, Flipping())
    try:
        with ThreadPoolExecutor(max_workers=16) as pool:
            bodies = [b for _, b in pool.map(lambda _: request_json(handle.address, "GET", "/heartbeat"), range(60))]
        for b in bodies:
            assert b["cpu_percent"] == b["memory_percent"] == b["disk_percent"] == b["gpu_percent"]
    finally:
        handle.stop()
