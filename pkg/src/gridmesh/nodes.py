"""The three long-running node roles, wired over TCP through the link emulator.

UE agents push timed topology/forecast reports to an edge and await acks. An
edge server aggregates its region's view, and on a run opening computes the
region partial (plus scenario set in DSA mode), uploads to the store and
notifies the cloud. The cloud coordinator opens runs, waits on the store
barrier, merges, simulates, stores the result and pushes RunResult back to
every region.

Outbound frames pass through the sender's link emulator: the frame is
scheduled (serialization + delay + jitter, FIFO per direction) and the writer
sleeps until its delivery instant before the socket write. Direction 'up'
points toward the cloud (UE->edge, edge->cloud), 'down' back out.
"""

from __future__ import annotations

import itertools
import json
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import pipeline, wire
from .eventlog import EventLog
from .linkem import DOWN, DROPPED, LinkEmulator, LinkProfile, RealClock, UP, \
    zero_impairment_profile
from .model import GridCase
from .pipeline import RunManifest
from .sampling import ForecastSpec
from .store import AlreadyExistsError, FileStore, partial_key, result_key, scenarios_key
from .wire import Envelope, MessageKind, StreamDecoder

ACK_TIMEOUT_S = 2.0
RESULT_ACK_TIMEOUT_S = 15.0
RECV_CHUNK = 65536


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host, int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


class ShapedConnection:
    """One framed TCP connection; outbound frames go through the link emulator."""

    def __init__(self, sock: socket.socket, emulator: LinkEmulator, out_direction: str,
                 clock=None, peer: str = ""):
        self.sock = sock
        self.emulator = emulator
        self.out_direction = out_direction
        self.clock = clock or RealClock()
        self.peer = peer
        self._send_lock = threading.Lock()
        self._decoder = StreamDecoder()

    def send(self, env: Envelope) -> bool:
        """Returns False when the emulator dropped the frame."""
        frame = wire.encode(env)
        with self._send_lock:
            delivery = self.emulator.schedule_frame(len(frame), self.out_direction,
                                                    self.clock.now())
            if delivery is DROPPED:
                return False
            self.clock.sleep_until(delivery)
            try:
                self.sock.sendall(frame)
            except OSError:
                return False
        return True

    def envelopes(self):
        """Yield inbound envelopes until the peer closes or the socket dies."""
        while True:
            try:
                data = self.sock.recv(RECV_CHUNK)
            except OSError:
                return
            if not data:
                return
            yield from self._decoder.feed(data)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _AckTable:
    """Matches Ack{of: seq} replies to pending sends."""

    def __init__(self):
        self._events: dict[int, threading.Event] = {}
        self._lock = threading.Lock()

    def expect(self, seq: int) -> threading.Event:
        ev = threading.Event()
        with self._lock:
            self._events[seq] = ev
        return ev

    def resolve(self, seq: int) -> None:
        with self._lock:
            ev = self._events.pop(seq, None)
        if ev:
            ev.set()

    def forget(self, seq: int) -> None:
        with self._lock:
            self._events.pop(seq, None)


# ----------------------------------------------------------------------
# UE agent

@dataclass(frozen=True)
class UeScriptItem:
    at_s: float
    kind: str                    # "topology" | "forecast"
    branches: tuple[dict, ...] = ()
    buses: tuple[dict, ...] = ()
    forecast: dict | None = None


@dataclass
class UeReport:
    node_id: str
    delivered: list[int] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)
    error: str | None = None

    @property
    def clean(self) -> bool:
        return self.error is None and not self.failed


def load_ue_script(path: str | Path) -> list[UeScriptItem]:
    items = []
    for obj in json.loads(Path(path).read_text()):
        items.append(UeScriptItem(
            at_s=float(obj["at_s"]), kind=obj["kind"],
            branches=tuple(obj.get("branches", ())),
            buses=tuple(obj.get("buses", ())),
            forecast=obj.get("forecast"),
        ))
    if any(b.at_s > a.at_s for a, b in zip(items[1:], items)):
        raise ValueError("script timestamps must be nondecreasing")
    return items


def ue_agent(node_id: str, script: list[UeScriptItem], edge_addr: tuple[str, int],
             profile: LinkProfile | None = None, log: EventLog | None = None,
             clock=None, ack_timeout: float = ACK_TIMEOUT_S) -> UeReport:
    """Play a timed report script against one edge server."""
    clock = clock or RealClock()
    log = log or EventLog(node_id)
    emulator = LinkEmulator(profile or zero_impairment_profile())
    report = UeReport(node_id=node_id)
    try:
        sock = socket.create_connection(edge_addr, timeout=10.0)
    except OSError as exc:
        report.error = f"connect to {format_addr(edge_addr)} failed: {exc}"
        log.log("ue_error", reason=report.error)
        return report

    conn = ShapedConnection(sock, emulator, UP, clock, peer=format_addr(edge_addr))
    acks = _AckTable()

    def reader():
        for env in conn.envelopes():
            if env.msg_type == MessageKind.ACK:
                acks.resolve(int(env.obj()["of"]))
            elif env.msg_type == MessageKind.ERROR:
                obj = env.obj()
                log.log("edge_error", code=obj.get("code", "?"))

    threading.Thread(target=reader, name=f"{node_id}-reader", daemon=True).start()

    seq = itertools.count(1)

    def send_acked(env: Envelope, n: int) -> bool:
        ev = acks.expect(n)
        log.log("ue_send", seq=n, kind=int(env.msg_type))
        conn.send(env)
        if ev.wait(ack_timeout):
            return True
        ev = acks.expect(n)          # one retry, same seq (idempotent delta)
        log.log("ue_retry", seq=n)
        conn.send(env)
        if ev.wait(ack_timeout):
            return True
        acks.forget(n)
        return False

    try:
        n = next(seq)
        if not send_acked(wire.hello(node_id, "ue", n), n):
            report.error = "hello not acknowledged"
            log.log("ue_error", reason=report.error)
            return report
        start = clock.now()
        for item in script:
            clock.sleep_until(start + item.at_s)
            n = next(seq)
            if item.kind == "topology":
                env = wire.topology_report(list(item.branches), n, list(item.buses))
            elif item.kind == "forecast":
                env = wire.forecast_report(item.forecast or {}, n)
            else:
                raise ValueError(f"unknown script item kind {item.kind!r}")
            if send_acked(env, n):
                report.delivered.append(n)
            else:
                report.failed.append(n)
                log.log("ue_unacked", seq=n)
        log.log("ue_done", delivered=len(report.delivered), failed=len(report.failed))
        return report
    finally:
        conn.close()


# ----------------------------------------------------------------------
# Edge server

class EdgeNode:
    """Region aggregation point: UE-facing server plus a client link to the cloud."""

    def __init__(self, region: str, base_case: GridCase, store: FileStore,
                 cloud_addr: tuple[str, int], listen: tuple[str, int] = ("127.0.0.1", 0),
                 profile: LinkProfile | None = None, log: EventLog | None = None,
                 clock=None):
        self.region = region
        self.base = base_case
        self.view = base_case
        self.store = store
        self.cloud_addr = cloud_addr
        self.listen_addr = listen
        self.profile = profile or zero_impairment_profile()
        self.log = log or EventLog(f"edge-{region}")
        self.clock = clock or RealClock()
        self.emulator = LinkEmulator(self.profile)
        self.forecast: ForecastSpec | None = None
        self.runs: dict[str, str] = {}
        self._state_lock = threading.Lock()
        self._seq = itertools.count(1)
        self._compute = ThreadPoolExecutor(max_workers=1,
                                           thread_name_prefix=f"edge-{region}-compute")
        self._server: socket.socket | None = None
        self.cloud: ShapedConnection | None = None
        self.bound_addr: tuple[str, int] | None = None
        self._closing = False

    # -- lifecycle ------------------------------------------------------

    def start(self) -> tuple[str, int]:
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(self.listen_addr)
        self._server.listen(32)
        self.bound_addr = self._server.getsockname()

        sock = socket.create_connection(self.cloud_addr, timeout=10.0)
        self.cloud = ShapedConnection(sock, self.emulator, UP, self.clock,
                                      peer=format_addr(self.cloud_addr))
        self.cloud.send(wire.hello(f"edge-{self.region}", "edge",
                                   next(self._seq), region=self.region))
        threading.Thread(target=self._cloud_reader, daemon=True,
                         name=f"edge-{self.region}-cloud").start()
        threading.Thread(target=self._accept_loop, daemon=True,
                         name=f"edge-{self.region}-accept").start()
        self.log.log("edge_up", listen=format_addr(self.bound_addr),
                     cloud=format_addr(self.cloud_addr))
        return self.bound_addr

    def close(self) -> None:
        self._closing = True
        self._compute.shutdown(wait=True)
        if self._server:
            self._server.close()
        if self.cloud:
            self.cloud.close()

    # -- UE side --------------------------------------------------------

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, addr = self._server.accept()
            except OSError:
                return
            conn = ShapedConnection(sock, self.emulator, DOWN, self.clock,
                                    peer=format_addr(addr))
            threading.Thread(target=self._serve_ue, args=(conn,), daemon=True,
                             name=f"edge-{self.region}-ue").start()

    def _serve_ue(self, conn: ShapedConnection):
        for env in conn.envelopes():
            try:
                self._handle_ue(conn, env)
            except Exception as exc:            # malformed input must not kill the node
                conn.send(wire.error_msg("bad_report", str(exc)))
                self.log.log("edge_reject", reason=type(exc).__name__)

    def _handle_ue(self, conn: ShapedConnection, env: Envelope):
        obj = env.obj()
        seq = int(obj.get("seq", 0))
        if env.msg_type == MessageKind.HELLO:
            self.log.log("edge_recv", kind="hello", seq=seq, node=obj.get("node_id", "?"))
            conn.send(wire.ack(seq))
        elif env.msg_type == MessageKind.TOPOLOGY_REPORT:
            self.log.log("edge_recv", kind="topology", seq=seq)
            with self._state_lock:
                self.view = _apply_topology(self.view, obj)   # validates before commit
            for br in obj.get("branches", []):
                self.log.log("delta_applied", branch=int(br["id"]), status=br["status"])
            conn.send(wire.ack(seq))
        elif env.msg_type == MessageKind.FORECAST_REPORT:
            self.log.log("edge_recv", kind="forecast", seq=seq)
            spec = ForecastSpec.from_dict(obj["spec"])
            with self._state_lock:
                self.forecast = spec
            conn.send(wire.ack(seq))
        else:
            conn.send(wire.error_msg("unexpected_kind", f"msg_type {int(env.msg_type)}"))

    # -- cloud side -----------------------------------------------------

    def _cloud_reader(self):
        for env in self.cloud.envelopes():
            try:
                self._handle_cloud(env)
            except Exception as exc:
                self.cloud.send(wire.error_msg("edge_failure", str(exc), env.run_id))
                self.log.log("edge_error", reason=type(exc).__name__, detail=str(exc))

    def _handle_cloud(self, env: Envelope):
        if env.msg_type == MessageKind.RUN_OPEN:
            manifest = RunManifest.from_payload(env.obj())
            with self._state_lock:
                if manifest.run_id in self.runs:
                    self.cloud.send(wire.error_msg(
                        "duplicate_run", f"run {manifest.run_id} already processed",
                        env.run_id))
                    self.log.log("run_open_duplicate", run=manifest.run_id)
                    return
                self.runs[manifest.run_id] = "computing"
                snapshot = self.view
            self.log.log("run_open_recv", run=manifest.run_id, mode=manifest.mode)
            self._compute.submit(self._compute_run, manifest, snapshot)
        elif env.msg_type == MessageKind.RUN_RESULT:
            obj = env.obj()
            blob = self.store.get(obj["store_key"])
            parsed = json.loads(blob.decode())
            self.log.log("result_recv", run=env.run_id.hex(),
                         verdict=obj.get("verdict_summary", "?"),
                         bytes=len(blob), mode=parsed.get("mode", "?"))
            self.cloud.send(wire.ack(int(obj.get("seq", 0))))
        elif env.msg_type == MessageKind.RUN_CLOSE:
            with self._state_lock:
                self.runs.pop(env.obj().get("run_id", ""), None)
        elif env.msg_type == MessageKind.ACK:
            pass
        elif env.msg_type == MessageKind.ERROR:
            obj = env.obj()
            self.log.log("cloud_error", code=obj.get("code", "?"), text=obj.get("text", ""))

    def _compute_run(self, manifest: RunManifest, snapshot: GridCase):
        rid = manifest.run_id
        try:
            blob = pipeline.edge_topology_blob(snapshot, self.base, self.region)
            self.log.log("edge_compute_done", run=rid, artifact="partial_y")
            key = partial_key(rid, self.region)
            self.store.put(key, blob)
            self.log.log("store_put_done", run=rid, key=key)
            self.cloud.send(wire.partial_ready(self.region, key, next(self._seq),
                                               manifest.run_id_bytes))
            if manifest.mode == pipeline.MODE_DSA:
                with self._state_lock:
                    forecast = self.forecast
                sblob = pipeline.edge_scenarios_blob(snapshot, self.region,
                                                     manifest.dsa, forecast)
                self.log.log("edge_compute_done", run=rid, artifact="scenarios")
                skey = scenarios_key(rid, self.region)
                self.store.put(skey, sblob)
                self.log.log("store_put_done", run=rid, key=skey)
                self.cloud.send(wire.scenario_ready(self.region, skey, next(self._seq),
                                                    manifest.run_id_bytes))
            with self._state_lock:
                self.runs[rid] = "uploaded"
        except AlreadyExistsError as exc:
            self.cloud.send(wire.error_msg("upload_conflict", str(exc),
                                           manifest.run_id_bytes))
            self.log.log("upload_conflict", run=rid)
        except Exception as exc:
            self.cloud.send(wire.error_msg("compute_failure", str(exc),
                                           manifest.run_id_bytes))
            self.log.log("compute_failure", run=rid, detail=str(exc))


def _apply_topology(view: GridCase, obj: dict) -> GridCase:
    """Apply a topology report's absolute assignments; raises before mutating."""
    assignments = {int(br["id"]): str(br["status"]) for br in obj.get("branches", [])}
    loads = {int(b["id"]): (float(b["p_load"]), float(b["q_load"]))
             for b in obj.get("buses", [])}
    out = view
    if assignments:
        out = out.with_branch_status(assignments)
    if loads:
        out = out.with_bus_loads(loads)
    return out


# ----------------------------------------------------------------------
# Cloud coordinator

class CloudNode:
    """Opens runs, enforces the upload barrier, merges, simulates and replies."""

    def __init__(self, base_case: GridCase, store: FileStore,
                 listen: tuple[str, int] = ("127.0.0.1", 0),
                 profile: LinkProfile | None = None, log: EventLog | None = None,
                 clock=None, sim_workers: int = 4):
        self.base = base_case
        self.store = store
        self.listen_addr = listen
        self.profile = profile or zero_impairment_profile()
        self.log = log or EventLog("cloud")
        self.clock = clock or RealClock()
        self.emulator = LinkEmulator(self.profile)
        self.sim_workers = sim_workers
        self.edges: dict[str, ShapedConnection] = {}
        self.received: set[tuple[str, str, str]] = set()    # (run, region, artifact)
        self._acks = _AckTable()
        self._lock = threading.Lock()
        self._seq = itertools.count(1)
        self._server: socket.socket | None = None
        self.bound_addr: tuple[str, int] | None = None
        self._open_manifest: RunManifest | None = None
        self._run_open_sent: set[str] = set()
        self._closing = False

    def start(self) -> tuple[str, int]:
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(self.listen_addr)
        self._server.listen(32)
        self.bound_addr = self._server.getsockname()
        threading.Thread(target=self._accept_loop, daemon=True, name="cloud-accept").start()
        self.log.log("cloud_up", listen=format_addr(self.bound_addr))
        return self.bound_addr

    def close(self) -> None:
        self._closing = True
        if self._server:
            self._server.close()
        with self._lock:
            conns = list(self.edges.values())
        for c in conns:
            c.close()

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, addr = self._server.accept()
            except OSError:
                return
            conn = ShapedConnection(sock, self.emulator, DOWN, self.clock,
                                    peer=format_addr(addr))
            threading.Thread(target=self._serve_edge, args=(conn,), daemon=True,
                             name="cloud-edge").start()

    def _serve_edge(self, conn: ShapedConnection):
        for env in conn.envelopes():
            try:
                self._handle_edge(conn, env)
            except Exception as exc:
                conn.send(wire.error_msg("bad_message", str(exc)))
                self.log.log("cloud_reject", reason=type(exc).__name__)

    def _handle_edge(self, conn: ShapedConnection, env: Envelope):
        obj = env.obj()
        if env.msg_type == MessageKind.HELLO:
            region = obj.get("region")
            if obj.get("role") != "edge" or not region:
                conn.send(wire.error_msg("bad_hello", "expected role=edge with region"))
                return
            late_open = None
            with self._lock:
                self.edges[region] = conn
                m = self._open_manifest
                if (m and region in m.expected_regions
                        and region not in self._run_open_sent):
                    self._run_open_sent.add(region)
                    late_open = m
            self.log.log("hello", region=region)
            conn.send(wire.ack(int(obj.get("seq", 0))))
            if late_open:
                conn.send(wire.run_open(late_open.to_payload(), late_open.run_id_bytes))
        elif env.msg_type in (MessageKind.PARTIAL_READY, MessageKind.SCENARIO_READY):
            artifact = ("partial_y" if env.msg_type == MessageKind.PARTIAL_READY
                        else "scenarios")
            region = obj["region"]
            rid = env.run_id.hex()
            with self._lock:
                dup = (rid, region, artifact) in self.received
                if not dup:
                    self.received.add((rid, region, artifact))
            if dup:
                conn.send(wire.error_msg(
                    "duplicate_upload",
                    f"{artifact} for region {region} already received", env.run_id))
                self.log.log("duplicate_upload", run=rid, region=region,
                             artifact=artifact)
                return
            self.log.log("ready_recv", run=rid, region=region, artifact=artifact,
                         key=obj["store_key"])
            conn.send(wire.ack(int(obj.get("seq", 0))))
        elif env.msg_type == MessageKind.ACK:
            self._acks.resolve(int(obj["of"]))
        elif env.msg_type == MessageKind.ERROR:
            self.log.log("edge_error_recv", code=obj.get("code", "?"),
                         text=obj.get("text", ""))

    # -- run execution ----------------------------------------------------

    def _broadcast(self, regions, env: Envelope) -> None:
        with self._lock:
            targets = [(r, self.edges[r]) for r in regions if r in self.edges]
        for region, conn in targets:
            conn.send(env)

    def execute_run(self, manifest: RunManifest) -> int:
        """Drive one run to completion; returns the process exit code (0/2/3)."""
        rid = manifest.run_id
        self.log.log("run_open", run=rid, mode=manifest.mode,
                     regions=",".join(manifest.expected_regions))
        with self._lock:
            self._open_manifest = manifest
            self._run_open_sent = {r for r in manifest.expected_regions
                                   if r in self.edges}
        self._broadcast(self._run_open_sent,
                        wire.run_open(manifest.to_payload(), manifest.run_id_bytes))

        keys = [partial_key(rid, r) for r in manifest.expected_regions]
        if manifest.mode == pipeline.MODE_DSA:
            keys += [scenarios_key(rid, r) for r in manifest.expected_regions]
        waited = self.store.wait_for(keys, time.time() + manifest.deadline_s)
        if not waited.complete:
            missing_regions = sorted({k.split("/")[3] for k in waited.missing})
            self.log.log("run_aborted", run=rid, missing=",".join(missing_regions))
            self._broadcast(manifest.expected_regions, wire.error_msg(
                "barrier_timeout",
                f"missing regions: {','.join(missing_regions)}", manifest.run_id_bytes))
            return 3
        self.log.log("barrier_done", run=rid)

        try:
            if manifest.mode == pipeline.MODE_TOPOLOGY:
                blobs = {r: self.store.get(partial_key(rid, r))
                         for r in manifest.expected_regions}
                view, y = pipeline.cloud_merge(self.base, blobs)
                result = pipeline.topology_compute(view, y, manifest.fault,
                                                   manifest.sim_cfg)
                blob = pipeline.topology_result_blob(result)
                summary = result.verdict
            else:
                blobs = {r: self.store.get(partial_key(rid, r))
                         for r in manifest.expected_regions}
                view, y = pipeline.cloud_merge(self.base, blobs)
                region_sets = {}
                for r in manifest.expected_regions:
                    parsed = pipeline.parse_scenarios_blob(
                        self.store.get(scenarios_key(rid, r)))
                    region_sets[r] = (parsed["scenario_set"], parsed["load_bus_ids"])
                report = pipeline.dsa_compute(view, y, region_sets, manifest.fault,
                                              manifest.sim_cfg,
                                              max_workers=self.sim_workers)
                blob = pipeline.dsa_result_blob(report)
                summary = f"insecurity_probability={report.insecurity_probability!r}"
        except Exception as exc:
            self.log.log("run_failed", run=rid, reason=type(exc).__name__,
                         detail=str(exc))
            self._broadcast(manifest.expected_regions, wire.error_msg(
                "compute_failure", str(exc), manifest.run_id_bytes))
            return 2

        key = result_key(rid)
        self.store.put(key, blob)
        self.log.log("sim_done", run=rid)
        self.log.log("result_put", run=rid, key=key, summary=summary)

        pending = []
        with self._lock:
            targets = [(r, self.edges[r]) for r in manifest.expected_regions
                       if r in self.edges]
        for region, conn in targets:
            n = next(self._seq)
            ev = self._acks.expect(n)
            conn.send(wire.run_result(key, summary, n, manifest.run_id_bytes))
            self.log.log("result_sent", run=rid, region=region)
            pending.append((region, n, ev))
        deadline = time.time() + RESULT_ACK_TIMEOUT_S
        for region, n, ev in pending:
            if not ev.wait(max(0.0, deadline - time.time())):
                self.log.log("result_unacked", run=rid, region=region)
                self._acks.forget(n)
        self.log.log("run_complete", run=rid)
        return 0
