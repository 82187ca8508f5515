"""Two-site topology orchestration and scripted traffic.

``Topology.start`` brings components up in dependency order::

    BB84 session -> KME A, KME B (fed identical keys) -> key managers
      -> echo upstream -> server proxy -> client proxy

and refuses to open any proxy if the link aborted or produced no keys.
``Topology.stop`` tears down in reverse and is idempotent.
"""

from __future__ import annotations

import asyncio
import dataclasses
import functools
import hashlib
import json
import logging
import os
import random
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from .bb84 import ChannelModel, SessionParams, SessionStatus, run_session
from .config import TopologyConfig
from .key_manager import KeyManager
from .kme import KeyManagementEntity
from .kme_http import KmeClient, KmeHttpServer
from .otp import OtpIngress, OtpLedger, OtpServer, OtpStatus
from .tunnel import ClientProxy, EchoServer, LoopThread, ServerProxy

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_TRAFFIC_FAILURE = 1
EXIT_STARTUP_FAILURE = 2
EXIT_QBER_ABORT = 3


class StartupError(Exception):
    exit_code = EXIT_STARTUP_FAILURE


class QberAbort(StartupError):
    exit_code = EXIT_QBER_ABORT


@dataclass
class RunReport:
    sift_fraction: float
    qber_estimate: float
    keys_generated: int
    keys_consumed: int
    handshakes_ok: int
    handshakes_failed: int
    bytes_tunneled: int
    kme_calls_during_handshakes: int
    mode: str = "psk_tunnel"
    connections: int = 0
    connections_failed: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        return "\n".join([
            f"mode                         {self.mode}",
            f"sift_fraction                {self.sift_fraction:.3f}",
            f"qber_estimate                {self.qber_estimate:.4f}",
            f"keys_generated               {self.keys_generated}",
            f"keys_consumed                {self.keys_consumed}",
            f"handshakes_ok                {self.handshakes_ok}",
            f"handshakes_failed            {self.handshakes_failed}",
            f"bytes_tunneled               {self.bytes_tunneled}",
            f"kme_calls_during_handshakes  {self.kme_calls_during_handshakes}",
            f"connections                  {self.connections}",
            f"connections_failed           {self.connections_failed}",
        ])


def report(run_report: RunReport, fmt: str = "text") -> str:
    if fmt == "json":
        return run_report.to_json()
    if fmt == "text":
        return run_report.to_text()
    raise ValueError(f"unknown report format {fmt!r}")


class DigestSink:
    """Records a SHA-256 digest of every message the OTP server delivers."""

    def __init__(self):
        self.digests: list[str] = []
        self.bytes = 0
        self._lock = threading.Lock()

    def __call__(self, msg: bytes):
        with self._lock:
            self.digests.append(hashlib.sha256(msg).hexdigest())
            self.bytes += len(msg)


class Topology:
    """A running two-site deployment on loopback."""

    def __init__(self, config: TopologyConfig):
        self.config = config.validate()
        self.session = None
        self.kmes: dict[str, KeyManagementEntity] = {}
        self.kme_servers: dict[str, KmeHttpServer] = {}
        self.km_a: Optional[KeyManager] = None
        self.km_b: Optional[KeyManager] = None
        self.loop: Optional[LoopThread] = None
        self.echo: Optional[EchoServer] = None
        self.client_proxy: Optional[ClientProxy] = None
        self.server_proxy: Optional[ServerProxy] = None
        self.otp_server: Optional[OtpServer] = None
        self.otp_ingress: Optional[OtpIngress] = None
        self.sink = DigestSink()
        self._stopped = False
        self._stop_lock = threading.Lock()

    # -- startup ------------------------------------------------------------------

    def start(self) -> "Topology":
        try:
            self._start()
        except Exception:
            self.stop()
            raise
        return self

    def _run_link(self):
        link = self.config.link
        params = SessionParams(
            n=link.n,
            channel=ChannelModel(link.noise_qber, link.eve_probability, link.channel_seed),
            key_size_bits=link.key_size_bits,
            qber_abort_threshold=link.qber_abort_threshold,
            sample_fraction=link.sample_fraction,
            seed=link.seed,
        )
        alice, bob = run_session(params)
        self.session = alice
        log.info("link: sift_fraction=%.4f qber=%.4f keys=%d status=%s",
                 alice.sift_fraction, alice.qber_estimate, len(alice.keys), alice.status.value)
        if alice.status is SessionStatus.ABORTED_QBER:
            raise QberAbort(
                f"aborted_qber: estimated QBER {alice.qber_estimate:.4f} exceeds "
                f"threshold {link.qber_abort_threshold}"
            )
        if not alice.keys:
            raise StartupError("link produced no keys (insufficient material)")
        return alice, bob

    def _start_kme(self, site, other, keys):
        cfg = self.config
        journal = None
        if cfg.kme.journal_dir:
            os.makedirs(cfg.kme.journal_dir, exist_ok=True)
            journal = os.path.join(cfg.kme.journal_dir, f"{site.kme_id}.journal")
        kme = KeyManagementEntity(
            site.kme_id, site.sae_id, cfg.link.key_size_bits,
            peer_kme_id=other.kme_id,
            max_key_count=cfg.kme.max_key_count,
            max_keys_per_request=cfg.kme.max_keys_per_request,
            tokens={site.token: site.sae_id},
            journal_path=journal,
        )
        kme.store_key_pair(keys, peer_sae=other.sae_id)
        try:
            server = KmeHttpServer(kme, site.kme_host, site.kme_port).start()
        except OSError as exc:
            raise StartupError(f"{site.kme_id}: cannot listen on {site.kme_port}: {exc}") from exc
        self.kmes[site.kme_id] = kme
        self.kme_servers[site.kme_id] = server
        return server

    def _start(self):
        cfg = self.config
        a, b = cfg.site_a, cfg.site_b
        alice, bob = self._run_link()

        srv_a = self._start_kme(a, b, alice.keys)
        srv_b = self._start_kme(b, a, bob.keys)
        counts = [
            KmeClient(srv_a.base_url, a.token).status(b.sae_id)["stored_key_count"],
            KmeClient(srv_b.base_url, b.token).status(a.sae_id)["stored_key_count"],
        ]
        if min(counts) < 1 or counts[0] != counts[1]:
            raise StartupError(f"KME stores disagree or are empty: {counts}")

        pool = cfg.pool
        self.km_a = KeyManager(KmeClient(srv_a.base_url, a.token), a.sae_id,
                               low_water=pool.low_water, high_water=pool.high_water,
                               fallback_timeout=pool.fallback_timeout,
                               batch_limit=cfg.kme.max_keys_per_request)
        self.km_a.add_peer(b.sae_id)
        self.km_b = KeyManager(KmeClient(srv_b.base_url, b.token), b.sae_id,
                               batch_limit=cfg.kme.max_keys_per_request)
        self.km_a.prefetch(self.km_a.pool(b.sae_id))
        self.km_a.start()

        self.loop = LoopThread()
        t = cfg.tunnel
        try:
            if cfg.mode == "psk_tunnel":
                self.loop.run(self._start_psk(t))
            else:
                self.loop.run(self._start_otp(t))
        except OSError as exc:
            raise StartupError(f"cannot bind proxy port: {exc}") from exc

    async def _start_psk(self, t):
        cfg = self.config
        if t.upstream_host:
            upstream = (t.upstream_host, t.upstream_port)
        else:
            self.echo = await EchoServer((t.host, t.echo_port)).start()
            upstream = self.echo.address
        self.server_proxy = await ServerProxy(
            self.km_b, (t.host, t.server_port), upstream, server_sae=cfg.site_b.sae_id
        ).start()
        self.client_proxy = await ClientProxy(
            self.km_a, (t.host, t.client_port), self.server_proxy.address,
            client_addr=cfg.site_a.sae_id,
        ).start()

    async def _start_otp(self, t):
        cfg = self.config
        ledger = OtpLedger(cfg.otp.ledger_path or None)
        self.otp_server = await OtpServer(
            functools.partial(self.km_b.resolve_keys, cfg.site_a.sae_id), ledger,
            (t.host, t.server_port), deliver=self.sink,
        ).start()
        self.otp_ingress = await OtpIngress(
            functools.partial(self.km_a.take_keys, cfg.site_b.sae_id),
            cfg.link.key_size_bits // 8, self.otp_server.address,
            (t.host, t.client_port), chunk=cfg.otp.chunk,
        ).start()

    # -- introspection ----------------------------------------------------------------

    @property
    def ingress_address(self) -> tuple[str, int]:
        front = self.client_proxy or self.otp_ingress
        return tuple(front.address)

    def stats(self) -> dict:
        s = self.session
        pool = self.km_a.pool_status() if self.km_a else {}
        out = {
            "mode": self.config.mode,
            "ingress": list(self.ingress_address) if self.loop else None,
            "sift_fraction": s.sift_fraction if s else 0.0,
            "qber_estimate": s.qber_estimate if s else 0.0,
            "keys_generated": len(s.keys) if s else 0,
            "pool": pool,
            "kme_status": {
                kid: self._local_status(kid) for kid in self.kmes
            },
        }
        if self.client_proxy:
            out["client_proxy"] = self.client_proxy.stats.snapshot()
            out["server_proxy"] = self.server_proxy.stats.snapshot()
        if self.otp_ingress:
            out["otp"] = {
                "frames_ok": self.otp_ingress.frames_ok,
                "frames_failed": self.otp_ingress.frames_failed,
                "keys_used": self.otp_ingress.keys_used,
                "bytes_sent": self.otp_ingress.bytes_sent,
                "server_counts": dict(self.otp_server.counts),
                "digests": list(self.sink.digests),
            }
        return out

    def _local_status(self, kme_id):
        kme = self.kmes[kme_id]
        a, b = self.config.site_a, self.config.site_b
        local, peer = (a.sae_id, b.sae_id) if kme.local_sae == a.sae_id else (b.sae_id, a.sae_id)
        return kme.get_status(local, peer).stored_key_count

    # -- shutdown -----------------------------------------------------------------------

    def stop(self):
        with self._stop_lock:
            if self._stopped:
                return
            self._stopped = True
        if self.loop is not None:
            for comp in (self.client_proxy, self.otp_ingress, self.server_proxy,
                         self.otp_server, self.echo):
                if comp is not None:
                    try:
                        self.loop.run(comp.stop(), timeout=10)
                    except Exception:  # pragma: no cover - best effort
                        log.exception("stopping %s failed", type(comp).__name__)
            self.loop.close()
        for km in (self.km_a, self.km_b):
            if km is not None:
                km.stop()
        for server in self.kme_servers.values():
            server.stop()
        for kme in self.kmes.values():
            kme.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run_topology(config: TopologyConfig) -> Topology:
    return Topology(config).start()


# -- traffic -------------------------------------------------------------------------------


def payload_for(seed: int, index: int, nbytes: int) -> bytes:
    return random.Random(f"{seed}:{index}").randbytes(nbytes)


async def _echo_once(address, payload: bytes) -> bool:
    try:
        reader, writer = await asyncio.open_connection(*address)
    except OSError:
        return False
    try:
        async def send():
            view = memoryview(payload)
            for i in range(0, len(view), 65536):
                writer.write(view[i : i + 65536])
                await writer.drain()
            writer.write_eof()

        sender = asyncio.ensure_future(send())
        received = await reader.read(-1)
        await sender
        return received == payload
    except (OSError, asyncio.IncompleteReadError):
        return False
    finally:
        writer.close()


async def _otp_once(address, payload: bytes) -> bool:
    try:
        reader, writer = await asyncio.open_connection(*address)
    except OSError:
        return False
    try:
        writer.write(payload)
        await writer.drain()
        writer.write_eof()
        status = await reader.read(-1)
        return status == bytes([OtpStatus.OK])
    except OSError:
        return False
    finally:
        writer.close()


async def drive_connections(address, mode: str, connections: int, nbytes: int,
                            payload_seed: int, concurrency: int = 16) -> list[bool]:
    sem = asyncio.Semaphore(concurrency)
    once = _echo_once if mode == "psk_tunnel" else _otp_once

    async def one(i):
        async with sem:
            return await once(address, payload_for(payload_seed, i, nbytes))

    return list(await asyncio.gather(*(one(i) for i in range(connections))))


def expected_otp_digests(seed: int, connections: int, nbytes: int, chunk: int) -> list[str]:
    out = []
    for i in range(connections):
        p = payload_for(seed, i, nbytes)
        out.extend(hashlib.sha256(p[j : j + chunk]).hexdigest() for j in range(0, len(p), chunk))
    return out


def build_report(before: dict, after: dict, results: list[bool], nbytes: int,
                 expected_digests: Optional[list[str]] = None) -> RunReport:
    mode = after["mode"]
    ok = sum(results)
    if mode == "psk_tunnel":
        hs_ok = after["client_proxy"]["handshakes_ok"] - before["client_proxy"]["handshakes_ok"]
        hs_failed = (after["client_proxy"]["handshakes_failed"]
                     - before["client_proxy"]["handshakes_failed"])
        tunneled = 2 * nbytes * ok
    else:
        hs_ok = after["otp"]["frames_ok"] - before["otp"]["frames_ok"]
        hs_failed = after["otp"]["frames_failed"] - before["otp"]["frames_failed"]
        delivered = after["otp"]["digests"][len(before["otp"]["digests"]):]
        if expected_digests is not None and sorted(delivered) != sorted(expected_digests):
            ok = 0
        tunneled = nbytes * ok
    return RunReport(
        sift_fraction=after["sift_fraction"],
        qber_estimate=after["qber_estimate"],
        keys_generated=after["keys_generated"],
        keys_consumed=after["pool"]["consumed"] - before["pool"]["consumed"],
        handshakes_ok=hs_ok,
        handshakes_failed=hs_failed,
        bytes_tunneled=tunneled,
        kme_calls_during_handshakes=after["pool"]["kme_calls"] - before["pool"]["kme_calls"],
        mode=mode,
        connections=len(results),
        connections_failed=len(results) - ok,
    )


def run_traffic(handle: Topology, connections: int, bytes_per_connection: int,
                payload_seed: int = 0, concurrency: int = 16) -> RunReport:
    """Drive scripted connections through an in-process topology."""
    before = handle.stats()
    results = handle.loop.run(drive_connections(
        handle.ingress_address, handle.config.mode, connections, bytes_per_connection,
        payload_seed, concurrency))
    after = handle.stats()
    expected = None
    if handle.config.mode == "otp":
        expected = expected_otp_digests(payload_seed, connections, bytes_per_connection,
                                        handle.config.otp.chunk)
    return build_report(before, after, results, bytes_per_connection, expected)


# -- control endpoint (for the multi-process CLI) ---------------------------------------------


class ControlServer:
    """Tiny HTTP endpoint exposing ``GET /stats`` and ``POST /shutdown``."""

    def __init__(self, topology: Topology, host: str, port: int, on_shutdown: Callable[[], None]):
        topo = topology

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, code, body):
                raw = json.dumps(body).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def do_GET(self):
                if self.path == "/stats":
                    self._reply(200, topo.stats())
                else:
                    self._reply(404, {"message": "not found"})

            def do_POST(self):
                if self.path == "/shutdown":
                    self._reply(200, {"message": "shutting down"})
                    on_shutdown()
                else:
                    self._reply(404, {"message": "not found"})

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.httpd.daemon_threads = True
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def address(self):
        return self.httpd.server_address[:2]

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
