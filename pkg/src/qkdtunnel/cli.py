"""Command line entry point: ``qkdtunnel {up,traffic,report,down,demo,proxy,otp}``.

Exit codes: 0 success, 1 traffic failure, 2 startup failure, 3 QBER abort.
"""

from __future__ import annotations

import argparse
import asyncio
import functools
import json
import logging
import os
import signal
import sys
import threading

import requests

from .config import load_config
from .errors import QkdError
from .harness import (
    EXIT_OK,
    EXIT_STARTUP_FAILURE,
    EXIT_TRAFFIC_FAILURE,
    ControlServer,
    RunReport,
    StartupError,
    Topology,
    build_report,
    drive_connections,
    expected_otp_digests,
    report,
    run_traffic,
)
from .key_manager import KeyManager
from .kme_http import KmeClient
from .otp import OtpLedger, OtpServer, otp_encrypt, send_frames
from .tunnel import ClientProxy, ServerProxy

log = logging.getLogger("qkdtunnel")


def _hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _state_path(cfg) -> str:
    return os.path.join(cfg.run_dir, "state.json")


def _report_path(cfg) -> str:
    return os.path.join(cfg.run_dir, "report.json")


def _load_state(cfg) -> dict:
    try:
        with open(_state_path(cfg), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SystemExit(f"no running topology recorded in {cfg.run_dir}; run `qkdtunnel up` first")


# -- harness subcommands --------------------------------------------------------------


def cmd_up(args) -> int:
    cfg = load_config(args.config)
    topo = Topology(cfg)
    try:
        topo.start()
    except StartupError as exc:
        log.error("startup failed: %s", exc)
        return exc.exit_code
    done = threading.Event()
    control = ControlServer(topo, cfg.control_host, cfg.control_port, done.set).start()
    os.makedirs(cfg.run_dir, exist_ok=True)
    state = {
        "pid": os.getpid(),
        "control": list(control.address),
        "ingress": list(topo.ingress_address),
        "mode": cfg.mode,
        "chunk": cfg.otp.chunk,
        "kme": {k: s.base_url for k, s in topo.kme_servers.items()},
    }
    with open(_state_path(cfg), "w", encoding="utf-8") as fh:
        json.dump(state, fh, indent=2)
    print(json.dumps(state), flush=True)

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    control.stop()
    topo.stop()
    try:
        os.remove(_state_path(cfg))
    except FileNotFoundError:
        pass
    return EXIT_OK


def cmd_traffic(args) -> int:
    cfg = load_config(args.config)
    state = _load_state(cfg)
    control = "http://%s:%d" % tuple(state["control"])
    before = requests.get(f"{control}/stats", timeout=10).json()
    results = asyncio.run(drive_connections(
        tuple(state["ingress"]), state["mode"], args.connections, args.bytes, args.seed,
        args.concurrency))
    after = requests.get(f"{control}/stats", timeout=10).json()
    expected = None
    if state["mode"] == "otp":
        expected = expected_otp_digests(args.seed, args.connections, args.bytes, state["chunk"])
    rep = build_report(before, after, results, args.bytes, expected)
    with open(_report_path(cfg), "w", encoding="utf-8") as fh:
        fh.write(rep.to_json())
    print(report(rep, args.format))
    return EXIT_TRAFFIC_FAILURE if rep.connections_failed else EXIT_OK


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    try:
        with open(_report_path(cfg), encoding="utf-8") as fh:
            rep = RunReport.from_json(fh.read())
    except FileNotFoundError:
        print(f"no report in {cfg.run_dir}; run `qkdtunnel traffic` first", file=sys.stderr)
        return EXIT_TRAFFIC_FAILURE
    print(report(rep, args.format))
    return EXIT_OK


def cmd_down(args) -> int:
    cfg = load_config(args.config)
    if not os.path.exists(_state_path(cfg)):
        print("nothing running")
        return EXIT_OK
    state = _load_state(cfg)
    try:
        requests.post("http://%s:%d/shutdown" % tuple(state["control"]), timeout=10)
    except requests.RequestException as exc:
        print(f"control endpoint unreachable ({exc}); removing stale state", file=sys.stderr)
        os.remove(_state_path(cfg))
    return EXIT_OK


def cmd_demo(args) -> int:
    cfg = load_config(args.config)
    try:
        topo = Topology(cfg).start()
    except StartupError as exc:
        log.error("startup failed: %s", exc)
        return exc.exit_code
    try:
        rep = run_traffic(topo, args.connections, args.bytes, args.seed, args.concurrency)
    finally:
        topo.stop()
    os.makedirs(cfg.run_dir, exist_ok=True)
    with open(_report_path(cfg), "w", encoding="utf-8") as fh:
        fh.write(rep.to_json())
    print(report(rep, args.format))
    return EXIT_TRAFFIC_FAILURE if rep.connections_failed else EXIT_OK


# -- standalone components ----------------------------------------------------------------


def _key_manager(args) -> KeyManager:
    return KeyManager(KmeClient(args.kme_url, args.token), args.sae_id,
                      low_water=args.low_water, high_water=args.high_water)


async def _serve_forever(component):
    await component.start()
    log.info("%s listening on %s:%d", type(component).__name__, *component.address)
    try:
        await asyncio.Event().wait()
    finally:
        await component.stop()


def cmd_proxy(args) -> int:
    km = _key_manager(args)
    if args.role == "client":
        km.add_peer(args.peer_sae)
        km.start()
        proxy = ClientProxy(km, args.listen, args.peer)
    else:
        proxy = ServerProxy(km, args.listen, args.upstream)
    try:
        asyncio.run(_serve_forever(proxy))
    except KeyboardInterrupt:
        pass
    finally:
        km.stop()
    return EXIT_OK


def cmd_otp_send(args) -> int:
    km = _key_manager(args)
    km.add_peer(args.peer_sae)
    if args.file == "-":
        data = sys.stdin.buffer.read()
    else:
        with open(args.file, "rb") as fh:
            data = fh.read()
    chunk = args.chunk
    frames = [
        otp_encrypt(data[i : i + chunk], functools.partial(km.take_keys, args.peer_sae),
                    args.key_size // 8)
        for i in range(0, len(data), chunk)
    ] or [otp_encrypt(b"", functools.partial(km.take_keys, args.peer_sae), args.key_size // 8)]
    statuses = asyncio.run(send_frames(args.to, frames))
    bad = [s for s in statuses if s != 0]
    print(json.dumps({"frames": len(frames), "failed": [s.name for s in bad]}))
    return EXIT_TRAFFIC_FAILURE if bad else EXIT_OK


def cmd_otp_receive(args) -> int:
    km = _key_manager(args)
    ledger = OtpLedger(args.ledger)
    out = sys.stdout.buffer if args.out == "-" else open(args.out, "ab")

    def deliver(msg):
        out.write(msg)
        out.flush()

    server = OtpServer(functools.partial(km.resolve_keys, args.peer_sae), ledger, args.listen,
                       deliver=deliver)
    try:
        asyncio.run(_serve_forever(server))
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------


def _add_km_flags(p):
    p.add_argument("--kme-url", required=True, help="base URL of the local KME")
    p.add_argument("--token", required=True, help="bearer token for the local KME")
    p.add_argument("--sae-id", required=True, help="this endpoint's SAE ID (network address)")
    p.add_argument("--low-water", type=int, default=16)
    p.add_argument("--high-water", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdtunnel", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def harness_cmd(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default=None,
                       help="TOML config (default: $QKDTUNNEL_CONFIG or built-in defaults)")
        p.set_defaults(func=func)
        return p

    harness_cmd("up", cmd_up, "start the two-site topology and block until `down`")
    for name, func, help_text in (
        ("traffic", cmd_traffic, "drive scripted connections through a running topology"),
        ("demo", cmd_demo, "up + traffic + report + down in one process"),
    ):
        p = harness_cmd(name, func, help_text)
        p.add_argument("--connections", type=int, default=10)
        p.add_argument("--bytes", type=int, default=64 * 1024)
        p.add_argument("--seed", type=int, default=0, help="payload seed")
        p.add_argument("--concurrency", type=int, default=16)
        p.add_argument("--format", choices=("text", "json"), default="text")
    p = harness_cmd("report", cmd_report, "print the last traffic report")
    p.add_argument("--format", choices=("text", "json"), default="text")
    harness_cmd("down", cmd_down, "stop a topology started with `up`")

    p = sub.add_parser("proxy", help="run one tunnel proxy against an existing KME")
    p.add_argument("role", choices=("client", "server"))
    p.add_argument("--listen", type=_hostport, required=True)
    p.add_argument("--peer", type=_hostport, help="server proxy address (client role)")
    p.add_argument("--peer-sae", help="server SAE ID (client role)")
    p.add_argument("--upstream", type=_hostport, help="upstream target (server role)")
    _add_km_flags(p)
    p.set_defaults(func=cmd_proxy)

    otp = sub.add_parser("otp", help="one-time-pad send/receive").add_subparsers(
        dest="otp_command", required=True)
    p = otp.add_parser("send", help="encrypt FILE (or - for stdin) and send it")
    p.add_argument("file")
    p.add_argument("--to", type=_hostport, required=True)
    p.add_argument("--peer-sae", required=True, help="receiver SAE ID")
    p.add_argument("--key-size", type=int, default=256, help="key size in bits")
    p.add_argument("--chunk", type=int, default=65536)
    _add_km_flags(p)
    p.set_defaults(func=cmd_otp_send)
    p = otp.add_parser("receive", help="receive frames and append plaintext to --out")
    p.add_argument("--listen", type=_hostport, required=True)
    p.add_argument("--peer-sae", required=True, help="sender SAE ID")
    p.add_argument("--ledger", default=None, help="append-only key_ID ledger file")
    p.add_argument("--out", default="-")
    _add_km_flags(p)
    p.set_defaults(func=cmd_otp_receive)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "proxy":
        need = ("peer", "peer_sae") if args.role == "client" else ("upstream",)
        missing = [f"--{n.replace('_', '-')}" for n in need if getattr(args, n) is None]
        if missing:
            print(f"proxy {args.role} requires {', '.join(missing)}", file=sys.stderr)
            return EXIT_STARTUP_FAILURE
    try:
        return args.func(args)
    except QkdError as exc:
        log.error("%s", exc)
        return EXIT_STARTUP_FAILURE


if __name__ == "__main__":
    sys.exit(main())
