"""Bring up the loopback topology, push traffic through it, print the run report.

    python scripts/tunnel_demo.py --mode psk_tunnel --connections 20 --bytes 65536
    python scripts/tunnel_demo.py --mode otp --connections 4 --bytes 2000
"""

import argparse
import logging
import sys
import time

from qkdtunnel.config import load_config
from qkdtunnel.harness import EXIT_OK, EXIT_TRAFFIC_FAILURE, StartupError, Topology, run_traffic


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-c", "--config", default=None)
    ap.add_argument("--mode", choices=("psk_tunnel", "otp"), default=None)
    ap.add_argument("--n", type=int, default=None, help="qubits sent over the link")
    ap.add_argument("--connections", type=int, default=10)
    ap.add_argument("--bytes", type=int, default=64 * 1024)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.n:
        cfg.link.n = args.n

    t0 = time.perf_counter()
    try:
        topo = Topology(cfg).start()
    except StartupError as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return exc.exit_code
    t1 = time.perf_counter()
    try:
        rep = run_traffic(topo, args.connections, args.bytes, args.seed)
    finally:
        topo.stop()
    t2 = time.perf_counter()

    print(rep.to_text())
    print(f"startup_seconds              {t1 - t0:.3f}")
    print(f"traffic_seconds              {t2 - t1:.3f}")
    return EXIT_TRAFFIC_FAILURE if rep.connections_failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
