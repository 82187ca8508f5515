"""Sweep the eavesdropping probability and print sift fraction, QBER and key yield.

    python scripts/qber_sweep.py --n 100000 --steps 11
"""

import argparse
from fractions import Fraction

import numpy as np

from qkdtunnel.bb84 import ChannelModel, SessionParams, run_session


def expected_qber(p_eve: float, noise: float) -> float:
    # intercept-resend flips a matched-basis bit with probability 1/4
    q = float(Fraction(1, 4)) * p_eve
    return q + noise - 2 * q * noise


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=11)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--threshold", type=float, default=0.11)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    print(f"{'p_eve':>6} {'sift':>6} {'qber':>7} {'expect':>7} {'status':>12} {'keys':>6}")
    for p in np.linspace(0.0, 1.0, args.steps):
        alice, _ = run_session(SessionParams(
            n=args.n,
            channel=ChannelModel(args.noise, float(p), args.seed),
            qber_abort_threshold=args.threshold,
            seed=args.seed,
        ))
        print(f"{p:6.2f} {alice.sift_fraction:6.3f} {alice.qber_estimate:7.4f} "
              f"{expected_qber(p, args.noise):7.4f} {alice.status.value:>12} {len(alice.keys):6d}")


if __name__ == "__main__":
    main()
