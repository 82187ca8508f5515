"""Classical simulation of a BB84 prepare-and-measure link.

Qubits are not modelled as state vectors.  Each photon is a (bit, basis) pair
and measurement follows the textbook rules: measuring in the preparation
basis returns the prepared bit, measuring in the conjugate basis returns a
fair coin.  An intercept-resend eavesdropper measures in a random basis and
re-prepares her outcome in her own basis, which is enough to reproduce the
1/4 error rate on sifted bits.

The pipeline is ``transmit_and_measure -> sift -> estimate_qber -> reconcile
-> privacy_amplify``; :func:`run_session` chains them and slices the
amplified material into :class:`~qkdtunnel.keys.QkdKey` objects that are
identical at both ends.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InsufficientMaterial, InvalidArgument
from .keys import QkdKey, key_id_from_bytes
from .privacy import privacy_amplify


class Basis(enum.IntEnum):
    RECTILINEAR = 0
    DIAGONAL = 1

    @property
    def symbol(self) -> str:
        return "+" if self is Basis.RECTILINEAR else "×"

    @classmethod
    def parse(cls, text: str) -> "Basis":
        text = text.strip()
        if text == "+":
            return cls.RECTILINEAR
        if text in ("×", "x", "X"):
            return cls.DIAGONAL
        raise InvalidArgument(f"unknown basis symbol {text!r}")


_POLARIZATION = {
    (0, Basis.RECTILINEAR): "↑",
    (1, Basis.RECTILINEAR): "→",
    (0, Basis.DIAGONAL): "↗",
    (1, Basis.DIAGONAL): "↘",
}


def polarization(bit: int, basis: int) -> str:
    return _POLARIZATION[(int(bit), Basis(int(basis)))]


@dataclass(frozen=True)
class ChannelModel:
    noise_qber: float = 0.0
    eve_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_qber < 0.5:
            raise InvalidArgument("noise_qber must lie in [0, 0.5)")
        if not 0.0 <= self.eve_probability <= 1.0:
            raise InvalidArgument("eve_probability must lie in [0, 1]")


@dataclass(frozen=True)
class InjectedSequences:
    """Forced choices for reproducing a worked example exactly.

    Any field left as ``None`` is drawn from the channel RNG as usual.
    """

    alice_bits: Optional[Sequence[int]] = None
    alice_bases: Optional[Sequence[int]] = None
    bob_bases: Optional[Sequence[int]] = None
    eve_bases: Optional[Sequence[int]] = None


@dataclass
class QubitFrame:
    alice_bits: np.ndarray
    alice_bases: np.ndarray
    bob_bases: np.ndarray
    bob_results: np.ndarray
    eve_intercepted: np.ndarray

    @property
    def n(self) -> int:
        return len(self.alice_bits)


@dataclass
class SiftedBlock:
    positions: np.ndarray
    alice_bits: np.ndarray
    bob_bits: np.ndarray
    n_raw: int

    def __len__(self):
        return len(self.positions)


class SessionStatus(str, enum.Enum):
    OK = "ok"
    ABORTED_QBER = "aborted_qber"


@dataclass(frozen=True)
class SessionResult:
    status: SessionStatus
    qber_estimate: float
    disclosed_count: int
    keys: tuple[QkdKey, ...]
    sift_fraction: float = 0.0
    sifted_count: int = 0


@dataclass(frozen=True)
class SessionParams:
    n: int = 100_000
    channel: ChannelModel = field(default_factory=ChannelModel)
    key_size_bits: int = 256
    qber_abort_threshold: float = 0.11
    sample_fraction: float = 0.1
    seed: int = 0


def _forced(values, n, name):
    arr = np.asarray(values, dtype=np.uint8)
    if arr.shape != (n,):
        raise InvalidArgument(f"injected {name} must have length {n}")
    if arr.max(initial=0) > 1:
        raise InvalidArgument(f"injected {name} must be 0/1 valued")
    return arr


def transmit_and_measure(
    n: int, channel: ChannelModel, injected: Optional[InjectedSequences] = None
) -> QubitFrame:
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    rng = np.random.default_rng(channel.seed)
    # Draw every random stream up front so injection never shifts the others.
    alice_bits = rng.integers(0, 2, n, dtype=np.uint8)
    alice_bases = rng.integers(0, 2, n, dtype=np.uint8)
    bob_bases = rng.integers(0, 2, n, dtype=np.uint8)
    eve_bases = rng.integers(0, 2, n, dtype=np.uint8)
    intercepted = rng.random(n) < channel.eve_probability
    eve_coin = rng.integers(0, 2, n, dtype=np.uint8)
    bob_coin = rng.integers(0, 2, n, dtype=np.uint8)
    flips = rng.random(n) < channel.noise_qber

    if injected is not None:
        if injected.alice_bits is not None:
            alice_bits = _forced(injected.alice_bits, n, "alice_bits")
        if injected.alice_bases is not None:
            alice_bases = _forced(injected.alice_bases, n, "alice_bases")
        if injected.bob_bases is not None:
            bob_bases = _forced(injected.bob_bases, n, "bob_bases")
        if injected.eve_bases is not None:
            eve_bases = _forced(injected.eve_bases, n, "eve_bases")

    eve_results = np.where(eve_bases == alice_bases, alice_bits, eve_coin)
    wire_bits = np.where(intercepted, eve_results, alice_bits)
    wire_bases = np.where(intercepted, eve_bases, alice_bases)

    matched = bob_bases == wire_bases
    bob_results = np.where(matched, wire_bits ^ flips.astype(np.uint8), bob_coin)
    return QubitFrame(
        alice_bits=alice_bits,
        alice_bases=alice_bases,
        bob_bases=bob_bases,
        bob_results=bob_results.astype(np.uint8),
        eve_intercepted=intercepted,
    )


def sift(frame: QubitFrame) -> SiftedBlock:
    positions = np.flatnonzero(frame.alice_bases == frame.bob_bases)
    return SiftedBlock(
        positions=positions,
        alice_bits=frame.alice_bits[positions],
        bob_bits=frame.bob_results[positions],
        n_raw=frame.n,
    )


def estimate_qber(block: SiftedBlock, sample_fraction: float, seed: int):
    """Disclose a uniform sample of the sifted block and count mismatches.

    Returns ``(qber_estimate, disclosed_positions)`` where the positions index
    the originating frame, sorted ascending.
    """
    if not 0.0 < sample_fraction <= 1.0:
        raise InvalidArgument("sample_fraction must lie in (0, 1]")
    if len(block) == 0:
        raise InvalidArgument("cannot estimate QBER on an empty block")
    # tolerance guards against e.g. 0.1 * 30 == 3.0000000000000004
    k = min(len(block), math.ceil(sample_fraction * len(block) - 1e-9))
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(block), size=k, replace=False))
    mismatches = int(np.count_nonzero(block.alice_bits[picked] != block.bob_bits[picked]))
    return mismatches / k, block.positions[picked]


def _kept_mask(block: SiftedBlock, disclosed) -> tuple[np.ndarray, int]:
    disclosed = np.unique(np.asarray(disclosed, dtype=np.int64))
    in_block = np.isin(disclosed, block.positions)
    if not in_block.all():
        raise InvalidArgument(
            f"disclosed position {int(disclosed[~in_block][0])} is not in the sifted block"
        )
    undisclosed = ~np.isin(block.positions, disclosed)
    agree = block.alice_bits == block.bob_bits
    discarded = int(np.count_nonzero(undisclosed & ~agree))
    return undisclosed & agree, len(disclosed) + discarded


def reconcile(block: SiftedBlock, disclosed) -> tuple[np.ndarray, int]:
    """Idealised error correction using the simulator's ground truth.

    Disclosed positions are dropped, and every undisclosed mismatch is
    discarded and charged as one leaked parity bit.
    """
    mask, leaked = _kept_mask(block, disclosed)
    return block.alice_bits[mask], leaked


def _bob_reconciled(block: SiftedBlock, disclosed) -> np.ndarray:
    mask, _ = _kept_mask(block, disclosed)
    return block.bob_bits[mask]


def run_session(
    params: SessionParams, injected: Optional[InjectedSequences] = None
) -> tuple[SessionResult, SessionResult]:
    """Run the whole link once and return Alice's and Bob's results."""
    ks = params.key_size_bits
    if ks < 64 or ks % 8:
        raise InvalidArgument("key_size_bits must be a multiple of 8 and at least 64")
    sample_seed, amp_seed, id_seed = (
        int(s.generate_state(1, dtype=np.uint64)[0])
        for s in np.random.SeedSequence(params.seed).spawn(3)
    )

    frame = transmit_and_measure(params.n, params.channel, injected)
    block = sift(frame)
    sift_fraction = len(block) / frame.n
    if len(block) == 0:
        empty = SessionResult(SessionStatus.OK, 0.0, 0, (), sift_fraction, 0)
        return empty, empty

    qber, disclosed = estimate_qber(block, params.sample_fraction, sample_seed)
    if qber > params.qber_abort_threshold:
        aborted = SessionResult(
            SessionStatus.ABORTED_QBER, qber, len(disclosed), (), sift_fraction, len(block)
        )
        return aborted, aborted

    alice_bits, leaked = reconcile(block, disclosed)
    bob_bits = _bob_reconciled(block, disclosed)
    try:
        alice_material = privacy_amplify(alice_bits, leaked, amp_seed)
        bob_material = privacy_amplify(bob_bits, leaked, amp_seed)
    except InsufficientMaterial:
        alice_material = bob_material = b""

    id_rng = np.random.default_rng(id_seed)
    size = ks // 8
    results = []
    count = len(alice_material) // size
    key_ids = [key_id_from_bytes(id_rng.bytes(16)) for _ in range(count)]
    for material in (alice_material, bob_material):
        keys = tuple(
            QkdKey(kid, material[i * size : (i + 1) * size]) for i, kid in enumerate(key_ids)
        )
        results.append(
            SessionResult(SessionStatus.OK, qber, len(disclosed), keys, sift_fraction, len(block))
        )
    return results[0], results[1]


def parse_fixture(lines: Iterable[str]) -> InjectedSequences:
    """Read ``index,alice_bit,alice_basis,bob_basis`` records (index is 1-based)."""
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise InvalidArgument(f"fixture line {lineno}: expected 4 fields")
        idx, bit, a_basis, b_basis = parts
        rows.append((int(idx), int(bit), Basis.parse(a_basis), Basis.parse(b_basis)))
    rows.sort()
    if [r[0] for r in rows] != list(range(1, len(rows) + 1)):
        raise InvalidArgument("fixture indices must be 1..n without gaps")
    return InjectedSequences(
        alice_bits=[r[1] for r in rows],
        alice_bases=[int(r[2]) for r in rows],
        bob_bases=[int(r[3]) for r in rows],
    )


def load_fixture(path: str | os.PathLike) -> InjectedSequences:
    with open(path, encoding="utf-8") as fh:
        return parse_fixture(fh)
