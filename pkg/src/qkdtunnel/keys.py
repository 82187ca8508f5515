"""The (key_ID, key) pair that every layer above the quantum link trades in."""

from __future__ import annotations

import base64
import uuid
from dataclasses import dataclass


@dataclass(frozen=True)
class QkdKey:
    key_ID: str
    key: bytes

    def __post_init__(self):
        # normalise to canonical lowercase UUID text; raises ValueError otherwise
        object.__setattr__(self, "key_ID", str(uuid.UUID(self.key_ID)))

    def to_json(self) -> dict:
        return {"key_ID": self.key_ID, "key": base64.b64encode(self.key).decode("ascii")}

    @classmethod
    def from_json(cls, obj: dict) -> "QkdKey":
        return cls(obj["key_ID"], base64.b64decode(obj["key"], validate=True))

    def __repr__(self):
        # never print key material
        return f"QkdKey(key_ID={self.key_ID!r}, len={len(self.key)})"


def key_id_to_bytes(key_id: str) -> bytes:
    return uuid.UUID(key_id).bytes


def key_id_from_bytes(raw: bytes) -> str:
    return str(uuid.UUID(bytes=bytes(raw)))


def random_keys(count: int, size_bytes: int, rng=None) -> list[QkdKey]:
    """Keys from a classical RNG, for feeding KMEs in tests without running the link.

    ``rng`` is a ``numpy.random.Generator``; ``None`` uses ``os.urandom``.
    """
    import os

    out = []
    for _ in range(count):
        if rng is None:
            kid, material = os.urandom(16), os.urandom(size_bytes)
        else:
            kid, material = rng.bytes(16), rng.bytes(size_bytes)
        out.append(QkdKey(key_id_from_bytes(kid), material))
    return out
