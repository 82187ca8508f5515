"""Key management entity: per-SAE-pair key stores fed by the quantum link.

The KME keeps one :class:`Association` per (local SAE, peer SAE) pair.  Keys
arrive from the link via :meth:`KeyManagementEntity.store_key_pair` and leave
through the two delivery calls of the REST API:

* ``enc_keys`` - the master SAE asks for fresh keys shared with a slave SAE;
  entries go ``available -> reserved``.
* ``dec_keys`` - the slave SAE fetches the same keys by key_ID;
  entries go ``available -> consumed``.

Both KMEs of a pair receive identical feeds and do not talk to each other, so
reservation state is local.  All mutation of one association happens under
that association's lock.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    BadRequest,
    InvalidArgument,
    InvalidKeySize,
    KeysExhausted,
    NotFound,
    Unauthorized,
    UnknownKey,
)
from .keys import QkdKey

log = logging.getLogger(__name__)

MAX_SAE_ID_BYTES = 256


def validate_sae_id(sae_id: str) -> str:
    if not isinstance(sae_id, str) or not sae_id:
        raise InvalidArgument("SAE ID must be a non-empty string")
    if len(sae_id.encode("utf-8")) > MAX_SAE_ID_BYTES:
        raise InvalidArgument("SAE ID longer than 256 bytes")
    if any(c.isspace() for c in sae_id):
        raise InvalidArgument("SAE ID must not contain whitespace")
    return sae_id


class KeyState(str, enum.Enum):
    AVAILABLE = "available"
    RESERVED = "reserved"
    CONSUMED = "consumed"


@dataclass
class KeyPoolEntry:
    key: QkdKey
    state: KeyState = KeyState.AVAILABLE
    created_at: float = field(default_factory=time.time)


@dataclass(frozen=True)
class KmeStatus:
    source_KME_ID: str
    target_KME_ID: str
    master_SAE_ID: str
    slave_SAE_ID: str
    key_size: int
    stored_key_count: int
    max_key_count: int
    max_key_per_request: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


class Association:
    def __init__(self, local_sae: str, peer_sae: str):
        self.local_sae = local_sae
        self.peer_sae = peer_sae
        self.entries: dict[str, KeyPoolEntry] = {}
        # insertion-ordered set of available key_IDs (FIFO, O(1) removal)
        self.available: OrderedDict[str, None] = OrderedDict()
        # the SAE that first asked for enc_keys; the other side may only decrypt
        self.master: Optional[str] = None
        self.lock = threading.Lock()

    def available_count(self) -> int:
        return len(self.available)


class KeyManagementEntity:
    def __init__(
        self,
        kme_id: str,
        local_sae: str,
        key_size_bits: int = 256,
        *,
        peer_kme_id: str = "",
        max_key_count: int = 100_000,
        max_keys_per_request: int = 1024,
        tokens: Optional[dict[str, str]] = None,
        journal_path: Optional[str] = None,
    ):
        self.kme_id = kme_id
        self.peer_kme_id = peer_kme_id
        self.local_sae = validate_sae_id(local_sae)
        self.key_size_bits = key_size_bits
        self.max_key_count = max_key_count
        self.max_keys_per_request = max_keys_per_request
        self.tokens = dict(tokens or {})
        self._assocs: dict[tuple[str, str], Association] = {}
        self._assocs_lock = threading.Lock()
        self._journal_lock = threading.Lock()
        self.journal_path = journal_path
        self._journal = None
        if journal_path:
            self._replay_journal(journal_path)
            self._journal = open(journal_path, "a", encoding="utf-8")

    # -- plumbing -----------------------------------------------------------

    def close(self):
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    def authenticate(self, token: Optional[str]) -> str:
        try:
            return self.tokens[token]
        except KeyError:
            raise Unauthorized("missing or unknown bearer token") from None

    def _assoc(self, local: str, peer: str, create: bool = False) -> Association:
        with self._assocs_lock:
            assoc = self._assocs.get((local, peer))
            if assoc is None:
                if not create:
                    raise NotFound(f"no key association between {local} and {peer}")
                assoc = self._assocs[(local, peer)] = Association(local, peer)
            return assoc

    def _log(self, record: dict):
        if self._journal is None:
            return
        with self._journal_lock:
            self._journal.write(json.dumps(record, separators=(",", ":")) + "\n")
            self._journal.flush()

    def _replay_journal(self, path: str):
        try:
            fh = open(path, encoding="utf-8")
        except FileNotFoundError:
            return
        with fh:
            for line in fh:
                rec = json.loads(line)
                assoc = self._assoc(rec["local"], rec["peer"], create=True)
                if rec["op"] == "store":
                    key = QkdKey(rec["key_ID"], base64.b64decode(rec["key"]))
                    assoc.entries[key.key_ID] = KeyPoolEntry(key, created_at=rec["t"])
                    assoc.available[key.key_ID] = None
                elif rec["op"] == "state":
                    entry = assoc.entries[rec["key_ID"]]
                    entry.state = KeyState(rec["state"])
                    if entry.state is not KeyState.AVAILABLE:
                        del assoc.available[rec["key_ID"]]
                elif rec["op"] == "master":
                    assoc.master = rec["sae"]
        log.info("%s: replayed journal %s", self.kme_id, path)

    # -- quantum-layer feed ---------------------------------------------------

    def store_key_pair(self, keys, peer_sae: str, local_sae: Optional[str] = None) -> int:
        """Append link keys for the (local, peer) association; returns how many fit."""
        local = validate_sae_id(local_sae or self.local_sae)
        peer = validate_sae_id(peer_sae)
        size = self.key_size_bits // 8
        keys = list(keys)
        for k in keys:
            if len(k.key) != size:
                raise InvalidKeySize(
                    f"key {k.key_ID} is {len(k.key) * 8} bits, association uses {self.key_size_bits}"
                )
        assoc = self._assoc(local, peer, create=True)
        accepted = 0
        with assoc.lock:
            for k in keys:
                if assoc.available_count() >= self.max_key_count:
                    break
                if k.key_ID in assoc.entries:
                    continue
                entry = KeyPoolEntry(k)
                assoc.entries[k.key_ID] = entry
                assoc.available[k.key_ID] = None
                self._log({"op": "store", "local": local, "peer": peer, "t": entry.created_at,
                           **k.to_json()})
                accepted += 1
        if accepted < len(keys):
            log.warning("%s: pool full, rejected %d keys", self.kme_id, len(keys) - accepted)
        return accepted

    # -- delivery API ---------------------------------------------------------

    def get_enc_keys(self, caller: str, slave_sae: str, number: int = 1,
                     size: Optional[int] = None) -> list[QkdKey]:
        if not isinstance(number, int) or number < 1:
            raise BadRequest("number must be a positive integer")
        if number > self.max_keys_per_request:
            raise BadRequest(f"number exceeds max_key_per_request={self.max_keys_per_request}")
        if size is not None and size != self.key_size_bits:
            raise BadRequest(f"size must be {self.key_size_bits}")
        assoc = self._assoc(caller, slave_sae)
        with assoc.lock:
            if assoc.master is None:
                assoc.master = caller
                self._log({"op": "master", "local": caller, "peer": slave_sae, "sae": caller})
            elif assoc.master != caller:
                raise BadRequest(f"{caller} is the slave of this association")
            if assoc.available_count() < number:
                raise KeysExhausted(
                    f"keys exhausted: {assoc.available_count()} available, {number} requested"
                )
            out = []
            for _ in range(number):
                kid, _ = assoc.available.popitem(last=False)
                entry = assoc.entries[kid]
                entry.state = KeyState.RESERVED
                self._log({"op": "state", "local": caller, "peer": slave_sae,
                           "key_ID": kid, "state": "reserved"})
                out.append(entry.key)
            return out

    def get_dec_keys(self, caller: str, master_sae: str, key_ids) -> list[QkdKey]:
        key_ids = list(key_ids)
        if not key_ids:
            raise BadRequest("key_IDs must be non-empty")
        if len(key_ids) > self.max_keys_per_request:
            raise BadRequest(f"more than max_key_per_request={self.max_keys_per_request} key_IDs")
        assoc = self._assoc(caller, master_sae)
        with assoc.lock:
            if assoc.master == caller:
                raise BadRequest(f"{caller} is the master of this association")
            seen = set()
            entries = []
            # validate everything before touching any state: all-or-nothing
            for kid in key_ids:
                entry = assoc.entries.get(kid)
                if entry is None or entry.state is not KeyState.AVAILABLE or kid in seen:
                    raise UnknownKey(f"key_ID {kid} unknown or already used", offending_key_id=kid)
                seen.add(kid)
                entries.append(entry)
            for entry in entries:
                entry.state = KeyState.CONSUMED
                del assoc.available[entry.key.key_ID]
                self._log({"op": "state", "local": caller, "peer": master_sae,
                           "key_ID": entry.key.key_ID, "state": "consumed"})
            return [e.key for e in entries]

    def get_status(self, caller: str, slave_sae: str) -> KmeStatus:
        assoc = self._assoc(caller, slave_sae)
        with assoc.lock:
            return KmeStatus(
                source_KME_ID=self.kme_id,
                target_KME_ID=self.peer_kme_id,
                master_SAE_ID=caller,
                slave_SAE_ID=slave_sae,
                key_size=self.key_size_bits,
                stored_key_count=assoc.available_count(),
                max_key_count=self.max_key_count,
                max_key_per_request=self.max_keys_per_request,
            )

    def entry_state(self, local: str, peer: str, key_id: str) -> KeyState:
        """Introspection for tests and the harness."""
        assoc = self._assoc(local, peer)
        with assoc.lock:
            return assoc.entries[key_id].state
