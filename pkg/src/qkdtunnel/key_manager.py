"""Host-side key manager: prefetch pool plus both halves of PSK negotiation.

Client side::

    hint (server SAE address) --select_psk--> (PskIdentity, psk)

pops the oldest prefetched key for that peer, so a warm pool answers without
touching the KME.  Server side::

    PskIdentity JSON --resolve_psk--> psk

asks the local KME for exactly that key_ID on behalf of ``clientId``.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .errors import BadIdentity, KeysExhausted, KmeError, KmeTransportError, NoKeysAvailable
from .keys import QkdKey
from .kme import validate_sae_id

log = logging.getLogger(__name__)

DEFAULT_LOW_WATER = 16
DEFAULT_HIGH_WATER = 64
DEFAULT_FALLBACK_TIMEOUT = 2.0


@dataclass(frozen=True)
class PskIdentity:
    keyId: str
    clientId: str

    def to_json(self) -> str:
        return json.dumps({"keyId": self.keyId, "clientId": self.clientId},
                          separators=(",", ":"), ensure_ascii=False)

    def to_bytes(self) -> bytes:
        return self.to_json().encode("utf-8")

    @classmethod
    def parse(cls, raw) -> "PskIdentity":
        """Strict parse: a JSON object with exactly ``keyId`` and ``clientId``."""
        if isinstance(raw, (bytes, bytearray)):
            try:
                raw = bytes(raw).decode("utf-8")
            except UnicodeDecodeError:
                raise BadIdentity("identity is not UTF-8") from None

        def no_duplicates(pairs):
            keys = [k for k, _ in pairs]
            if len(keys) != len(set(keys)):
                raise BadIdentity("duplicate member in identity")
            return dict(pairs)

        try:
            obj = json.loads(raw, object_pairs_hook=no_duplicates)
        except ValueError as exc:
            raise BadIdentity(f"identity is not JSON: {exc}") from None
        if not isinstance(obj, dict) or set(obj) != {"keyId", "clientId"}:
            raise BadIdentity("identity must have exactly the members keyId and clientId")
        key_id, client_id = obj["keyId"], obj["clientId"]
        if not (isinstance(key_id, str) and key_id and isinstance(client_id, str)):
            raise BadIdentity("keyId and clientId must be non-empty strings")
        try:
            validate_sae_id(client_id)
        except ValueError as exc:
            raise BadIdentity(str(exc)) from None
        return cls(key_id, client_id)


@dataclass
class KeyPool:
    peer_sae: str
    low_water: int = DEFAULT_LOW_WATER
    high_water: int = DEFAULT_HIGH_WATER
    entries: deque = field(default_factory=deque)
    kme_call_count: int = 0
    consumed_count: int = 0
    last_error: Optional[str] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    fetch_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if not 0 <= self.low_water <= self.high_water or self.high_water < 1:
            raise ValueError("need 0 <= low_water <= high_water and high_water >= 1")


class KeyManager:
    """Prefetching key manager for one local SAE.

    ``client`` is anything with ``enc_keys``/``dec_keys``/``status`` methods,
    i.e. :class:`~qkdtunnel.kme_http.KmeClient` or ``LocalKmeClient``.
    """

    def __init__(
        self,
        client,
        sae_id: str,
        *,
        low_water: int = DEFAULT_LOW_WATER,
        high_water: int = DEFAULT_HIGH_WATER,
        fallback_timeout: float = DEFAULT_FALLBACK_TIMEOUT,
        batch_limit: int = 1024,
        retry_interval: float = 0.5,
    ):
        self.client = client
        self.sae_id = validate_sae_id(sae_id)
        self.low_water = low_water
        self.high_water = high_water
        self.fallback_timeout = fallback_timeout
        self.batch_limit = batch_limit
        self.retry_interval = retry_interval
        self.pools: dict[str, KeyPool] = {}
        self.resolve_call_count = 0
        self._counter_lock = threading.Lock()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # -- pool management ------------------------------------------------------

    def add_peer(self, peer_sae: str, low_water=None, high_water=None) -> KeyPool:
        pool = KeyPool(
            validate_sae_id(peer_sae),
            self.low_water if low_water is None else low_water,
            self.high_water if high_water is None else high_water,
        )
        self.pools[peer_sae] = pool
        return pool

    def pool(self, peer_sae: str) -> KeyPool:
        try:
            return self.pools[peer_sae]
        except KeyError:
            raise NoKeysAvailable(f"no key pool configured for peer {peer_sae!r}") from None

    def _enc(self, pool: KeyPool, number: int, timeout=None) -> list[QkdKey]:
        with pool.lock:
            pool.kme_call_count += 1
        return self.client.enc_keys(pool.peer_sae, number, timeout=timeout)

    def _fill(self, pool: KeyPool, target: int, timeout=None) -> int:
        """Fetch up to ``target`` entries.  Caller holds ``pool.fetch_lock``."""
        fetched = 0
        while True:
            with pool.lock:
                need = min(target - len(pool.entries), self.batch_limit)
            if need <= 0:
                return fetched
            try:
                keys = self._enc(pool, need, timeout)
            except KeysExhausted:
                # top up with whatever the KME still has rather than starving
                with pool.lock:
                    pool.kme_call_count += 1
                available = int(self.client.status(pool.peer_sae)["stored_key_count"])
                if available <= 0:
                    if fetched == 0:
                        raise
                    return fetched
                keys = self._enc(pool, min(need, available), timeout)
            with pool.lock:
                pool.entries.extend(keys)
                pool.last_error = None
            fetched += len(keys)

    def prefetch(self, pool: KeyPool, timeout=None) -> int:
        """Refill to ``high_water`` if below ``low_water``; returns keys fetched."""
        with pool.fetch_lock:
            with pool.lock:
                if len(pool.entries) >= pool.low_water:
                    return 0
            try:
                return self._fill(pool, pool.high_water, timeout)
            except KeysExhausted as exc:
                with pool.lock:
                    pool.last_error = f"kme exhausted: {exc}"
                return 0
            except KmeTransportError as exc:
                with pool.lock:
                    pool.last_error = f"kme unreachable: {exc}"
                raise

    def _pop(self, pool: KeyPool, count: int) -> Optional[list[QkdKey]]:
        with pool.lock:
            if len(pool.entries) < count:
                return None
            out = [pool.entries.popleft() for _ in range(count)]
            pool.consumed_count += count
            low = len(pool.entries) < pool.low_water
        if low:
            self._wake.set()
        return out

    def take_keys(self, peer_sae: str, count: int) -> list[QkdKey]:
        """Dequeue ``count`` keys, fetching synchronously if the pool is short."""
        pool = self.pool(peer_sae)
        if count == 0:
            return []
        got = self._pop(pool, count)
        if got is not None:
            return got
        if not pool.fetch_lock.acquire(timeout=self.fallback_timeout):
            raise NoKeysAvailable(f"timed out waiting for keys for {peer_sae}")
        try:
            with pool.lock:
                target = max(pool.high_water, count)
            try:
                self._fill(pool, target, timeout=self.fallback_timeout)
            except (KmeError, KmeTransportError) as exc:
                with pool.lock:
                    pool.last_error = str(exc)
        finally:
            pool.fetch_lock.release()
        got = self._pop(pool, count)
        if got is None:
            raise NoKeysAvailable(f"pool for {peer_sae} cannot supply {count} keys")
        return got

    # -- negotiation ------------------------------------------------------------

    def select_psk(self, hint: str, client_addr: Optional[str] = None):
        """Client side: choose the oldest pooled key for the server named by ``hint``."""
        (key,) = self.take_keys(hint, 1)
        identity = PskIdentity(key.key_ID, client_addr or self.sae_id)
        return identity, key.key

    def resolve_keys(self, master_sae: str, key_ids) -> list[bytes]:
        key_ids = list(key_ids)
        out = []
        for i in range(0, len(key_ids), self.batch_limit):
            with self._counter_lock:
                self.resolve_call_count += 1
            keys = self.client.dec_keys(master_sae, key_ids[i : i + self.batch_limit])
            out.extend(k.key for k in keys)
        return out

    def resolve_psk(self, identity) -> bytes:
        """Server side: fetch the key named by a client's PSK identity."""
        if not isinstance(identity, PskIdentity):
            identity = PskIdentity.parse(identity)
        (psk,) = self.resolve_keys(identity.clientId, [identity.keyId])
        return psk

    def pool_status(self, peer_sae: Optional[str] = None) -> dict:
        pool = self.pools[peer_sae] if peer_sae else next(iter(self.pools.values()))
        with pool.lock:
            return {
                "peer": pool.peer_sae,
                "available": len(pool.entries),
                "kme_calls": pool.kme_call_count,
                "consumed": pool.consumed_count,
                "last_error": pool.last_error,
            }

    # -- background refill --------------------------------------------------------

    def start(self) -> "KeyManager":
        if self._thread is None:
            self._stop.clear()
            self._thread = threading.Thread(target=self._run, name=f"km-{self.sae_id}",
                                            daemon=True)
            self._thread.start()
        return self

    def stop(self):
        if self._thread is not None:
            self._stop.set()
            self._wake.set()
            self._thread.join()
            self._thread = None

    def _run(self):
        while not self._stop.is_set():
            for pool in list(self.pools.values()):
                try:
                    self.prefetch(pool)
                except KmeTransportError as exc:
                    log.warning("prefetch for %s failed: %s", pool.peer_sae, exc)
            self._wake.wait(self.retry_interval)
            self._wake.clear()
