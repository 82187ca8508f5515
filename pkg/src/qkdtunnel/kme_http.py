"""HTTP/JSON surface of the KME and the matching SAE-side clients.

Routes (bearer-token authenticated, caller SAE taken from the token)::

    GET|POST /api/v1/keys/{slave_SAE_ID}/enc_keys
    GET|POST /api/v1/keys/{master_SAE_ID}/dec_keys
    GET      /api/v1/keys/{slave_SAE_ID}/status

Key material travels as standard-alphabet base64.  Errors come back as
``{"message": ..., "offending_key_ID": ...}`` with 400/401/404/503.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, quote, unquote, urlsplit

import requests

from .errors import (
    BadRequest,
    KeysExhausted,
    KmeError,
    KmeTransportError,
    NotFound,
    Unauthorized,
    UnknownKey,
)
from .keys import QkdKey
from .kme import KeyManagementEntity

log = logging.getLogger(__name__)

PREFIX = "/api/v1/keys/"


class _Handler(BaseHTTPRequestHandler):
    server_version = "qkdtunnel-kme/1"
    protocol_version = "HTTP/1.1"

    @property
    def kme(self) -> KeyManagementEntity:
        return self.server.kme

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: dict):
        raw = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if not length:
            return {}
        try:
            body = json.loads(self.rfile.read(length))
        except ValueError:
            raise BadRequest("request body is not JSON") from None
        if not isinstance(body, dict):
            raise BadRequest("request body must be a JSON object")
        return body

    def _route(self, method: str):
        url = urlsplit(self.path)
        if not url.path.startswith(PREFIX):
            raise NotFound(f"no route for {url.path}")
        sae, _, action = url.path[len(PREFIX):].rpartition("/")
        sae = unquote(sae)
        if not sae or action not in ("enc_keys", "dec_keys", "status"):
            raise NotFound(f"no route for {url.path}")

        auth = self.headers.get("Authorization", "")
        token = auth[7:] if auth.startswith("Bearer ") else None
        caller = self.kme.authenticate(token)
        query = parse_qs(url.query)
        body = self._body() if method == "POST" else {}

        if action == "status":
            if method != "GET":
                raise BadRequest("status only supports GET")
            return self.kme.get_status(caller, sae).to_json()

        if action == "enc_keys":
            try:
                number = int(body.get("number", query.get("number", [1])[0]))
                size = body.get("size", query.get("size", [None])[0])
                size = int(size) if size is not None else None
            except (TypeError, ValueError):
                raise BadRequest("number and size must be integers") from None
            keys = self.kme.get_enc_keys(caller, sae, number, size)
        else:
            if method == "POST":
                items = body.get("key_IDs")
                if not isinstance(items, list) or not all(
                    isinstance(i, dict) and isinstance(i.get("key_ID"), str) for i in items
                ):
                    raise BadRequest('key_IDs must be a list of {"key_ID": "..."} objects')
                ids = [i["key_ID"] for i in items]
            else:
                ids = query.get("key_ID", [])
            keys = self.kme.get_dec_keys(caller, sae, ids)
        return {"keys": [k.to_json() for k in keys]}

    def _dispatch(self, method):
        try:
            self._send(200, self._route(method))
        except KmeError as exc:
            self._send(exc.status, exc.to_body())
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("KME handler failed")
            self._send(500, {"message": f"internal error: {exc}"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")


class KmeHttpServer:
    """Serve one :class:`KeyManagementEntity` on a background thread."""

    def __init__(self, kme: KeyManagementEntity, host: str = "127.0.0.1", port: int = 0):
        self.kme = kme
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.kme = kme
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    @property
    def base_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "KmeHttpServer":
        self._thread = threading.Thread(
            target=self.httpd.serve_forever, name=f"kme-{self.kme.kme_id}", daemon=True
        )
        self._thread.start()
        return self

    def stop(self):
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join()
            self._thread = None
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


_ERRORS = {400: BadRequest, 401: Unauthorized, 404: NotFound, 503: KeysExhausted}


class KmeClient:
    """SAE-side client for the KME REST API."""

    def __init__(self, base_url: str, token: str, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout
        self._local = threading.local()

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
            s.headers["Authorization"] = f"Bearer {self.token}"
        return s

    def _call(self, method, sae, action, timeout=None, **kwargs):
        url = f"{self.base_url}{PREFIX}{quote(sae, safe='')}/{action}"
        try:
            resp = self._session().request(method, url, timeout=timeout or self.timeout, **kwargs)
            body = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise KmeTransportError(f"{method} {url}: {exc}") from exc
        if resp.status_code == 200:
            return body
        cls = _ERRORS.get(resp.status_code, KmeError)
        offending = body.get("offending_key_ID")
        if resp.status_code == 404 and offending is not None:
            cls = UnknownKey
        raise cls(body.get("message", resp.reason), offending_key_id=offending)

    def enc_keys(self, slave_sae: str, number: int = 1, size: Optional[int] = None,
                 timeout: Optional[float] = None) -> list[QkdKey]:
        payload = {"number": number}
        if size is not None:
            payload["size"] = size
        body = self._call("POST", slave_sae, "enc_keys", timeout=timeout, json=payload)
        return [QkdKey.from_json(k) for k in body["keys"]]

    def dec_keys(self, master_sae: str, key_ids, timeout: Optional[float] = None) -> list[QkdKey]:
        payload = {"key_IDs": [{"key_ID": k} for k in key_ids]}
        body = self._call("POST", master_sae, "dec_keys", timeout=timeout, json=payload)
        return [QkdKey.from_json(k) for k in body["keys"]]

    def status(self, slave_sae: str) -> dict:
        return self._call("GET", slave_sae, "status")


class LocalKmeClient:
    """Same interface as :class:`KmeClient`, calling an in-process KME directly."""

    def __init__(self, kme: KeyManagementEntity, sae_id: str):
        self.kme = kme
        self.sae_id = sae_id

    def enc_keys(self, slave_sae, number=1, size=None, timeout=None):
        return self.kme.get_enc_keys(self.sae_id, slave_sae, number, size)

    def dec_keys(self, master_sae, key_ids, timeout=None):
        return self.kme.get_dec_keys(self.sae_id, master_sae, key_ids)

    def status(self, slave_sae):
        return self.kme.get_status(self.sae_id, slave_sae).to_json()
