"""Local HTTP control surface over a running endpoint.

JSON over loopback, one resource per path:

    GET  /status                  role, tunnels, channels, modes, store
    GET  /firewall/rules          current rule list
    PUT  /firewall/rules          replace the rule list, returns it confirmed
    GET  /firewall/counters       per-(host, process) traffic accounting
    GET  /health/samples          store rows; ?type= ?deleted=1 ?limit= ?offset=
    POST /health/harden-delete    {"uuid": hex} purge one sample everywhere
    GET  /events                  event log; ?category=security|activity
    GET  /stream                  server-sent events (see below)
    GET  /ui/...                  static files when a UI root is configured

The stream pushes each security/activity event the moment it is emitted,
plus polled deltas (every 0.25 s) for counters, new samples, and
connection state, so a client sees traffic reflected well inside a
second.  Event names: event, counters, samples, connection, status.

Mutations validate fully before they apply: a PUT with one bad rule
changes nothing.  The server binds loopback only by default.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import posixpath
import queue
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .healthstore import SAMPLE_TYPES, UnknownUuid
from .shoes import FirewallRule, InvalidGlob

__all__ = ["ControlApiServer"]

log = logging.getLogger(__name__)

STREAM_POLL_INTERVAL = 0.25

_TYPE_BY_NAME = {name: code for code, (name, _) in SAMPLE_TYPES.items()}


class _ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def _parse_sample_type(text: str) -> int:
    if text in _TYPE_BY_NAME:
        return _TYPE_BY_NAME[text]
    try:
        return int(text, 0)
    except ValueError:
        raise _ApiError(400, "unknown sample type %r" % text) from None


def _parse_int(params: dict, key: str, default: int) -> int:
    if key not in params:
        return default
    try:
        value = int(params[key][0])
    except ValueError:
        raise _ApiError(400, "%s must be an integer" % key) from None
    if value < 0:
        raise _ApiError(400, "%s must not be negative" % key)
    return value


def _parse_float(params: dict, key: str):
    if key not in params:
        return None
    try:
        return float(params[key][0])
    except ValueError:
        raise _ApiError(400, "%s must be a number" % key) from None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "witchstack"

    # -- plumbing ---------------------------------------------------------------

    @property
    def endpoint(self):
        return self.server.endpoint

    @property
    def firewall(self):
        firewall = getattr(self.endpoint, "firewall", None)
        if firewall is None:
            raise _ApiError(404, "this endpoint has no firewall")
        return firewall

    def log_message(self, fmt, *args):   # noqa: A003 - stdlib signature
        log.debug("%s " + fmt, self.client_address[0], *args)

    def _send_json(self, payload, status: int = 200) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length <= 0:
            raise _ApiError(400, "request body required")
        try:
            return json.loads(self.rfile.read(length))
        except ValueError as exc:
            raise _ApiError(400, "bad JSON: %s" % exc) from None

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        params = parse_qs(parsed.query)
        try:
            handler = _ROUTES.get((method, parsed.path))
            if handler is not None:
                handler(self, params)
            elif parsed.path == "/ui" or parsed.path.startswith("/ui/"):
                if method != "GET":
                    raise _ApiError(405, "method not allowed")
                self._serve_static(parsed.path)
            elif any(path == parsed.path for m, path in _ROUTES):
                raise _ApiError(405, "method not allowed")
            else:
                raise _ApiError(404, "no such resource")
        except _ApiError as exc:
            self._send_json({"error": str(exc)}, exc.status)
        except UnknownUuid as exc:
            self._send_json({"error": str(exc)}, 404)
        except InvalidGlob as exc:
            self._send_json({"error": str(exc)}, 400)
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception as exc:    # noqa: BLE001 - surface, don't kill the thread
            log.exception("control api failure on %s %s", method, self.path)
            try:
                self._send_json({"error": "internal: %s" % exc}, 500)
            except OSError:
                pass

    def do_GET(self):   # noqa: N802 - stdlib naming
        self._dispatch("GET")

    def do_PUT(self):   # noqa: N802
        self._dispatch("PUT")

    def do_POST(self):  # noqa: N802
        self._dispatch("POST")

    # -- resources ---------------------------------------------------------------

    def _get_status(self, params) -> None:
        self._send_json(self.endpoint.status())

    def _get_rules(self, params) -> None:
        self._send_json({"rules": [rule.to_json() for rule in
                                   self.firewall.list_rules()]})

    def _put_rules(self, params) -> None:
        firewall = self.firewall
        body = self._read_json()
        if not isinstance(body, dict) or not isinstance(body.get("rules"), list):
            raise _ApiError(400, 'body must be {"rules": [...]}')
        now = time.time()
        rules = []
        for record in body["rules"]:
            if not isinstance(record, dict):
                raise _ApiError(400, "each rule must be an object")
            record = dict(record)
            record.setdefault("created_at", now)
            rules.append(FirewallRule.from_json(record))
        firewall.replace_rules(rules)
        self._send_json({"rules": [rule.to_json() for rule in
                                   firewall.list_rules()]})

    def _get_counters(self, params) -> None:
        self._send_json({"counters": self.firewall.counters_snapshot()})

    def _get_samples(self, params) -> None:
        sample_type = None
        if "type" in params:
            sample_type = _parse_sample_type(params["type"][0])
        include_deleted = params.get("deleted", ["0"])[0] not in ("0", "false", "")
        rows = self.endpoint.store.query(sample_type,
                                         start=_parse_float(params, "start"),
                                         end=_parse_float(params, "end"),
                                         include_tombstones=include_deleted)
        offset = _parse_int(params, "offset", 0)
        limit = _parse_int(params, "limit", len(rows))
        self._send_json({"samples": rows[offset:offset + limit],
                         "total": len(rows)})

    def _post_harden_delete(self, params) -> None:
        body = self._read_json()
        if not isinstance(body, dict) or not isinstance(body.get("uuid"), str):
            raise _ApiError(400, 'body must be {"uuid": "<hex>"}')
        try:
            uuid = bytes.fromhex(body["uuid"])
        except ValueError:
            raise _ApiError(400, "uuid is not hex") from None
        self.endpoint.harden_delete(uuid)
        self._send_json({"ok": True, "uuid": uuid.hex()})

    def _get_events(self, params) -> None:
        category = params.get("category", [None])[0]
        if category not in (None, "security", "activity"):
            raise _ApiError(400, "category must be security or activity")
        self._send_json({"events": [event.to_json() for event in
                                    self.endpoint.events.events(category)]})

    # -- server-sent events --------------------------------------------------------

    def _write_sse(self, name: str, payload) -> None:
        chunk = "event: %s\ndata: %s\n\n" % (name, json.dumps(payload))
        self.wfile.write(chunk.encode("utf-8"))
        self.wfile.flush()

    def _get_stream(self, params) -> None:
        self.close_connection = True
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        endpoint = self.endpoint
        firewall = getattr(endpoint, "firewall", None)
        subscription = endpoint.events.subscribe()
        counters = firewall.counters_snapshot() if firewall else None
        known = {row["uuid"] for row in endpoint.store.query()}
        connection = self._connection_view()
        try:
            self._write_sse("status", endpoint.status())
            last_beat = time.monotonic()
            while not self.server.closing.is_set():
                wrote = False
                while not subscription.empty():
                    self._write_sse("event", subscription.get_nowait().to_json())
                    wrote = True
                if firewall is not None:
                    snapshot = firewall.counters_snapshot()
                    if snapshot != counters:
                        counters = snapshot
                        self._write_sse("counters", {"counters": snapshot})
                        wrote = True
                rows = endpoint.store.query()
                fresh = [row for row in rows if row["uuid"] not in known]
                if fresh:
                    known = {row["uuid"] for row in rows}
                    self._write_sse("samples", {"samples": fresh})
                    wrote = True
                elif len(rows) != len(known):
                    known = {row["uuid"] for row in rows}
                view = self._connection_view()
                if view != connection:
                    connection = view
                    self._write_sse("connection", view)
                    wrote = True
                now = time.monotonic()
                if wrote:
                    last_beat = now
                elif now - last_beat > 5.0:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    last_beat = now
                try:
                    # block on the event queue so pushes beat the poll cadence
                    event = subscription.get(timeout=STREAM_POLL_INTERVAL)
                except queue.Empty:
                    continue
                self._write_sse("event", event.to_json())
                last_beat = time.monotonic()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            endpoint.events.unsubscribe(subscription)

    def _connection_view(self) -> dict:
        status = self.endpoint.status()
        return {
            "connected": status["connected"],
            "ready": status["ready"],
            "tunnels": {cls: t["established"]
                        for cls, t in status["tunnels"].items()},
            "channels": status["channels"],
        }

    # -- static UI ---------------------------------------------------------------

    def _serve_static(self, path: str) -> None:
        root = self.server.ui_root
        if root is None:
            raise _ApiError(404, "no UI bundled with this server")
        relative = posixpath.normpath(path[len("/ui"):].lstrip("/")) or "."
        if relative.startswith(".."):
            raise _ApiError(404, "no such file")
        if relative == ".":
            relative = "index.html"
        try:
            with open(posixpath.join(root, relative), "rb") as handle:
                body = handle.read()
        except OSError:
            raise _ApiError(404, "no such file") from None
        ctype = mimetypes.guess_type(relative)[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


_ROUTES = {
    ("GET", "/status"): _Handler._get_status,
    ("GET", "/firewall/rules"): _Handler._get_rules,
    ("PUT", "/firewall/rules"): _Handler._put_rules,
    ("GET", "/firewall/counters"): _Handler._get_counters,
    ("GET", "/health/samples"): _Handler._get_samples,
    ("POST", "/health/harden-delete"): _Handler._post_harden_delete,
    ("GET", "/events"): _Handler._get_events,
    ("GET", "/stream"): _Handler._get_stream,
}


class ControlApiServer:
    """Threaded HTTP server wrapping one endpoint; loopback by default."""

    def __init__(self, endpoint, host: str = "127.0.0.1", port: int = 0,
                 ui_root: str | None = None):
        self._server = ThreadingHTTPServer((host, port), _Handler)
        self._server.daemon_threads = True
        self._server.endpoint = endpoint
        self._server.ui_root = ui_root
        self._server.closing = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return "http://%s:%d" % (self._server.server_address[0], self.port)

    def start(self) -> "ControlApiServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="control-api", daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._server.closing.set()
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(5.0)
