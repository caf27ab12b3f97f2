import contextlib
import http.client
import json
import time

from test_endpoints import EchoTap, endpoint_pair, wait_until

from witchstack.api import ControlApiServer


@contextlib.contextmanager
def api_pair(**kwargs):
    with endpoint_pair(**kwargs) as (phone, watch):
        server = ControlApiServer(phone).start()
        try:
            yield server, phone, watch
        finally:
            server.close()


def request(server, method, path, body=None):
    conn = http.client.HTTPConnection("127.0.0.1", server.port, timeout=10)
    try:
        payload = None if body is None else json.dumps(body).encode()
        headers = {"Content-Type": "application/json"} if payload else {}
        conn.request(method, path, payload, headers)
        response = conn.getresponse()
        return response.status, json.loads(response.read())
    finally:
        conn.close()


class SseClient:
    """Minimal text/event-stream reader over a raw HTTP connection."""

    def __init__(self, server):
        self.conn = http.client.HTTPConnection("127.0.0.1", server.port,
                                               timeout=10)
        self.conn.request("GET", "/stream")
        self.response = self.conn.getresponse()
        assert self.response.status == 200
        assert self.response.getheader("Content-Type") == "text/event-stream"

    def next_event(self, want=None, deadline=6.0):
        """The next (name, payload) pair, skipping others when `want` is set."""
        end = time.time() + deadline
        name, data = None, []
        while time.time() < end:
            line = self.response.readline().decode("utf-8").rstrip("\n")
            if line.startswith(":"):
                continue
            if line.startswith("event: "):
                name = line[len("event: "):]
            elif line.startswith("data: "):
                data.append(line[len("data: "):])
            elif line == "":
                if name is None and not data:
                    continue
                event = (name, json.loads("\n".join(data)))
                name, data = None, []
                if want is None or event[0] == want:
                    return event
        raise AssertionError("no %s event within %.1fs" % (want, deadline))

    def close(self):
        self.conn.close()


# --- plain resources ---------------------------------------------------------------


def test_status_route_mirrors_endpoint():
    with api_pair() as (server, phone, watch):
        assert phone.wait_ready(5.0)
        status, body = request(server, "GET", "/status")
        assert status == 200
        direct = phone.status()
        assert body["role"] == "phone"
        assert body["connected"] and body["ready"]
        assert set(body) == set(direct)
        assert body["tunnels"]["C"]["established"]
        assert body["state_hash"] == direct["state_hash"]


def test_samples_route_matches_store():
    with api_pair() as (server, phone, watch):
        for value in (62.0, 71.0, 88.5):
            watch.emit_heart_rate(value)
        watch.emit_sample(0x0A, 12.5, "kcal")
        assert wait_until(lambda: len(phone.store.query()) == 4)

        status, body = request(server, "GET", "/health/samples")
        assert status == 200
        assert body["samples"] == phone.store.query()
        assert body["total"] == 4

        for selector in ("heart-rate", "0x05", "5"):
            status, body = request(server, "GET",
                                   "/health/samples?type=" + selector)
            assert status == 200
            assert [row["value"] for row in body["samples"]] == \
                sorted([62.0, 71.0, 88.5])

        status, body = request(server, "GET", "/health/samples?limit=2&offset=1")
        assert [row["uuid"] for row in body["samples"]] == \
            [row["uuid"] for row in phone.store.query()[1:3]]
        assert body["total"] == 4

        status, body = request(server, "GET", "/health/samples?type=nonsense")
        assert status == 400 and "error" in body


def test_harden_delete_route_and_tombstone_view():
    with api_pair() as (server, phone, watch):
        kept = watch.emit_heart_rate(75.0)
        purged = watch.emit_heart_rate(90.0)
        assert wait_until(lambda: len(phone.store.query()) == 2)

        # a plain delete leaves a tombstone the deleted=1 view must show
        phone.delete_sample(kept.uuid)
        status, body = request(server, "GET", "/health/samples?deleted=1")
        assert status == 200
        ghosts = [row for row in body["samples"] if row["deleted"]]
        assert [g["uuid"] for g in ghosts] == [kept.uuid.hex()]
        assert ghosts[0]["value"] is None
        assert ghosts[0]["deletion_time"] is not None

        # a hardened delete erases the row and leaves no tombstone at all
        status, body = request(server, "POST", "/health/harden-delete",
                               {"uuid": purged.uuid.hex()})
        assert status == 200 and body["ok"]
        assert wait_until(lambda: watch.store.query() == [])
        body = request(server, "GET", "/health/samples?deleted=1")[1]
        assert purged.uuid.hex() not in [row["uuid"] for row in body["samples"]]

        status, body = request(server, "POST", "/health/harden-delete",
                               {"uuid": "00" * 16})
        assert status == 404 and "error" in body
        status, body = request(server, "POST", "/health/harden-delete",
                               {"uuid": "not hex"})
        assert status == 400
        status, body = request(server, "POST", "/health/harden-delete", {})
        assert status == 400


def test_firewall_rules_roundtrip_and_enforcement():
    with api_pair() as (server, phone, watch):
        tap = EchoTap()
        try:
            status, body = request(server, "GET", "/firewall/rules")
            assert status == 200 and body["rules"] == []

            status, body = request(server, "PUT", "/firewall/rules", {
                "rules": [{"action": "block", "host": "127.0.0.1"}],
            })
            assert status == 200
            assert [r["action"] for r in body["rules"]] == ["block"]
            confirmed = request(server, "GET", "/firewall/rules")[1]
            assert confirmed == body

            reply, echoed = watch.shoes_fetch("127.0.0.1", tap.port)
            assert reply.denied and echoed == b""
            assert tap.received == 0

            status, body = request(server, "GET", "/firewall/counters")
            assert status == 200
            row = body["counters"][0]
            assert row["blocked_count"] == 1
            assert row["bytes_up"] == 0 and row["bytes_down"] == 0

            status, body = request(server, "PUT", "/firewall/rules",
                                   {"rules": []})
            assert status == 200 and body["rules"] == []
            reply, echoed = watch.shoes_fetch("127.0.0.1", tap.port,
                                              payload=b"hello")
            assert not reply.denied and echoed == b"hello"
            row = request(server, "GET", "/firewall/counters")[1]["counters"][0]
            assert row["bytes_up"] >= 5 and row["bytes_down"] >= 5
        finally:
            tap.close()


def test_put_rules_rejects_bad_input_atomically():
    with api_pair() as (server, phone, watch):
        request(server, "PUT", "/firewall/rules", {
            "rules": [{"action": "block", "process": "curl"}],
        })
        before = request(server, "GET", "/firewall/rules")[1]

        status, body = request(server, "PUT", "/firewall/rules", {
            "rules": [{"action": "allow", "host": "*"},
                      {"action": "shrug", "host": "x"}],
        })
        assert status == 400 and "error" in body
        assert request(server, "GET", "/firewall/rules")[1] == before

        for bad in ({}, {"rules": "nope"}, {"rules": [42]}):
            status, _ = request(server, "PUT", "/firewall/rules", bad)
            assert status == 400


def test_events_route_and_category_filter():
    with api_pair() as (server, phone, watch):
        phone.events.emit("BlockedConnection", "curl -> example.org")
        phone.events.emit("TamperDetected", "category filter check")
        status, body = request(server, "GET", "/events")
        assert status == 200
        assert len(body["events"]) == len(phone.events.events())
        assert all("kind" in e and "category" in e for e in body["events"])

        status, body = request(server, "GET", "/events?category=security")
        assert [e["kind"] for e in body["events"]] == ["TamperDetected"]
        assert all(e["category"] == "security" for e in body["events"])
        status, body = request(server, "GET", "/events?category=activity")
        assert "BlockedConnection" in [e["kind"] for e in body["events"]]

        status, body = request(server, "GET", "/events?category=bogus")
        assert status == 400


def test_unknown_routes_and_methods():
    with api_pair() as (server, phone, watch):
        status, body = request(server, "GET", "/no/such/thing")
        assert status == 404 and "error" in body
        status, body = request(server, "POST", "/status")
        assert status == 405
        status, body = request(server, "PUT", "/events")
        assert status == 405
        status, body = request(server, "GET", "/ui/index.html")
        assert status == 404      # no UI root configured


def test_static_ui_serving(tmp_path):
    (tmp_path / "index.html").write_text("<!doctype html><title>hi</title>")
    (tmp_path / "app.js").write_text("console.log(1)")
    secret = tmp_path.parent / "secret.txt"
    secret.write_text("keep out")
    with endpoint_pair() as (phone, watch):
        server = ControlApiServer(phone, ui_root=str(tmp_path)).start()
        try:
            conn = http.client.HTTPConnection("127.0.0.1", server.port,
                                              timeout=10)
            conn.request("GET", "/ui/")
            response = conn.getresponse()
            assert response.status == 200
            assert response.getheader("Content-Type") == "text/html"
            assert b"doctype" in response.read()

            conn.request("GET", "/ui/app.js")
            response = conn.getresponse()
            assert response.status == 200
            assert "javascript" in response.getheader("Content-Type")
            response.read()

            conn.request("GET", "/ui/../secret.txt")
            response = conn.getresponse()
            assert response.status == 404
            response.read()
            conn.close()
        finally:
            server.close()


# --- the event stream ----------------------------------------------------------------


def test_stream_reports_counter_delta_within_a_second():
    with api_pair() as (server, phone, watch):
        tap = EchoTap()
        stream = SseClient(server)
        try:
            name, _ = stream.next_event("status")
            assert name == "status"
            sent_at = time.time()
            reply, echoed = watch.shoes_fetch("127.0.0.1", tap.port,
                                              payload=b"stream-probe")
            assert not reply.denied
            name, payload = stream.next_event("counters", deadline=3.0)
            elapsed = time.time() - sent_at
            assert elapsed < 1.0, "counter delta took %.2fs" % elapsed
            assert payload["counters"][0]["connection_count"] == 1
        finally:
            stream.close()
            tap.close()


def test_stream_pushes_security_events_fast():
    with api_pair() as (server, phone, watch):
        stream = SseClient(server)
        try:
            stream.next_event("status")
            emitted_at = time.time()
            phone.events.emit("TamperDetected", "stream check")
            name, payload = stream.next_event("event", deadline=3.0)
            elapsed = time.time() - emitted_at
            assert payload["kind"] == "TamperDetected"
            assert payload["category"] == "security"
            assert elapsed < 2.0, "security event took %.2fs" % elapsed
        finally:
            stream.close()


def test_stream_announces_new_samples():
    with api_pair() as (server, phone, watch):
        stream = SseClient(server)
        try:
            stream.next_event("status")
            emitted = watch.emit_heart_rate(66.0)
            name, payload = stream.next_event("samples", deadline=4.0)
            uuids = [row["uuid"] for row in payload["samples"]]
            assert emitted.uuid.hex() in uuids
        finally:
            stream.close()
