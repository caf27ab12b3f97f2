"""Command-line front end.

    witchstack identity PHONE_FILE WATCH_FILE [--seed N]
    witchstack phone    --identity FILE [--config FILE] [--ui DIR]
    witchstack watch    --identity FILE --connect HOST:PORT [--fetch HOST:PORT]
    witchstack scenario NAME | --list [--seed N] [--json]
    witchstack dissect  FILE [--keys KEYLOG] [--identity FILE] [--json]
    witchstack firewall list|counters|clear|block|allow [--api URL]
    witchstack health   query | harden-delete UUID [--api URL | --store FILE]

`phone` and `watch` run until interrupted (or `--duration`).  `firewall`
and `health` talk to a running phone's control API; `health` can instead
open a sealed store file directly with `--store`/`--passphrase`.  When no
api_port is configured the phone picks 8787 so the client commands have a
stable default to aim at.

Exit codes: 0 success, 1 runtime or assertion failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import urllib.error
import urllib.request

from . import dissect as dissect_mod
from .api import ControlApiServer
from .config import BadConfig, load_config
from .endpoints import (
    ConnectFailure,
    HandshakeFailure,
    PhoneEndpoint,
    PortInUse,
    WatchEndpoint,
)
from .healthstore import (
    HealthStore,
    PassphraseKeyProvider,
    SAMPLE_TYPES,
    StoreError,
    UnknownUuid,
)
from .identity import (
    BadIdentityFile,
    generate_identity_pair,
    load_identity,
    save_identity,
)
from .rng import RandomSource
from .scenarios import (
    AssertionFailed,
    ScenarioUnknown,
    format_report,
    list_scenarios,
    run_scenario,
)

__all__ = ["main"]

DEFAULT_API_PORT = 8787
DEFAULT_API = "http://127.0.0.1:%d" % DEFAULT_API_PORT


class _Usage(Exception):
    pass


class _Failure(Exception):
    pass


# --- small helpers -----------------------------------------------------------------


def _say(text: str = "") -> None:
    print(text, flush=True)


def _api_call(base: str, method: str, path: str, body=None) -> dict:
    data = None if body is None else json.dumps(body).encode("utf-8")
    request = urllib.request.Request(base.rstrip("/") + path, data=data,
                                     method=method)
    if data is not None:
        request.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(request, timeout=10) as response:
            return json.loads(response.read())
    except urllib.error.HTTPError as exc:
        try:
            detail = json.loads(exc.read()).get("error", "")
        except ValueError:
            detail = ""
        raise _Failure("%s %s -> %d %s" % (method, path, exc.code, detail))
    except (urllib.error.URLError, OSError) as exc:
        raise _Failure("control api unreachable at %s: %s" % (base, exc))


def _load_identity(path: str | None):
    if not path:
        raise _Usage("an --identity file is required")
    return load_identity(path)


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise _Usage("expected HOST:PORT, got %r" % text)
    return host, int(port)


def _run_until(duration: float | None) -> None:
    deadline = None if duration is None else time.time() + duration
    try:
        while deadline is None or time.time() < deadline:
            time.sleep(0.2)
    except KeyboardInterrupt:
        _say("interrupted, shutting down")


# --- subcommands ----------------------------------------------------------------------


def _cmd_identity(args) -> int:
    rng = RandomSource(args.seed) if args.seed is not None else RandomSource()
    phone_id, watch_id = generate_identity_pair(
        rng, phone_name=args.phone_name, watch_name=args.watch_name)
    save_identity(phone_id, args.phone_file)
    save_identity(watch_id, args.watch_file)
    _say("wrote %s (phone) and %s (watch)" % (args.phone_file, args.watch_file))
    return 0


def _cmd_phone(args) -> int:
    config = load_config(args.config)
    if config.api_port == 0:
        config.api_port = DEFAULT_API_PORT
    identity = _load_identity(args.identity)
    endpoint = PhoneEndpoint(identity, config)
    endpoint.start()
    api = ControlApiServer(endpoint, port=config.api_port,
                           ui_root=args.ui).start()
    _say("phone '%s' listening on port %d" % (identity.device_name,
                                              endpoint.port))
    _say("control api at %s%s" % (api.url, " (ui at /ui/)" if args.ui else ""))
    try:
        _run_until(args.duration)
    finally:
        api.close()
        endpoint.stop()
    return 0


def _cmd_watch(args) -> int:
    config = load_config(args.config)
    identity = _load_identity(args.identity)
    address = _host_port(args.connect)
    endpoint = WatchEndpoint(identity, address, config)
    endpoint.start(timeout=args.timeout)
    _say("watch '%s' connected to %s:%d, tunnels up"
         % (identity.device_name, address[0], address[1]))
    if args.fetch:
        host, port = _host_port(args.fetch)
        reply, echoed = endpoint.shoes_fetch(host, port, payload=b"witchstack")
        if reply.denied:
            _say("fetch %s:%d denied by proxy" % (host, port))
        else:
            _say("fetch %s:%d ok, %d bytes echoed" % (host, port, len(echoed)))
    endpoint.start_script()
    _say("emitting heart-rate samples every %.1fs" % config.sample_interval)
    try:
        _run_until(args.duration)
    finally:
        endpoint.stop()
    return 0


def _cmd_scenario(args) -> int:
    if args.list:
        for name, summary in list_scenarios():
            _say("%-24s %s" % (name, summary))
        return 0
    if not args.name:
        raise _Usage("a scenario name is required (or --list)")
    try:
        report = run_scenario(args.name, seed=args.seed)
        code = 0
    except AssertionFailed as exc:
        report, code = exc.report, 1
    if args.transcript:
        with open(args.transcript, "wb") as handle:
            handle.write(report.transcript)
    if args.keylog:
        with open(args.keylog, "w") as handle:
            handle.write("".join(line + "\n" for line in report.keylog))
    if args.json:
        _say(json.dumps({
            "name": report.name, "seed": report.seed, "passed": report.passed,
            "checks": [{"label": c.label, "passed": c.passed,
                        "expected": repr(c.expected), "actual": repr(c.actual)}
                       for c in report.checks],
            "events": report.events,
        }, indent=2))
    else:
        _say(format_report(report))
    return code


def _cmd_dissect(args) -> int:
    tree = dissect_mod.dissect(args.file, keylog=args.keys,
                               identity=args.identity)
    if args.json:
        _say(json.dumps(dissect_mod.to_json(tree), indent=2))
    else:
        _say(dissect_mod.render_text(tree))
    return 0


def _print_rules(body: dict) -> None:
    rules = body.get("rules", [])
    if not rules:
        _say("no rules (default allow)")
    for rule in rules:
        _say("%-5s host=%s process=%s" % (rule["action"],
                                          rule.get("host") or "*",
                                          rule.get("process") or "*"))


def _cmd_firewall(args) -> int:
    if args.action == "list":
        _print_rules(_api_call(args.api, "GET", "/firewall/rules"))
    elif args.action == "counters":
        rows = _api_call(args.api, "GET", "/firewall/counters")["counters"]
        for row in rows:
            _say("%s / %s: up=%d down=%d connections=%d blocked=%d"
                 % (row["host"], row["process"], row["bytes_up"],
                    row["bytes_down"], row["connection_count"],
                    row["blocked_count"]))
        if not rows:
            _say("no traffic recorded")
    elif args.action == "clear":
        _api_call(args.api, "PUT", "/firewall/rules", {"rules": []})
        _say("rules cleared")
    else:   # block | allow
        if args.host is None and args.process is None:
            raise _Usage("block/allow needs --host and/or --process")
        rules = _api_call(args.api, "GET", "/firewall/rules")["rules"]
        rules.append({"action": args.action, "host": args.host,
                      "process": args.process, "created_at": time.time()})
        body = _api_call(args.api, "PUT", "/firewall/rules", {"rules": rules})
        _print_rules(body)
    return 0


def _open_store(args) -> HealthStore:
    provider = PassphraseKeyProvider(args.passphrase or "")
    return HealthStore.load(args.store, provider)


def _parse_type(text: str | None) -> int | None:
    if text is None:
        return None
    for code, (name, _) in SAMPLE_TYPES.items():
        if name == text:
            return code
    try:
        return int(text, 0)
    except ValueError:
        raise _Usage("unknown sample type %r" % text) from None


def _health_query(args) -> int:
    sample_type = _parse_type(args.type)
    if args.store:
        rows = _open_store(args).query(sample_type,
                                       include_tombstones=args.deleted)
    else:
        path = "/health/samples?deleted=%d" % int(args.deleted)
        if args.type is not None:
            path += "&type=" + args.type
        rows = _api_call(args.api, "GET", path)["samples"]
    if args.json:
        _say(json.dumps(rows, indent=2))
        return 0
    for row in rows:
        if row["deleted"]:
            _say("%s  %-14s DELETED at %.0f" % (row["uuid"], row["type_name"],
                                                row["deletion_time"]))
        else:
            _say("%s  %-14s %8.2f %-10s at %.0f" % (
                row["uuid"], row["type_name"], row["value"], row["unit"],
                row["start_time"]))
    if not rows:
        _say("no samples")
    return 0


def _health_harden_delete(args) -> int:
    try:
        uuid = bytes.fromhex(args.uuid)
    except ValueError:
        raise _Usage("uuid must be hex") from None
    if args.store:
        store = _open_store(args)
        store.hardened_delete(uuid)
        store.save(args.store, PassphraseKeyProvider(args.passphrase or ""))
    else:
        _api_call(args.api, "POST", "/health/harden-delete",
                  {"uuid": uuid.hex()})
    _say("hardened delete of %s done" % uuid.hex())
    return 0


# --- argument wiring ------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="witchstack",
        description="watch/phone protocol stack harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identity", help="mint a paired identity file set")
    p.add_argument("phone_file")
    p.add_argument("watch_file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--phone-name", default="Phone")
    p.add_argument("--watch-name", default="Watch")
    p.set_defaults(run=_cmd_identity)

    p = sub.add_parser("phone", help="run the phone endpoint + control api")
    p.add_argument("--config", default=None)
    p.add_argument("--identity", required=True)
    p.add_argument("--ui", default=None, help="static files served at /ui/")
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(run=_cmd_phone)

    p = sub.add_parser("watch", help="run the watch emulator")
    p.add_argument("--config", default=None)
    p.add_argument("--identity", required=True)
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--fetch", default=None, metavar="HOST:PORT",
                   help="one proxied echo fetch once connected")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(run=_cmd_watch)

    p = sub.add_parser("scenario", help="run a scripted attack/defense scenario")
    p.add_argument("name", nargs="?")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--list", action="store_true")
    p.add_argument("--json", action="store_true")
    p.add_argument("--transcript", default=None,
                   help="write the link transcript here")
    p.add_argument("--keylog", default=None,
                   help="write tunnel session keys here")
    p.set_defaults(run=_cmd_scenario)

    p = sub.add_parser("dissect", help="annotate a transcript or message log")
    p.add_argument("file")
    p.add_argument("--keys", default=None, help="key log for tunnel layers")
    p.add_argument("--identity", default=None,
                   help="identity file for envelope layers")
    p.add_argument("--json", action="store_true")
    p.set_defaults(run=_cmd_dissect)

    p = sub.add_parser("firewall", help="inspect or edit proxy rules")
    p.add_argument("action",
                   choices=("list", "counters", "clear", "block", "allow"))
    p.add_argument("--host", default=None)
    p.add_argument("--process", default=None)
    p.add_argument("--api", default=DEFAULT_API)
    p.set_defaults(run=_cmd_firewall)

    p = sub.add_parser("health", help="query or purge synced samples")
    health_sub = p.add_subparsers(dest="action", required=True)
    q = health_sub.add_parser("query")
    q.add_argument("--type", default=None)
    q.add_argument("--deleted", action="store_true")
    q.add_argument("--json", action="store_true")
    q.add_argument("--api", default=DEFAULT_API)
    q.add_argument("--store", default=None)
    q.add_argument("--passphrase", default=None)
    q.set_defaults(run=_health_query)
    d = health_sub.add_parser("harden-delete")
    d.add_argument("uuid")
    d.add_argument("--api", default=DEFAULT_API)
    d.add_argument("--store", default=None)
    d.add_argument("--passphrase", default=None)
    d.set_defaults(run=_health_harden_delete)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.run(args)
    except _Usage as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (BadConfig, BadIdentityFile, ScenarioUnknown,
            dissect_mod.FileUnreadable) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (PortInUse, ConnectFailure, HandshakeFailure,
            UnknownUuid, StoreError, _Failure) as exc:
        print("failed: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
