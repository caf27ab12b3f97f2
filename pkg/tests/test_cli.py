import json
import threading
import time

import pytest

from test_endpoints import EchoTap, wait_until

from witchstack.cli import main
from witchstack.healthstore import (
    HealthStore,
    PassphraseKeyProvider,
    SAMPLE_TYPE_HEART_RATE,
)
from witchstack.link import read_transcript
from witchstack.tunnel import KeyMaterial


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# --- scenario ------------------------------------------------------------------------


def test_scenario_list_names_all_builtins(capsys):
    code, out, err = run_cli(capsys, "scenario", "--list")
    assert code == 0
    for name in ("ldm-inject-vulnerable", "ldm-inject-strict",
                 "cbc-forge-faithful", "cbc-forge-mitigated",
                 "deletion-artifacts"):
        assert name in out


def test_scenario_run_reports_and_exits_zero(capsys, tmp_path):
    transcript = tmp_path / "run.bin"
    keylog = tmp_path / "keys.log"
    code, out, err = run_cli(capsys, "scenario", "deletion-artifacts",
                             "--seed", "11",
                             "--transcript", str(transcript),
                             "--keylog", str(keylog))
    assert code == 0
    assert "deletion-artifacts (seed 11): PASS" in out
    assert out.count("[ ok ]") >= 3
    assert len(read_transcript(transcript.read_bytes())) > 0
    for line in keylog.read_text().splitlines():
        KeyMaterial.from_keylog_line(line)


def test_scenario_json_output(capsys):
    code, out, err = run_cli(capsys, "scenario", "cbc-forge-mitigated",
                             "--json")
    assert code == 0
    report = json.loads(out)
    assert report["passed"] is True
    assert all(check["passed"] for check in report["checks"])
    assert any(e["kind"] == "TamperDetected" for e in report["events"])


def test_scenario_unknown_name_is_usage_error(capsys):
    code, out, err = run_cli(capsys, "scenario", "no-such-thing")
    assert code == 2
    assert "no-such-thing" in err


# --- dissect --------------------------------------------------------------------------


def test_dissect_renders_transcript_and_random_bytes(capsys, tmp_path):
    transcript = tmp_path / "run.bin"
    keylog = tmp_path / "keys.log"
    run_cli(capsys, "scenario", "deletion-artifacts",
            "--transcript", str(transcript), "--keylog", str(keylog))

    code, out, err = run_cli(capsys, "dissect", str(transcript),
                             "--keys", str(keylog))
    assert code == 0
    assert "record" in out and "frame-header" in out

    code, out, err = run_cli(capsys, "dissect", str(transcript), "--json")
    assert code == 0
    assert json.loads(out)["label"] == "transcript"

    noise = tmp_path / "noise.bin"
    noise.write_bytes(bytes(range(256)) * 7)
    code, out, err = run_cli(capsys, "dissect", str(noise))
    assert code == 0

    code, out, err = run_cli(capsys, "dissect", str(tmp_path / "missing"))
    assert code == 2 and "error" in err


# --- identity -------------------------------------------------------------------------


def test_identity_command_writes_loadable_pair(capsys, tmp_path):
    phone_file = tmp_path / "phone.id"
    watch_file = tmp_path / "watch.id"
    code, out, err = run_cli(capsys, "identity", str(phone_file),
                             str(watch_file), "--seed", "5")
    assert code == 0
    from witchstack.identity import load_identity
    phone_id = load_identity(str(phone_file))
    watch_id = load_identity(str(watch_file))
    assert phone_id.role == "phone" and watch_id.role == "watch"


# --- live endpoints driven end to end ---------------------------------------------------


@pytest.fixture(scope="module")
def identity_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("ids")
    phone_file = str(root / "phone.id")
    watch_file = str(root / "watch.id")
    assert main(["identity", phone_file, watch_file, "--seed", "99"]) == 0
    return phone_file, watch_file


def test_phone_and_watch_commands_sync_live(capsys, tmp_path, identity_files):
    phone_file, watch_file = identity_files
    link_port = 28631
    api_port = 28632
    config = tmp_path / "phone.toml"
    config.write_text("link_port = %d\napi_port = %d\n"
                      % (link_port, api_port))
    watch_config = tmp_path / "watch.toml"
    watch_config.write_text("sample_interval = 0.3\n")
    api = "http://127.0.0.1:%d" % api_port
    tap = EchoTap()

    phone_thread = threading.Thread(
        target=main, args=(["phone", "--identity", phone_file,
                            "--config", str(config), "--duration", "30"],),
        daemon=True)
    phone_thread.start()

    assert wait_until(lambda: main(["firewall", "list", "--api", api]) == 0,
                      timeout=10.0)
    capsys.readouterr()

    watch_done = {}

    def run_watch():
        watch_done["code"] = main([
            "watch", "--identity", watch_file,
            "--connect", "127.0.0.1:%d" % link_port,
            "--config", str(watch_config),
            "--fetch", "127.0.0.1:%d" % tap.port,
            "--duration", "2.0"])

    watch_thread = threading.Thread(target=run_watch, daemon=True)
    watch_thread.start()
    watch_thread.join(25.0)
    assert watch_done.get("code") == 0
    capsys.readouterr()     # drop the watch thread's own output

    code, out, err = run_cli(capsys, "health", "query", "--api", api, "--json")
    assert code == 0
    rows = json.loads(out)
    assert len(rows) >= 1
    assert all(row["type_name"] == "heart-rate" for row in rows)

    code, out, err = run_cli(capsys, "firewall", "counters", "--api", api)
    assert code == 0
    assert "connections=1" in out

    code, out, err = run_cli(capsys, "firewall", "block", "--host", "127.*",
                             "--api", api)
    assert code == 0
    assert "block" in out

    code, out, err = run_cli(capsys, "health", "harden-delete",
                             rows[0]["uuid"], "--api", api)
    assert code == 0
    code, out, err = run_cli(capsys, "health", "query", "--api", api,
                             "--deleted", "--json")
    remaining = [r["uuid"] for r in json.loads(out)]
    assert rows[0]["uuid"] not in remaining

    tap.close()


def test_watch_without_phone_fails_cleanly(capsys, identity_files):
    _, watch_file = identity_files
    code, out, err = run_cli(capsys, "watch", "--identity", watch_file,
                             "--connect", "127.0.0.1:1", "--timeout", "1.0")
    assert code == 1
    assert "failed" in err


def test_phone_requires_readable_identity(capsys, tmp_path):
    missing = str(tmp_path / "nope.id")
    code, out, err = run_cli(capsys, "phone", "--identity", missing)
    assert code == 2


# --- offline store mode -----------------------------------------------------------------


def test_health_store_file_mode(capsys, tmp_path):
    from witchstack.healthstore import HealthSample

    store_path = str(tmp_path / "log.whs")
    store = HealthStore()
    keep = HealthSample(uuid=bytes(range(16)),
                        sample_type=SAMPLE_TYPE_HEART_RATE, value=70.0,
                        unit="count/min", start_time=100.0, end_time=100.0)
    store.insert(keep)
    store.save(store_path, PassphraseKeyProvider("pw"))

    code, out, err = run_cli(capsys, "health", "query", "--store", store_path,
                             "--passphrase", "pw")
    assert code == 0 and "heart-rate" in out

    code, out, err = run_cli(capsys, "health", "harden-delete",
                             keep.uuid.hex(), "--store", store_path,
                             "--passphrase", "pw")
    assert code == 0

    code, out, err = run_cli(capsys, "health", "query", "--store", store_path,
                             "--passphrase", "pw", "--deleted", "--json")
    assert code == 0 and json.loads(out) == []

    code, out, err = run_cli(capsys, "health", "harden-delete", "ff" * 16,
                             "--store", store_path, "--passphrase", "pw")
    assert code == 1

    code, out, err = run_cli(capsys, "health", "query", "--store", store_path,
                             "--passphrase", "wrong")
    assert code == 1
