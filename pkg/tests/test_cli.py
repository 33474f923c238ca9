import json
import os
import queue
import signal
import subprocess
import sys
import threading
import time

import pytest

from lip.audit import read_audit
from lip.harness import SCENARIO_DIR, bundled_path
from lip.security import KeyPair
from lip.transport import TcpClient, TransportFailure

from conftest import GOLDEN, run_cli


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_run_passes_bundled(name):
    proc = run_cli("run", bundled_path(name))
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "result: PASS" in proc.stdout
    assert "residual coupling: all zero" in proc.stdout


def test_run_json_report_and_audit(tmp_path):
    out = tmp_path / "audit.jsonl"
    proc = run_cli("run", bundled_path("logistics"), "--transport", "socket", "--audit-out", out, "--json-report")
    assert proc.returncode == 0
    report = json.loads(proc.stdout[proc.stdout.index("{"):])
    assert report["interactions"]["port-closure-1"]["final_state"] == "Dissolved"
    assert report["coupling_max"] == 0 and report["transport"] == "socket"
    assert read_audit(out)[-1].event.value == "Dissolved"


def test_run_exit_codes(tmp_path):
    assert run_cli("run", tmp_path / "nope.lis").returncode == 2
    bad = tmp_path / "bad.lis"
    bad.write_text(json.dumps({"agents": [], "surprise": 1}))
    proc = run_cli("run", bad)
    assert proc.returncode == 3 and "surprise" in proc.stderr
    failing = json.loads(bundled_path("logistics").read_text())
    failing["expected"]["port-closure-1"]["plan_steps"] = 7
    path = tmp_path / "failing.lis"
    path.write_text(json.dumps(failing))
    for name in ("policy.json", "core.json"):
        (tmp_path / name).write_text((SCENARIO_DIR / name).read_text())
    proc = run_cli("run", path)
    assert proc.returncode == 1 and "FAIL" in proc.stdout
    assert run_cli("frobnicate").returncode == 2


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_verify_goldens(name):
    proc = run_cli("verify", GOLDEN[name])
    assert proc.returncode == 0, proc.stdout
    assert proc.stdout.count("PASS") == 6


def test_verify_detects_missing_dissolve(tmp_path):
    lines = GOLDEN["logistics"].read_text().splitlines()
    kept = [l for l in lines if json.loads(l)["event"] != "Dissolved"]
    assert len(kept) == len(lines) - 1
    path = tmp_path / "cut.jsonl"
    path.write_text("\n".join(kept) + "\n")
    proc = run_cli("verify", path, "--json-report", tmp_path / "r.json")
    assert proc.returncode == 1
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["passed"] is False and report["checks"]["mandatory dissolution"]


def test_verify_runtime_errors(tmp_path):
    lines = GOLDEN["logistics"].read_text().splitlines()
    path = tmp_path / "shuffled.jsonl"
    path.write_text("\n".join([lines[1], lines[0]] + lines[2:]) + "\n")
    assert run_cli("verify", path).returncode == 3
    garbage = tmp_path / "garbage.jsonl"
    garbage.write_text("not json\n")
    assert run_cli("verify", garbage).returncode == 3
    assert run_cli("verify", tmp_path / "absent").returncode == 2


def test_keygen(tmp_path):
    key = tmp_path / "agent.key"
    proc = run_cli("keygen", key)
    assert proc.returncode == 0
    assert os.stat(key).st_mode & 0o777 == 0o600
    kp = KeyPair.load(key)
    assert f"fingerprint {kp.agent_id}" in proc.stdout
    assert run_cli("keygen", key).returncode == 2
    assert run_cli("keygen", key, "--force").returncode == 0
    assert KeyPair.load(key).agent_id != kp.agent_id


def test_audit_table_and_raw():
    proc = run_cli("audit", "port-closure-1", GOLDEN["logistics"])
    assert proc.returncode == 0
    assert "IntentReceived" in proc.stdout and "Dissolved" in proc.stdout
    raw = run_cli("audit", "port-closure-1", GOLDEN["logistics"], "--format", "raw")
    docs = [json.loads(l) for l in raw.stdout.splitlines()]
    assert [d["event"] for d in docs][-1] == "Dissolved"
    assert len(docs) == len(read_audit(GOLDEN["logistics"]))
    missing = run_cli("audit", "nope", GOLDEN["logistics"])
    assert missing.returncode == 1 and "nope" in missing.stderr


# -- serve ----------------------------------------------------------------------------


def _lines(stream, q):
    for line in stream:
        q.put(line)


def _wait_for(q, needle, timeout=10.0):
    end = time.monotonic() + timeout
    seen = []
    while time.monotonic() < end:
        try:
            line = q.get(timeout=0.1)
        except queue.Empty:
            continue
        seen.append(line)
        if needle in line:
            return line
    raise AssertionError(f"{needle!r} not logged; saw {seen}")


@pytest.fixture
def server(tmp_path):
    cfg = tmp_path / "lip.json"
    cfg.write_text(json.dumps({
        "bind": "127.0.0.1:0",
        "policy_path": str(SCENARIO_DIR / "policy.json"),
        "core_path": str(SCENARIO_DIR / "core.json"),
        "audit_dir": str(tmp_path / "audit"),
    }))
    proc = subprocess.Popen([sys.executable, "-m", "lip", "serve", str(cfg)], stderr=subprocess.PIPE, stdout=subprocess.DEVNULL, text=True)
    q: queue.Queue = queue.Queue()
    threading.Thread(target=_lines, args=(proc.stderr, q), daemon=True).start()
    try:
        line = _wait_for(q, "listening on")
        host, port = line.rsplit("listening on ", 1)[1].strip().rsplit(":", 1)
        yield proc, q, host, int(port)
    finally:
        if proc.poll() is None:
            proc.send_signal(signal.SIGTERM)
            proc.wait(10)


def test_serve_authenticates_and_reloads(server):
    proc, q, host, port = server
    good = TcpClient(host, port, KeyPair.derive("cli", "agent"), {"verified": True})
    assert good.connect() == KeyPair.derive("cli", "agent").agent_id
    good.close()

    owner, impostor = KeyPair.derive("cli", "owner"), KeyPair.derive("cli", "impostor")
    bad = TcpClient(host, port, impostor)
    bad.request("enroll", public_key=owner.public_key.hex(), metadata={})
    challenge = bad.request("challenge", agent_id=owner.agent_id)
    with pytest.raises(TransportFailure):
        bad.request("respond", challenge_id=challenge["challenge_id"], signature=impostor.sign(bytes.fromhex(challenge["nonce"])).hex())
    bad.close()

    proc.send_signal(signal.SIGHUP)
    rules = len(json.loads((SCENARIO_DIR / "policy.json").read_text())["rules"])
    assert f"policy reloaded: {rules} rules" in _wait_for(q, "policy reloaded")
    proc.send_signal(signal.SIGTERM)
    assert proc.wait(10) == 0


def test_serve_without_config():
    env = {k: v for k, v in os.environ.items() if k != "LIP_CONFIG"}
    proc = subprocess.run([sys.executable, "-m", "lip", "serve"], capture_output=True, text=True, env=env, timeout=30)
    assert proc.returncode == 2


def test_serve_bad_config(tmp_path):
    cfg = tmp_path / "lip.json"
    cfg.write_text(json.dumps({"bind": "127.0.0.1:0", "nonsense": True}))
    assert run_cli("serve", cfg).returncode == 3
