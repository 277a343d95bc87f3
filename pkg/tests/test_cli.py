from __future__ import annotations

import socket
import threading

import pytest
import yaml
from conftest import TOKEN_A, make_config

from hyperion.cli import client_main, daemon_main
from hyperion.config import Config, ConfigError, parse_endpoint, parse_token
from hyperion.server import DatagramServer, Emulator


@pytest.fixture
def daemon(monkeypatch):
    emu = Emulator(make_config("fixed-max"))
    server = DatagramServer(emu, ("127.0.0.1", 0))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    monkeypatch.setenv("HYPERION_TOKEN", TOKEN_A.hex())
    yield emu, f"127.0.0.1:{server.address[1]}"
    server.close()
    thread.join(timeout=2)
    emu.close()


def cli(capsys, *argv) -> tuple[int, str, str]:
    code = client_main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _kv_slot(capsys, endpoint: str) -> int:
    code, out, _ = cli(capsys, "create-slot", "--endpoint", endpoint, "--tenant", "1",
                       "--program", "0x8000", "--blocks", "64", "--budget", "512")
    assert code == 0
    fields = dict(part.split("=") for part in out.split())
    return int(fields["slot_id"])


def test_kv_commands_and_exit_codes(daemon, capsys):
    _, endpoint = daemon
    slot = str(_kv_slot(capsys, endpoint))
    common = ["--endpoint", endpoint, "--tenant", "1", "--slot", slot]
    code, out, _ = cli(capsys, "put", *common, "7", "x" * 128)
    assert code == 0 and "inserted" in out
    code, out, _ = cli(capsys, "get", *common, "7")
    assert code == 0 and out.splitlines() == ["OK latency_us=9.000", "x" * 128]
    code, out, _ = cli(capsys, "get", *common, "8")
    assert code == 1 and out.startswith("NOT_FOUND")
    assert cli(capsys, "del", *common, "7")[0] == 0
    assert cli(capsys, "get", *common, "7")[0] == 1


def test_load_prog_and_stats(daemon, capsys, tmp_path):
    _, endpoint = daemon
    src = tmp_path / "ret.s"
    src.write_text("mov r0, 0\nexit\n")
    code, out, _ = cli(capsys, "load-prog", "--endpoint", endpoint, "--tenant", "1", str(src))
    assert (code, out.strip()) == (0, "1")
    image = tmp_path / "ret.bin"
    image.write_bytes(bytes.fromhex("b700000000000000" "9500000000000000"))
    assert cli(capsys, "load-prog", "--endpoint", endpoint, "--tenant", "1", str(image))[1].strip() == "2"
    code, out, _ = cli(capsys, "create-slot", "--endpoint", endpoint, "--tenant", "1",
                       "--program", "2", "--blocks", "1")
    slot = dict(p.split("=") for p in out.split())["slot_id"]
    code, out, _ = cli(capsys, "stats", "--endpoint", endpoint, "--tenant", "1", "--slot", slot)
    assert (code, out.strip()) == (0, "requests=0 traps=0 busy_ns=0")


def test_bad_token_exits_2_without_echoing_it(daemon, capsys, monkeypatch):
    _, endpoint = daemon
    wrong = "ab" * 32
    monkeypatch.setenv("HYPERION_TOKEN", wrong)
    code, out, err = cli(capsys, "load-prog", "--endpoint", endpoint, "--tenant", "1", "builtin:echo")
    assert code == 2 and "AUTH_FAILED" in err
    assert wrong not in out + err and TOKEN_A.hex() not in out + err


def test_unverifiable_program_exits_2(daemon, capsys, tmp_path):
    _, endpoint = daemon
    src = tmp_path / "loop.s"
    src.write_text("mov r0, 0\nx:\nja x\nexit\n")
    code, _, err = cli(capsys, "load-prog", "--endpoint", endpoint, "--tenant", "1", str(src))
    assert code == 2 and "UnboundedLoop" in err


def test_timeout_exits_3(capsys):
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))  # bound but never answers
    try:
        code, _, err = cli(capsys, "get", "--endpoint", f"127.0.0.1:{sock.getsockname()[1]}",
                           "--tenant", "1", "--slot", "1", "--timeout", "0.02", "5")
    finally:
        sock.close()
    assert code == 3 and "timeout" in err


def test_logfilter_command(daemon, capsys, tmp_path):
    emu, endpoint = daemon
    slot = emu.manager.create_slot(1, TOKEN_A, emu.manager.builtins["logfilter"], 16).slot_id
    log = tmp_path / "auth.log"
    log.write_text("\n".join(["sshd auth-ok user=a", "sshd auth-fail user=b", "cron job",
                              "sshd auth-fail user=c"]) + "\n")
    code, out, _ = cli(capsys, "logfilter", "--endpoint", endpoint, "--tenant", "1", "--slot", str(slot),
                       str(log))
    assert code == 0
    assert out.strip() == "records=4 matches=2 expected=2 persisted=2 verified=yes"


def test_remote_bench_with_preload(daemon, capsys, tmp_path):
    _, endpoint = daemon
    slot = _kv_slot(capsys, endpoint)
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"key_space": 50, "op_count": 200, "concurrency": 4, "slots": [slot]}))
    trace = tmp_path / "t.csv"
    code, out, _ = cli(capsys, "bench", "--endpoint", endpoint, "--tenant", "1", "--spec", str(spec),
                       "--preload", "--trace", str(trace))
    assert code == 0 and "ops=200 errors=0" in out
    assert trace.read_text().splitlines()[0] == "request_id,opcode,key,submit_ns,complete_ns,status"


def test_local_bench_fixed_max(capsys, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"latency": {"distribution": "fixed-max"}}))
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"op_count": 500}))
    code, out, _ = cli(capsys, "bench", "-c", str(cfg), "--spec", str(spec), "--local", "--height", "3")
    assert code == 0
    assert "p50=25.000" in out and "throughput=40000.0 ops/s" in out


def test_compile_builtin(capsys):
    assert daemon_main(["compile", "builtin:btree-get"]) == 0
    out = capsys.readouterr().out
    fields = dict(p.split("=") for p in out.split())
    assert int(fields["stages"]) > 100 and int(fields["logic_units"]) > 256 and fields["fits"] == "no"
    assert int(fields["stages"]) >= int(fields["critical_path"])


@pytest.mark.parametrize("dump,marker", [("text", "stage    0 |"), ("dot", "digraph pipeline")])
def test_compile_dumps(capsys, dump, marker):
    assert daemon_main(["compile", "builtin:echo", "--dump", dump, "--lanes", "2"]) == 0
    assert marker in capsys.readouterr().out


def test_compile_rejects_bad_program(capsys, tmp_path):
    src = tmp_path / "bad.s"
    src.write_text("mov r0, r3\nexit\n")
    assert daemon_main(["compile", str(src)]) == 2
    assert "UninitializedRegister" in capsys.readouterr().err


# -- config ----------------------------------------------------------------------------


def test_config_from_yaml(tmp_path, monkeypatch):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({
        "sim": {"seed": 7},
        "devices": {"count": 2, "queue_depth": 8},
        "server": {"bind": "0.0.0.0:9000"},
        "tenants": [{"id": 3, "token": TOKEN_A.hex()}],
        "client": {"token": TOKEN_A.hex()},
    }))
    cfg = Config.load(str(path))
    assert cfg.sim.seed == 7 and cfg.devices.device_config().device_count == 2
    assert cfg.tenants[0].tenant_id == 3 and cfg.tenants[0].auth_token == TOKEN_A
    assert cfg.bind_address() == ("0.0.0.0", 9000)
    monkeypatch.setenv("HYPERION_BIND", "127.0.0.1:1234")
    assert cfg.bind_address() == ("127.0.0.1", 1234)
    assert cfg.client_token() == TOKEN_A
    assert TOKEN_A.hex() not in repr(cfg)


@pytest.mark.parametrize("data", [
    {"bogus": {}}, {"sim": {"speed": 1}}, {"tenants": [{"id": 1}]}, {"tenants": [{"id": 1, "token": "abc"}]},
])
def test_config_errors(data):
    with pytest.raises((ConfigError, ValueError)):
        Config.from_dict(data)


def test_token_and_endpoint_parsing():
    assert parse_token("00" * 32) == bytes(32)
    with pytest.raises(ConfigError):
        parse_token("zz" * 32)
    assert parse_endpoint("[::1]:80") == ("::1", 80)
    assert parse_endpoint(":7474") == ("127.0.0.1", 7474)
    with pytest.raises(ConfigError):
        parse_endpoint("localhost")
