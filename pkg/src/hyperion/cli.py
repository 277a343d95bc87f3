"""Command-line entry points: ``hyperion`` (daemon, compiler) and ``hyperion-cli``.

Client exit codes: 0 OK, 1 NotFound, 2 auth or protocol error, 3 timeout.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from . import client as cl
from .compiler import DEFAULT_SLOT_BUDGET, analyze_dependencies, plan_to_dot, plan_to_text, schedule
from .config import Config, ConfigError, parse_endpoint, parse_token
from .ebpf import DecodeError, VerifierError, assemble, decode, verify
from .ebpf.isa import Program
from .programs import SOURCES, bundled
from .wire import Status

EXIT_OK = 0
EXIT_NOT_FOUND = 1
EXIT_ERROR = 2
EXIT_TIMEOUT = 3


# -- shared ---------------------------------------------------------------------------


def _setup_logging(verbose: int) -> None:
    level = logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load_program_file(path: str) -> Program:
    """``builtin:NAME``, assembly text (``.s``/``.asm``) or raw little-endian bytecode."""
    if path.startswith("builtin:"):
        return bundled(path[len("builtin:"):])
    p = Path(path)
    if p.suffix in (".s", ".asm"):
        return assemble(p.read_text(encoding="utf-8"), name=p.stem)
    return decode(p.read_bytes(), name=p.stem)


def _exit_for(status: int) -> int:
    if status == Status.OK:
        return EXIT_OK
    if status == Status.NOT_FOUND:
        return EXIT_NOT_FOUND
    return EXIT_ERROR


def _show_value(value: bytes) -> str:
    text = value.rstrip(b"\x00")
    if text and all(32 <= b < 127 for b in text):
        return text.decode("ascii")
    return value.hex()


# -- daemon ---------------------------------------------------------------------------


def daemon_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="hyperion", description="DPU emulator daemon and program compiler")
    parser.add_argument("-c", "--config", help="YAML config file")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the UDP daemon")
    serve.add_argument("--bind", help="host:port (overrides config and HYPERION_BIND)")

    comp = sub.add_parser("compile", help="verify and compile a program image")
    comp.add_argument("image", help=f"bytecode file, .s/.asm source or builtin:NAME ({', '.join(sorted(SOURCES))})")
    comp.add_argument("--lanes", type=int, default=None, help="lane width (default from config)")
    comp.add_argument("--budget", type=int, default=DEFAULT_SLOT_BUDGET)
    comp.add_argument("--dump", choices=("text", "dot"), help="print the stage plan")

    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        config = Config.load(args.config)
        if args.command == "serve":
            from .server import serve as run_server

            bind = parse_endpoint(args.bind) if args.bind else None
            run_server(config, bind)
            return EXIT_OK
        return _compile(args, config)
    except (ConfigError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


def _compile(args, config: Config) -> int:
    lanes = args.lanes if args.lanes is not None else config.slot.lane_width
    try:
        program = load_program_file(args.image)
        vp = verify(program)
    except (DecodeError, VerifierError) as err:
        print(f"rejected: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR
    graph = analyze_dependencies(vp)
    plan = schedule(graph, lanes)
    if args.dump == "dot":
        sys.stdout.write(plan_to_dot(graph, plan))
        return EXIT_OK
    if args.dump == "text":
        sys.stdout.write(plan_to_text(vp, plan, args.budget))
        return EXIT_OK
    from .compiler import cost

    c = cost(plan, args.budget)
    print(f"program={program.name} insns={len(program)} max_steps={vp.max_instructions_executed} "
          f"stack={vp.stack_usage}")
    print(f"stages={c.stage_count} logic_units={c.logic_units} budget={c.budget} "
          f"fits={'yes' if c.fits else 'no'} lanes={lanes} critical_path={graph.longest_path()}")
    return EXIT_OK


# -- client ---------------------------------------------------------------------------


def _client_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--endpoint", help="daemon host:port")
    common.add_argument("--tenant", type=int, help="tenant id")
    common.add_argument("--token", help="auth token, 64 hex digits (prefer HYPERION_TOKEN)")
    common.add_argument("--timeout", type=float, help="per-attempt timeout in seconds")
    common.add_argument("--seed", type=int, help="workload seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="hyperion-cli", description="client for the DPU emulator")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("get", "del"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--slot", type=int, required=True)
        p.add_argument("key", type=int)
    p = sub.add_parser("put", parents=[common])
    p.add_argument("--slot", type=int, required=True)
    p.add_argument("--hex", action="store_true", help="value is hex encoded")
    p.add_argument("key", type=int)
    p.add_argument("value", help="up to 128 bytes, zero padded")

    p = sub.add_parser("load-prog", parents=[common])
    p.add_argument("image", help="bytecode file, .s/.asm source or builtin:NAME")

    p = sub.add_parser("create-slot", parents=[common])
    p.add_argument("--program", required=True, help="program id (decimal or 0x hex)")
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--budget", type=int, default=DEFAULT_SLOT_BUDGET)

    p = sub.add_parser("delete-slot", parents=[common])
    p.add_argument("--slot", type=int, required=True)

    p = sub.add_parser("stats", parents=[common])
    p.add_argument("--slot", type=int, required=True)

    p = sub.add_parser("bench", parents=[common])
    p.add_argument("--spec", required=True, help="WorkloadSpec YAML")
    p.add_argument("--slot", type=int, action="append", help="target slot (repeatable; overrides spec)")
    p.add_argument("--trace", help="CSV trace output (overrides spec)")
    p.add_argument("--preload", action="store_true", help="PUT every key before measuring")
    p.add_argument("--local", action="store_true",
                   help="run against an in-process emulator instead of a daemon")
    p.add_argument("--local-slots", type=int, default=1, help="kv slots for --local")
    p.add_argument("--height", type=int, default=3, help="tree height for --local")

    p = sub.add_parser("logfilter", parents=[common])
    p.add_argument("--slot", type=int, required=True)
    p.add_argument("input", help="log file, one record per line")
    return parser


def _connect(args, config: Config) -> cl.Client:
    endpoint = parse_endpoint(args.endpoint or config.client.endpoint)
    timeout = args.timeout if args.timeout is not None else config.client.timeout_s
    rtt_ns = config.latency.model().net_rtt_ns
    transport = cl.UdpTransport(endpoint, rtt_ns, timeout, config.client.retries)
    token = parse_token(args.token) if args.token else config.client_token()
    tenant = args.tenant if args.tenant is not None else config.client.tenant
    return cl.Client(transport, tenant, token)


def client_main(argv: list[str] | None = None) -> int:
    args = _client_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        config = Config.load(args.config)
        if args.command == "bench" and args.local:
            return _bench_local(args, config)
        client = _connect(args, config)
        return _run_client(args, client, config)
    except cl.ClientTimeout as err:
        print(f"timeout: {err}", file=sys.stderr)
        return EXIT_TIMEOUT
    except cl.ClientError as err:
        print(str(err), file=sys.stderr)
        return _exit_for(err.response.status)
    except cl.BenchAborted as err:
        print(f"bench aborted: {err}", file=sys.stderr)
        return EXIT_ERROR
    except (ConfigError, DecodeError, OSError, ValueError, yaml.YAMLError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


def _run_client(args, client: cl.Client, config: Config) -> int:
    cmd = args.command
    if cmd in ("get", "put", "del"):
        if cmd == "get":
            resp = client.get(args.slot, args.key)
        elif cmd == "put":
            value = bytes.fromhex(args.value) if args.hex else args.value.encode("utf-8")
            resp = client.put(args.slot, args.key, value)
        else:
            resp = client.delete(args.slot, args.key)
        latency = f" latency_us={resp.latency_ns / 1000:.3f}" if resp.latency_ns is not None else ""
        print(f"{resp.status.name}{latency}")
        if resp.ok and cmd == "get":
            print(_show_value(resp.payload))
        elif resp.ok and cmd == "put":
            print("inserted" if resp.payload[:1] == b"\x01" else "replaced")
        elif not resp.ok:
            print(resp.message.detail, file=sys.stderr)
        return _exit_for(resp.message.status)
    if cmd == "load-prog":
        image = load_program_file(args.image).encode()
        print(client.load_program(image))
        return EXIT_OK
    if cmd == "create-slot":
        info = client.create_slot(int(args.program, 0), args.blocks, args.budget)
        print(" ".join(f"{k}={v}" for k, v in info.items()))
        return EXIT_OK
    if cmd == "delete-slot":
        client.delete_slot(args.slot)
        print("deleted")
        return EXIT_OK
    if cmd == "stats":
        s = client.stats(args.slot)
        print(f"requests={s.requests} traps={s.traps} busy_ns={s.busy_ns}")
        return EXIT_OK
    if cmd == "bench":
        spec = _load_spec(args)
        if args.preload:
            failed = cl.preload(client, spec.slots, spec.key_space, spec.concurrency)
            if failed:
                print(f"preload: {failed} puts failed", file=sys.stderr)
                return EXIT_ERROR
        _print_report(cl.bench(spec, client))
        return EXIT_OK
    if cmd == "logfilter":
        report = cl.logfilter_demo(client, args.slot, cl.read_log_records(args.input))
        print(f"records={report.records} matches={report.matches} expected={report.expected_matches} "
              f"persisted={len(report.persisted)} verified={'yes' if report.verified else 'no'}")
        return EXIT_OK if report.verified else EXIT_ERROR
    raise ValueError(f"unknown command {cmd}")


def _load_spec(args, **overrides) -> cl.WorkloadSpec:
    with open(args.spec, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if args.slot:
        data["slots"] = args.slot
    if args.trace:
        data["trace_path"] = args.trace
    if args.seed is not None:
        data["seed"] = args.seed
    data.update(overrides)
    return cl.WorkloadSpec.from_dict(data)


def _bench_local(args, config: Config) -> int:
    from .testbed import kv_testbed

    if args.seed is not None:
        config.sim.seed = args.seed
    bed = kv_testbed(config, slots=args.local_slots, height=args.height)
    spec = _load_spec(args, slots=bed.slots, key_space=bed.key_space)
    if spec.kind not in ("kv-uniform", "kv-zipf"):
        raise ValueError("--local provisions key-value slots only")
    _print_report(cl.bench(spec, bed.client))
    return EXIT_OK


def _print_report(report: cl.BenchReport) -> None:
    for line in report.lines():
        print(line)
    if report.trace_path:
        print(f"trace={report.trace_path}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(client_main() if os.path.basename(sys.argv[0]).startswith("hyperion-cli") else daemon_main())
