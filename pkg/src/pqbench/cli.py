"""``pqbench`` command line.

Settings merge as defaults, then ``PQBENCH_OUTPUT_ROOT``, then ``--config``,
then flags. The last stderr line is always ``status=<ok|error> code=<...>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .compute_bench import bench_cpu, bench_cpu_external, bench_memory
from .errors import BenchError, ConfigError
from .model import (
    BenchConfig,
    Capability,
    CpuOpRecord,
    HandshakeRecord,
    MemOpRecord,
    Mode,
    Role,
    SpeedRecord,
    builtin_registry,
    load_config_file,
    load_registry,
)
from .provider import mock_providers
from .results import FilterSet, build_report, emit_report, parse_liboqs_speed_csv, parse_openssl_speed
from .storage import (
    CPU_DIR,
    HANDSHAKE_DIR,
    MEM_DIR,
    SPEED_DIR,
    RunWriter,
    atomic_write,
    collect_records,
    next_run_index,
    records_to_csv,
)

log = logging.getLogger("pqbench")

OUTPUT_ROOT_ENV = "PQBENCH_OUTPUT_ROOT"
PARSED_DIR = "parsed"
REPORT_DIR = "report"

# flag dest -> BenchConfig field
_CONFIG_FLAGS = {
    "machine_id": "machine_id",
    "runs": "num_runs",
    "out": "output_root",
    "seed": "seed",
    "cpu_window": "cpu_window_seconds",
    "role": "role",
    "peer": "peer_address",
    "control_port": "control_port",
    "data_port": "data_port",
    "window": "tls_window_seconds",
    "timeout": "control_timeout_seconds",
    "max_retries": "max_retries",
    "bind": "bind_address",
    "work_scale": "mock_work_scale",
}


class UsageError(ConfigError):
    code = "USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--machine-id", help="label isolating this device's results")
    g.add_argument("--runs", type=int, help="number of runs")
    g.add_argument("--config", type=Path, help="JSON file with BenchConfig fields")
    g.add_argument("--out", help="output root (default test_data/up_results)")
    g.add_argument("--registry", type=Path, help="algorithm registry JSON (default: built-in)")
    g.add_argument("--algorithms", nargs="+", metavar="ID", help="restrict to these algorithm ids")
    g.add_argument("--enable", nargs="+", default=[], metavar="ID",
                   help="switch on algorithms shipped disabled (globs allowed, e.g. 'HQC-*')")
    g.add_argument("--mock", action="store_true", help="use the deterministic mock providers")
    g.add_argument("--seed", type=int, help="mock provider seed (default 42)")
    g.add_argument("--work-scale", type=float, help="multiplier on mock operation cost")
    g.add_argument("--interactive", action="store_true", help="prompt for the main settings")
    g.add_argument("-v", "--verbose", action="count", default=0)


def _compute(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("computational")
    g.add_argument("--cpu-window", type=float, help="seconds per CPU measurement window")
    g.add_argument("--adapter", metavar="TEMPLATE", help="external speed command ({alg} {window} {run})")
    g.add_argument("--massif-command", metavar="TEMPLATE",
                   help="external profiler command ({alg} {op} {run} {out})")
    g.add_argument("--massif-fixtures", type=Path, metavar="DIR", help="pre-captured <alg>_<op>_run<k>.massif files")
    g.add_argument("--skip-cpu", action="store_true")
    g.add_argument("--skip-memory", action="store_true")


def _tls(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tls")
    g.add_argument("--role", type=str.upper, choices=[r.value for r in Role])
    g.add_argument("--peer", metavar="HOST[:PORT]")
    g.add_argument("--bind", help="server listen address")
    g.add_argument("--control-port", type=int)
    g.add_argument("--data-port", type=int)
    g.add_argument("--window", type=float, help="seconds per TLS measurement window")
    g.add_argument("--timeout", type=float, help="control timeout in seconds")
    g.add_argument("--max-retries", type=int)
    g.add_argument("--keys-dir", type=Path, help="credential directory (default <out>/credentials)")
    g.add_argument("--speed-adapter", metavar="TEMPLATE", help="external speed command for the TLS speed bench")
    g.add_argument("--skip-speed", action="store_true")


def _report(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("report")
    g.add_argument("--top", type=int, default=10)
    g.add_argument("--prefer-standardised", action="store_true")
    g.add_argument("--exclude", nargs="+", default=[], metavar="ID")
    g.add_argument("--handshake-mode", choices=[m.value for m in Mode], default=Mode.FIRST_USE.value)
    g.add_argument("--report-dir", type=Path, help="default <machine dir>/report")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pqbench", description="Post-quantum cryptography benchmark orchestrator.")
    parser.add_argument("--version", action="version", version=f"pqbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-keys", help="pre-generate mock certificates and keys")
    _common(p)
    p.add_argument("--keys-dir", type=Path)

    p = sub.add_parser("compute-bench", help="CPU and memory benchmarks")
    _common(p)
    _compute(p)

    p = sub.add_parser("tls-bench", help="handshake (and, as client, speed) benchmarks")
    _common(p)
    _tls(p)

    p = sub.add_parser("parse", help="validate run files or convert external tool output")
    _common(p)
    p.add_argument("--input", type=Path, help="raw tool output to convert")
    p.add_argument("--kind", choices=["liboqs-speed", "openssl-speed", "massif", "s-time"])
    p.add_argument("--algorithm", help="algorithm id for liboqs-speed / massif input")
    p.add_argument("--operation", help="operation for massif input")
    p.add_argument("--sig", help="signature id for s-time input")
    p.add_argument("--kem", help="KEM id for s-time input")

    p = sub.add_parser("report", help="average runs, rank and write the summary")
    _common(p)
    _report(p)
    p.add_argument("--in", dest="input", type=Path, help="directory of record CSVs (default: machine dir)")

    p = sub.add_parser("full-run", help="every stage for the configured role")
    _common(p)
    _compute(p)
    _tls(p)
    _report(p)
    return parser


# -- settings -----------------------------------------------------------------


def resolve_config(args: argparse.Namespace, environ=os.environ) -> BenchConfig:
    values: dict = {}
    if environ.get(OUTPUT_ROOT_ENV):
        values["output_root"] = environ[OUTPUT_ROOT_ENV]
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for dest, name in _CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    if getattr(args, "interactive", False):
        values.update(_prompt(values))
    return BenchConfig.from_mapping(values)


def _prompt(current: dict) -> dict:
    out = {}
    for name, cast in (("machine_id", str), ("num_runs", int), ("role", str)):
        raw = input(f"{name} [{current.get(name, getattr(BenchConfig, name))}]: ").strip()
        if raw:
            try:
                out[name] = cast(raw)
            except ValueError:
                raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return out


def resolve_registry(args: argparse.Namespace):
    reg = load_registry(args.registry) if args.registry else builtin_registry()
    if args.enable:
        reg = reg.enable(args.enable)
    if args.algorithms:
        reg = reg.subset(a for item in args.algorithms for a in item.split(","))
    return reg


def _providers(args, reg, cfg: BenchConfig):
    if not args.mock:
        return None
    return mock_providers(reg, cfg.seed, cfg.mock_work_scale)


def _keys_dir(args, cfg: BenchConfig) -> Path:
    return args.keys_dir or Path(cfg.output_root) / "credentials"


# -- commands -----------------------------------------------------------------


def cmd_gen_keys(args, cfg, reg) -> None:
    from .tls.handshake import generate_credentials

    manifest = generate_credentials(reg, _keys_dir(args, cfg), cfg.seed)
    print(f"credentials: {len(manifest)} signature algorithms -> {manifest.path}")


def cmd_compute_bench(args, cfg, reg) -> None:
    mdir = cfg.machine_dir
    if not args.skip_cpu:
        writer = RunWriter(mdir / CPU_DIR, CpuOpRecord)
        first = next_run_index(mdir / CPU_DIR)
        if args.mock:
            bench_cpu(reg, _providers(args, reg, cfg), cfg, first_run=first, on_algorithm=writer)
        elif args.adapter:
            bench_cpu_external(reg, args.adapter, cfg, first_run=first, on_algorithm=writer)
        else:
            raise ConfigError("CPU bench needs --mock or --adapter TEMPLATE")
        for p in writer.paths:
            print(f"cpu: {p}")
    if not args.skip_memory:
        sources = dict(profiler_command=args.massif_command, fixture_dir=args.massif_fixtures,
                       mock=args.mock and not (args.massif_command or args.massif_fixtures))
        if not any(sources.values()):
            log.warning("memory bench skipped: no --massif-command, --massif-fixtures or --mock")
            return
        writer = RunWriter(mdir / MEM_DIR, MemOpRecord)
        bench_memory(reg, sources["profiler_command"], cfg, fixture_dir=sources["fixture_dir"],
                     mock=sources["mock"], first_run=next_run_index(mdir / MEM_DIR), on_algorithm=writer)
        for p in writer.paths:
            print(f"memory: {p}")


def _manifest(args, cfg, reg):
    from .tls.handshake import generate_credentials, load_manifest

    path = _keys_dir(args, cfg) / "manifest.json"
    if path.exists():
        return load_manifest(path)
    log.info("no credentials at %s; generating", path.parent)
    return generate_credentials(reg, path.parent, cfg.seed)


def cmd_tls_bench(args, cfg, reg) -> None:
    from .tls.protocol import build_plan
    from .tls.runner import bench_tls_speed, bench_tls_speed_external, run_handshake_client, run_handshake_server

    if cfg.role is Role.STANDALONE:
        raise ConfigError("tls-bench needs --role server or --role client")
    if not args.mock:
        raise ConfigError("handshake tests run on the mock providers; pass --mock")
    mdir = cfg.machine_dir
    manifest = _manifest(args, cfg, reg)
    providers = _providers(args, reg, cfg)
    if cfg.role is Role.SERVER:
        first = next_run_index(mdir / HANDSHAKE_DIR)
        plan = build_plan(reg, cfg.num_runs, cfg.tls_window_seconds, first_run=first)
        slog = run_handshake_server(cfg, reg, manifest, plan, providers=providers,
                                    on_listening=lambda: print("listening", flush=True))
        path = mdir / "tls" / "server_logs" / f"session_{first}.json"
        doc = {"peer_machine_id": slog.peer_machine_id, "completed": slog.completed, "skipped": slog.skipped,
               "retries": [list(r) for r in slog.retries], "served": slog.served,
               "handshake_failures": slog.handshake_failures}
        atomic_write(path, json.dumps(doc, indent=2) + "\n")
        print(f"server: {len(slog.completed)} tests completed, {len(slog.skipped)} skipped -> {path}")
        return

    writer = RunWriter(mdir / HANDSHAKE_DIR, HandshakeRecord)
    first = next_run_index(mdir / HANDSHAKE_DIR)
    plan = build_plan(reg, cfg.num_runs, cfg.tls_window_seconds, first_run=first)
    skipped, failures = [], {}
    records = run_handshake_client(cfg, reg, manifest, plan, providers=providers, skipped=skipped,
                                   failures=failures, on_record=lambda r: writer([r]))
    for p in writer.paths:
        print(f"handshake: {p}")
    print(f"client: {len(records)} records, {len(skipped)} skipped, "
          f"{sum(failures.values())} failed handshakes")
    if args.skip_speed:
        return
    speed = RunWriter(mdir / SPEED_DIR, SpeedRecord)
    sfirst = next_run_index(mdir / SPEED_DIR)
    if args.speed_adapter:
        bench_tls_speed_external(reg, args.speed_adapter, cfg, first_run=sfirst, on_algorithm=speed)
    else:
        bench_tls_speed(reg, providers, cfg, first_run=sfirst, on_algorithm=speed)
    for p in speed.paths:
        print(f"speed: {p}")


def _raw_records(args, cfg, reg) -> tuple[type, list]:
    from .compute_bench import parse_massif, peak_memory
    from .model import MemOpRecord as Mem
    from .model import Operation
    from .tls.stime import parse_s_time_log

    try:
        text = args.input.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from None
    mdir = cfg.machine_dir
    if args.kind == "liboqs-speed":
        return CpuOpRecord, parse_liboqs_speed_csv(text, args.algorithm, next_run_index(mdir / CPU_DIR))
    if args.kind == "openssl-speed":
        return SpeedRecord, parse_openssl_speed(text, next_run_index(mdir / SPEED_DIR))
    if args.kind == "massif":
        if not (args.algorithm and args.operation):
            raise ConfigError("massif input needs --algorithm and --operation")
        heap, ext, stack = peak_memory(parse_massif(text))
        return Mem, [Mem(args.algorithm, Operation.from_label(args.operation), next_run_index(mdir / MEM_DIR),
                         heap, ext, stack)]
    if args.kind == "s-time":
        if not (args.sig and args.kem):
            raise ConfigError("s-time input needs --sig and --kem")
        run = next_run_index(mdir / HANDSHAKE_DIR)
        return HandshakeRecord, [
            HandshakeRecord(args.sig, args.kem, Mode.parse(mode), run, s.connections, max(s.real_seconds, 1e-9),
                            s.user_connections_per_sec)
            for mode, s in parse_s_time_log(text).items()
        ]
    raise ConfigError("--input needs --kind")


def cmd_parse(args, cfg, reg) -> None:
    mdir = cfg.machine_dir
    if args.input is not None:
        rtype, records = _raw_records(args, cfg, reg)
        if not records:
            print("parse: no records in input")
            return
        from .storage import SUBDIRS

        RunWriter(mdir / SUBDIRS[rtype], rtype).add(records)
        print(f"parse: {len(records)} {rtype.__name__} records into {mdir / SUBDIRS[rtype]}")
        return
    found = collect_records(mdir, exclude=[mdir / PARSED_DIR, mdir / REPORT_DIR])
    names = {CpuOpRecord: "cpu", MemOpRecord: "memory", HandshakeRecord: "handshake", SpeedRecord: "speed"}
    for rtype, recs in found.items():
        path = mdir / PARSED_DIR / f"{names[rtype]}.csv"
        atomic_write(path, records_to_csv(recs, rtype))
        print(f"parse: {len(recs)} {names[rtype]} records -> {path}")


def cmd_report(args, cfg, reg) -> None:
    mdir = cfg.machine_dir
    report_dir = args.report_dir or mdir / REPORT_DIR
    source = getattr(args, "input", None) or mdir
    found = collect_records(source, exclude=[mdir / PARSED_DIR, report_dir])
    records = [r for recs in found.values() for r in recs]
    if args.top < 1:
        raise ConfigError("--top must be >= 1")
    filters = FilterSet(args.prefer_standardised, tuple(x for item in args.exclude for x in item.split(",")))
    report = build_report(records, reg, filters, args.top, Mode.parse(args.handshake_mode))
    paths = emit_report(report, report_dir)
    print(f"report: {len(records)} records -> {paths[-1]}")


def cmd_full_run(args, cfg, reg) -> None:
    if cfg.role is Role.STANDALONE:
        cmd_compute_bench(args, cfg, reg)
    else:
        cmd_tls_bench(args, cfg, reg)
        if cfg.role is Role.SERVER:
            return
    cmd_parse(argparse.Namespace(**{**vars(args), "input": None}), cfg, reg)
    cmd_report(argparse.Namespace(**{**vars(args), "input": None}), cfg, reg)


COMMANDS = {
    "gen-keys": cmd_gen_keys,
    "compute-bench": cmd_compute_bench,
    "tls-bench": cmd_tls_bench,
    "parse": cmd_parse,
    "report": cmd_report,
    "full-run": cmd_full_run,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help / --version
        code = exc.code if isinstance(exc.code, int) else 0
        print(f"status={'ok' if code == 0 else 'error'} code={'OK' if code == 0 else 'USAGE'}", file=sys.stderr)
        return code
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"status=error code={exc.code}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        reg = resolve_registry(args)
        COMMANDS[args.command](args, cfg, reg)
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"status=error code={exc.code}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("status=error code=INTERRUPTED", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("unexpected failure")
        print(f"status=error code=INTERNAL {type(exc).__name__}", file=sys.stderr)
        return 2
    print("status=ok code=OK", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
