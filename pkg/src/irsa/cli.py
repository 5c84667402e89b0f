"""Command line entry point: irsa-bench.

Subcommands: ``simulate`` (Monte Carlo at one operating point), ``sweep``
(one axis, CSV table), ``theta`` (within-RE success-probability table),
``de`` (density-evolution fixed points / inflection load) and ``presets``
(list shipped config files). ``--config`` takes a file path or the name
of a shipped preset.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from . import bench
from .de import ThetaTable


def _preset_dir():
    return resources.files("irsa").joinpath("presets")


def list_presets() -> list[tuple[str, str]]:
    entries = []
    for item in sorted(_preset_dir().iterdir(), key=lambda p: p.name):
        if not item.name.endswith(".cfg"):
            continue
        first = item.read_text(encoding="utf-8").splitlines()[0]
        desc = first.lstrip("# ").strip() if first.startswith("#") else ""
        entries.append((item.name[:-4], desc))
    return entries


def resolve_config(arg: str) -> str:
    """Read config text from a path, or from a shipped preset by name."""
    path = Path(arg)
    if path.exists():
        return path.read_text(encoding="utf-8")
    name = arg[:-4] if arg.endswith(".cfg") else arg
    candidate = _preset_dir().joinpath(name + ".cfg")
    if candidate.is_file():
        return candidate.read_text(encoding="utf-8")
    raise SystemExit(f"config {arg!r}: no such file or preset "
                     f"(see 'irsa-bench presets')")


def _emit(out: str | None, header, rows) -> None:
    text = bench.render_csv(header, rows)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _add_common(sub):
    sub.add_argument("--config", required=True,
                     help="config file path or preset name")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")
    sub.add_argument("--trials", type=int, default=None,
                     help="override the trial count")
    sub.add_argument("--out", default=None, help="CSV output path (default stdout)")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker processes for Monte Carlo trials")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="irsa-bench",
        description="IRSA random-access simulator and density-evolution runner")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("simulate", "Monte Carlo throughput/PLR for one config"),
        ("sweep", "sweep one axis of a config"),
        ("theta", "emit a within-RE success probability table"),
        ("de", "density-evolution fixed points and inflection load"),
    ]:
        _add_common(commands.add_parser(name, help=help_text))
    commands.add_parser("presets", help="list shipped preset configs")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "presets":
        for name, desc in list_presets():
            print(f"{name:28s} {desc}")
        return 0

    cfg = bench.load_config(resolve_config(args.config))
    if args.command == "simulate":
        rows = bench.run_simulate(cfg, trials=args.trials, seed=args.seed,
                                  threads=args.threads)
        _emit(args.out, bench.SIMULATE_COLUMNS, rows)
    elif args.command == "sweep":
        spec = bench.make_sweep_spec(cfg)
        if args.trials is not None:
            spec.trials = args.trials
        rows = bench.run_sweep(spec, seed=args.seed, threads=args.threads)
        _emit(args.out, bench.SWEEP_COLUMNS, rows)
    elif args.command == "theta":
        table = bench.run_theta(cfg, seed=args.seed, trials=args.trials)
        _emit(args.out, ThetaTable.CSV_COLUMNS, table.rows())
    elif args.command == "de":
        rows, traces = bench.run_de(cfg, seed=args.seed, trials=args.trials)
        _emit(args.out, bench.DE_COLUMNS, rows)
        if traces is not None and args.out:
            trace_path = Path(args.out)
            trace_path = trace_path.with_name(trace_path.stem + "_trace.csv")
            bench.write_csv(trace_path, bench.TRACE_COLUMNS, traces)
    return 0


if __name__ == "__main__":
    sys.exit(main())
