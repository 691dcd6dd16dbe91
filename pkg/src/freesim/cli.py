"""Command line: run one scenario, sweep a grid, emit the packet-length sweep, audit a trace."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import metrics
from .engine import ScenarioConfig, format_trace, parse_trace, run_scenario
from .phy import LinkBudget

ALIASES = {"devices": "n_devices", "period": "period_h"}
FIELDS = {f.name: f for f in dataclasses.fields(ScenarioConfig)}


class ConfigError(ValueError):
    pass


def _field_type(name: str):
    f = FIELDS[name]
    default = f.default if f.default is not dataclasses.MISSING else None
    return type(default) if default is not None else str


def convert(name: str, raw: str):
    kind = _field_type(name)
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_pairs(text: str, source: str = "<config>") -> List[Tuple[str, str, str]]:
    """(key, value, location) for each key=value line; # starts a comment."""
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), f"{source}:{n}"))
    return out


def resolve(pairs: Sequence[Tuple[str, str, str]]) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for key, raw, where in pairs:
        name = ALIASES.get(key, key)
        if name not in FIELDS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[name] = convert(name, raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: field {name}: {exc}") from None
    return values


def parse_scenario(text: str = "", overrides: Sequence[str] = (), source: str = "<config>") -> ScenarioConfig:
    """Scenario from key=value text plus key=value overrides, which win."""
    pairs = parse_pairs(text, source)
    pairs += [(*_split_override(o), f"override {o!r}") for o in overrides]
    values = resolve(pairs)
    if "scheme" not in values:
        raise ConfigError(f"{source}: missing required field 'scheme'")
    try:
        return ScenarioConfig(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _split_override(o: str) -> Tuple[str, str]:
    if "=" not in o:
        raise ConfigError(f"override {o!r}: expected key=value")
    k, v = o.split("=", 1)
    return k.strip(), v.strip()


def dump_config(cfg: ScenarioConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(cfg).items())


def _flag_overrides(args) -> List[str]:
    out = []
    for name in FIELDS:
        v = getattr(args, "f_" + name, None)
        if v is not None:
            out.append(f"{name}={v}")
    return out + list(args.set or [])


GRID_AXES = ("scheme", "alpha", "traffic", "n_devices", "period_h", "seed")


def _add_field_flags(p: argparse.ArgumentParser, skip=()):
    g = p.add_argument_group("scenario fields (override the config file)")
    for name in FIELDS:
        if name in skip:
            continue
        g.add_argument("--" + name.replace("_", "-"), dest="f_" + name, metavar="V")
    for alias, name in ALIASES.items():
        if name not in skip:
            g.add_argument("--" + alias, dest="f_" + name, metavar="V", help=f"same as --{name}")
    p.add_argument("--config", help="key=value scenario file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra override, repeatable")


def _read_config(path: Optional[str]) -> Tuple[str, str]:
    if not path:
        return "", "<flags>"
    return Path(path).read_text(), path


def cmd_run(args) -> int:
    text, source = _read_config(args.config)
    cfg = parse_scenario(text, _flag_overrides(args), source)
    if args.trace_out:
        cfg = dataclasses.replace(cfg, trace=True)
    report = run_scenario(cfg)
    if args.trace_out:
        Path(args.trace_out).write_text(format_trace(report.trace))
    sys.stdout.write(dump_config(cfg))
    sys.stdout.write(json.dumps(report.summary(), sort_keys=True, default=str) + "\n")
    return 0


def _csv_list(s: str, kind=str) -> List:
    return [kind(x) for x in s.split(",") if x.strip()]


def _seeds(s: str) -> List[int]:
    if s.isdigit():
        return list(range(1, int(s) + 1))
    return _csv_list(s, int)


def cmd_grid(args) -> int:
    text, source = _read_config(args.config)
    base = resolve(parse_pairs(text, source) + [(*_split_override(o), f"override {o!r}")
                                                 for o in _flag_overrides(args)])
    for axis in GRID_AXES:
        if axis in base:
            raise ConfigError(f"{axis} is a grid axis; use the grid flags instead")
    grid = metrics.ExperimentGrid(_csv_list(args.schemes), _csv_list(args.traffic),
                                  _csv_list(args.devices, int), _csv_list(args.periods, float),
                                  _seeds(args.seeds), base, args.out)

    def progress(result):
        point, row, err = result
        print(f"{'/'.join(map(str, point))}: {'failed ' + err if err else 'ok'}", file=sys.stderr)

    rows, errors = metrics.run_grid(grid, args.workers, progress)
    body = metrics.grid_csv(rows)
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    for point, err in errors.items():
        print(f"grid point {point} failed: {err}", file=sys.stderr)
    return 1 if errors else 0


def cmd_fig3(args) -> int:
    rows = metrics.packet_length_sweep(args.buffer, _csv_list(args.sfs, int), args.bandwidth,
                                       args.header, LinkBudget(ebn0_scale=args.ebn0_scale),
                                       args.ideal)
    body = metrics.sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    return 0


def cmd_audit(args) -> int:
    trace = parse_trace(Path(args.trace).read_text())
    result = metrics.audit(trace)
    print(f"records={result['records']} duty_violations={len(result['duty_violations'])} "
          f"same_sf_overlaps={len(result['same_sf_overlaps'])}")
    for dev, ch, t, allowed in result["duty_violations"][:20]:
        print(f"duty: transmitter {dev} channel {ch} at {t!r} ms, allowed from {allowed!r} ms")
    failed = bool(result["duty_violations"])
    if args.scheduled:
        failed = failed or bool(result["same_sf_overlaps"])
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freesim", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="simulate one scenario")
    _add_field_flags(run)
    run.add_argument("--trace-out", help="write the transmission log as TSV")
    run.set_defaults(fn=cmd_run)

    grid = sub.add_parser("grid", help="sweep schemes x traffic x sizes x periods over seeds")
    _add_field_flags(grid, GRID_AXES)
    grid.add_argument("--schemes", default="legacy,delayed,free-a0,free-a1")
    grid.add_argument("--traffic", default="unconfirmed,confirmed")
    grid.add_argument("--devices", default="10,100,500,1000,2000")
    grid.add_argument("--periods", default="24")
    grid.add_argument("--seeds", default="10", help="a count N (seeds 1..N) or a comma list")
    grid.add_argument("--workers", type=int, default=1)
    grid.add_argument("--out")
    grid.set_defaults(fn=cmd_grid)

    fig3 = sub.add_parser("fig3", help="energy against packet length per SF")
    fig3.add_argument("--buffer", type=int, default=1500)
    fig3.add_argument("--sfs", default="7,8,9,10,11,12")
    fig3.add_argument("--bandwidth", type=int, default=125_000)
    fig3.add_argument("--header", type=int, default=8)
    fig3.add_argument("--ebn0-scale", choices=("db", "linear"), default="db")
    fig3.add_argument("--ideal", action="store_true", help="error-free link")
    fig3.add_argument("--out")
    fig3.set_defaults(fn=cmd_fig3)

    audit = sub.add_parser("audit", help="check a trace for duty-cycle and slot violations")
    audit.add_argument("trace")
    audit.add_argument("--scheduled", action="store_true",
                       help="also fail on same-SF overlaps (for FREE traces)")
    audit.set_defaults(fn=cmd_audit)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"freesim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
