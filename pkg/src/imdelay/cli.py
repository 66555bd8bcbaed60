"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 unstable queue (analyze),
3 validation failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from typing import Any, Optional, Sequence

from imdelay import serialize
from imdelay.analytic import analyze
from imdelay.core import CONFIG_KEYS, DEFAULT_CONFIG, ConfigError, ScenarioParams, normalize_config
from imdelay.montecarlo import run_queue
from imdelay.sweep import Axis, NoSimulationData, SimSettings, SweepResult, SweepSpec, agreement_summary, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_UNSTABLE, EXIT_VALIDATION = 0, 1, 2, 3
POWER_KEYS = ("tx_power_w", "tx_power_dbm")

DEFAULT_SIM = {"n_packets": 110_000, "warmup": 10_000, "seed": 1, "replications": 1}
DEFAULT_MODES = {
    "dispersion_mode": "approx",
    "tw_variance_mode": "standard",
    "exclusion_zone": False,
    "frozen_topology": False,
}
BLOCKS = {"sim": DEFAULT_SIM, "modes": DEFAULT_MODES, "sweep": None}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which means "unstable"
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


# --------------------------------------------------------------------------
# Configuration layering: defaults < file < --set < dedicated flags

def _merge_layer(doc: dict[str, Any], layer: dict[str, Any], source: str) -> None:
    if not isinstance(layer, dict):
        raise ConfigError(source, "configuration must be a JSON object")
    power = [k for k in POWER_KEYS if layer.get(k) is not None]
    if len(power) > 1:
        raise ConfigError("tx_power_w", f"{source} gives both tx_power_w and tx_power_dbm")
    if power:
        for k in POWER_KEYS:
            doc.pop(k, None)
    for key, value in layer.items():
        if key in BLOCKS:
            if value is None:
                doc[key] = None
                continue
            if not isinstance(value, dict):
                raise ConfigError(key, "must be an object")
            block = doc.get(key) or {}
            allowed = BLOCKS[key]
            for sub in value:
                if allowed is not None and sub not in allowed:
                    raise ConfigError(f"{key}.{sub}", "unknown configuration key")
            block = _deep_merge(block, value)
            doc[key] = block
        elif key in CONFIG_KEYS:
            doc[key] = value
        else:
            raise ConfigError(key, "unknown configuration key")


def _deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_override(item: str) -> dict[str, Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like KEY=VALUE")
    key, text = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(item, "empty override key")
    try:
        value: Any = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.split(".")
    layer: dict[str, Any] = {}
    node = layer
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return layer


def load_document(config_path: Optional[str], overrides: Sequence[str]) -> dict[str, Any]:
    doc: dict[str, Any] = copy.deepcopy(DEFAULT_CONFIG)
    doc["sim"] = dict(DEFAULT_SIM)
    doc["modes"] = dict(DEFAULT_MODES)
    doc["sweep"] = None
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                layer = json.load(fh)
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        _merge_layer(doc, layer, "config file")
    for item in overrides:
        _merge_layer(doc, _parse_override(item), f"--set {item}")
    return doc


def scenario_from(doc: dict[str, Any]) -> ScenarioParams:
    return normalize_config({k: v for k, v in doc.items() if k in CONFIG_KEYS})


def _apply_flags(doc: dict[str, Any], args: argparse.Namespace) -> None:
    sim, modes = doc["sim"], doc["modes"]
    for flag, key in (("seed", "seed"), ("packets", "n_packets"), ("warmup", "warmup"),
                      ("replications", "replications")):
        value = getattr(args, flag, None)
        if value is not None:
            sim[key] = value
    if getattr(args, "mode_dispersion", None):
        modes["dispersion_mode"] = args.mode_dispersion
    if getattr(args, "mode_twvar", None):
        modes["tw_variance_mode"] = args.mode_twvar.replace("-", "_")
    if getattr(args, "exclusion_zone", False):
        modes["exclusion_zone"] = True
    if getattr(args, "frozen_topology", False):
        modes["frozen_topology"] = True
    if modes["dispersion_mode"] not in ("approx", "exact"):
        raise ConfigError("modes.dispersion_mode", "must be approx or exact")
    if modes["tw_variance_mode"] not in ("standard", "paper_literal"):
        raise ConfigError("modes.tw_variance_mode", "must be standard or paper_literal")
    for key in ("n_packets", "warmup", "seed", "replications"):
        value = sim.get(key)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"sim.{key}", f"must be an integer (got {value!r})")
    if not 0 <= sim["seed"] < 2**64:
        raise ConfigError("sim.seed", "must be an unsigned 64-bit integer")


# --------------------------------------------------------------------------
# Output

def _flatten(prefix: str, obj: Any, out: dict[str, Any]) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    else:
        out[prefix] = obj


def _single_row_csv(record: dict[str, Any]) -> str:
    flat: dict[str, Any] = {}
    _flatten("", record, flat)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(flat))
    writer.writerow([serialize.csv_cell(v) for v in flat.values()])
    return buf.getvalue()


def _emit(text: str, out_path: Optional[str]) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# Subcommands

def cmd_analyze(args: argparse.Namespace, doc: dict[str, Any]) -> int:
    p = scenario_from(doc)
    report = analyze(p, doc["modes"]["tw_variance_mode"], allow_unstable=True)
    record = {"params": p.to_dict(), "stable": report.stable, "report": report.to_dict()}
    fmt = args.format or "json"
    _emit(serialize.dumps(record) if fmt == "json" else _single_row_csv(record), args.out)
    if not report.stable:
        print(f"unstable queue: rho = {report.rho:.6g} >= 1; queue metrics unavailable",
              file=sys.stderr)
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, doc: dict[str, Any]) -> int:
    p = scenario_from(doc)
    sim, modes = doc["sim"], doc["modes"]
    report = run_queue(
        p, sim["n_packets"], sim["warmup"], sim["seed"],
        replications=sim["replications"],
        dispersion_mode=modes["dispersion_mode"],
        exclusion_zone=modes["exclusion_zone"],
        frozen_topology=modes["frozen_topology"],
    )
    record = {"params": p.to_dict(), "modes": dict(modes), "sim": report.to_dict()}
    fmt = args.format or "json"
    _emit(serialize.dumps(record) if fmt == "json" else _single_row_csv(record), args.out)
    if not report.stable:
        print("warning: simulated utilization >= 1, statistics are not steady-state",
              file=sys.stderr)
    return EXIT_OK


def sweep_spec_from(doc: dict[str, Any]) -> SweepSpec:
    block = doc.get("sweep")
    if not block:
        raise ConfigError("sweep", "config has no sweep block")
    axes = []
    for name in ("axis1", "axis2"):
        axis = block.get(name)
        if not isinstance(axis, dict) or "field" not in axis or "values" not in axis:
            raise ConfigError(f"sweep.{name}", "needs 'field' and 'values'")
        values = axis["values"]
        if not isinstance(values, list):
            raise ConfigError(f"sweep.{name}.values", "must be a list")
        axes.append(Axis(axis["field"], tuple(float(v) for v in values)))
    simulate = block.get("simulate", True)
    sim = doc["sim"]
    modes = doc["modes"]
    return SweepSpec(
        base=scenario_from(doc),
        axis1=axes[0],
        axis2=axes[1],
        sim=SimSettings(sim["n_packets"], sim["warmup"], sim["seed"], sim["replications"]) if simulate else None,
        dispersion_mode=modes["dispersion_mode"],
        tw_variance_mode=modes["tw_variance_mode"],
        exclusion_zone=modes["exclusion_zone"],
        frozen_topology=modes["frozen_topology"],
    )


def cmd_sweep(args: argparse.Namespace, doc: dict[str, Any]) -> int:
    spec = sweep_spec_from(doc)
    progress = None
    if args.verbose:
        def progress(done: int, total: int) -> None:
            print(f"cell {done}/{total}", file=sys.stderr)
    result = run_sweep(spec, workers=args.workers or 1, progress=progress)
    fmt = args.format or "csv"
    _emit(result.to_csv() if fmt == "csv" else result.to_json(), args.out)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, doc: dict[str, Any]) -> int:
    if args.result:
        try:
            with open(args.result, encoding="utf-8") as fh:
                result = SweepResult.from_json(fh.read())
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError("--result", f"cannot load sweep result: {exc}") from None
        try:
            summary = agreement_summary(result)
        except NoSimulationData as exc:
            print(f"error: NoSimulationData: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        _emit(serialize.dumps(summary), args.out)
        ok = all(m["fraction"] >= 8 / 9 - 1e-12 for m in summary["per_metric"].values())
        return EXIT_OK if ok else EXIT_VALIDATION

    from imdelay.validation import results_to_dict, run_validation

    seed = args.seed if args.seed is not None else 20240601
    results = run_validation(seed=seed, workers=args.workers)
    if args.out:
        _emit(serialize.dumps({"seed": seed, "checks": results_to_dict(results)}), args.out)
    return EXIT_OK if results[-1].passed else EXIT_VALIDATION


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON scenario/config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted keys, repeatable)")
    common.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--packets", type=int, metavar="N", help="packets per replication, warmup included")
    common.add_argument("--warmup", type=int, metavar="N")
    common.add_argument("--replications", type=int, metavar="N")
    common.add_argument("--mode-dispersion", choices=("approx", "exact"))
    common.add_argument("--mode-twvar", choices=("standard", "paper-literal"))
    common.add_argument("--exclusion-zone", action="store_true")
    common.add_argument("--frozen-topology", action="store_true")
    common.add_argument("--workers", type=int, metavar="N", help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="imdelay", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("analyze", parents=[common], help="closed-form metrics")
    sub.add_parser("simulate", parents=[common], help="discrete-event queue simulation")
    sub.add_parser("sweep", parents=[common], help="two-axis grid of analytic and simulated metrics")
    v = sub.add_parser("validate", parents=[common], help="built-in validation suite")
    v.add_argument("--result", metavar="PATH", help="summarize agreement of a saved sweep JSON instead")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        doc = load_document(args.config, args.overrides)
        _apply_flags(doc, args)
        return COMMANDS[args.command](args, doc)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
