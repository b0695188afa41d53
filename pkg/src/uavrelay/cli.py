"""Command-line entry point: ``solve``, ``eval`` and ``sweep``.

Exit codes: 0 success, 1 the independent checker rejected the result,
2 invalid scenario or arguments, 3 file I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import driver, sca
from .channel import link_rates
from .scenario import ScenarioError, scenario_from_dict

EXIT_OK, EXIT_CHECK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3

ALGO_ALIASES = {"igs-bcd": "igs-bcd", "bcd": "bcd-only", "gs": "gs-only", "random": "random-select"}


class _IoError(Exception):
    pass


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise _IoError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top-level JSON value must be an object")
    return doc


def apply_override(doc: dict, item: str) -> None:
    """Set ``key=value`` in the scenario document; dotted keys address nested
    objects (``channel.alpha=3``, ``algo.mu=10``). Values are parsed as JSON
    when possible and kept as strings otherwise."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ScenarioError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = key.split(".")
    node = doc
    for p in parents:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ScenarioError(f"override {key!r}: {p!r} is not an object")
        node = child
    node[leaf] = value


def _load(args):
    doc = _read_json(args.scenario)
    for item in getattr(args, "override", None) or []:
        apply_override(doc, item)
    scenario, config = scenario_from_dict(doc)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
        config.validate(scenario)
    return scenario, config


def cmd_solve(args) -> int:
    scenario, config = _load(args)
    algo = ALGO_ALIASES[args.algo]
    result = driver.run(scenario, config, algo, init=args.init)
    try:
        driver.emit_outputs(scenario, result, args.out, wall_clock=args.wall_clock)
    except OSError as exc:
        raise _IoError(str(exc)) from exc
    print(f"eta {result.eta:.12g}")
    if not result.check.ok:
        for v in result.check.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_eval(args) -> int:
    scenario, config = _load(args)
    placement, alloc = driver.load_placement(_read_json(args.placement))
    if placement.M != scenario.M:
        raise ScenarioError(f"placement has {placement.M} UAVs, scenario has {scenario.M}")
    if alloc is None or args.resolve:
        alloc, eta = sca.solve_resource_allocation(scenario, placement, config=config)
    else:
        eta = link_rates(scenario, placement, alloc).eta()
    rep = driver.check_solution(scenario, placement, alloc, eta)
    print(f"eta {rep.eta:.12g}")
    for name, value in rep.residuals.items():
        print(f"residual {name} {value:.6g}")
    for v in rep.violations:
        print(f"violation: {v}")
    return EXIT_OK if rep.ok else EXIT_CHECK


def cmd_sweep(args) -> int:
    scenario, config = _load(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ScenarioError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values or min(values) < 1:
        raise ScenarioError("--values needs positive integers")
    rows = driver.sweep(scenario, config, args.vary, values, args.seeds, ALGO_ALIASES[args.algo])
    fields = ["vary", "value", "seeds", "mean_eta", "min_eta", "max_eta"]
    try:
        fh = open(args.out, "w", newline="") if args.out else sys.stdout
    except OSError as exc:
        raise _IoError(f"cannot write {args.out}: {exc.strerror or exc}") from exc
    w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})
    if fh is not sys.stdout:
        fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uavrelay", description="Multi-UAV relay 3D placement and resource allocation.")
    ap.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a scenario field; dotted keys for nested fields (repeatable)")

    p = sub.add_parser("solve", help="run an algorithm and write result.json and trace.csv")
    common(p)
    p.add_argument("--algo", choices=sorted(ALGO_ALIASES), default="igs-bcd")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--init", choices=("vuc", "random", "gnc"), default="vuc")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--wall-clock", action="store_true", help="fill the wall_ms trace column")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="evaluate a placement: eta and constraint residuals")
    common(p)
    p.add_argument("--placement", required=True, help="result.json or {\"q\": ..., \"z\": ...} / {\"xyz\": ...}")
    p.add_argument("--resolve", action="store_true", help="re-solve the allocation even if one is given")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="mean eta over seeds while varying K or M (CSV)")
    common(p)
    p.add_argument("--vary", choices=("K", "M"), required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--algo", choices=sorted(ALGO_ALIASES), default="igs-bcd")
    p.add_argument("--out", default=None, help="CSV file (default stdout)")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
