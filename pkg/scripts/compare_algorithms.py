"""Run every algorithm on one scenario file and print final eta and runtime.

usage: python scripts/compare_algorithms.py [scenario.json] [--seed N]
"""
import argparse
import dataclasses
import logging
from pathlib import Path

from uavrelay import driver
from uavrelay.scenario import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario", nargs="?", default=str(Path(__file__).with_name("example_scenario.json")))
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    scenario, config = load_scenario(Path(args.scenario).read_text())
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    print(f"{'algo':<14} {'eta':>10} {'seconds':>9} {'check':>6}")
    for algo in driver.ALGOS:
        res = driver.run(scenario, config, algo)
        print(f"{algo:<14} {res.eta:>10.5f} {res.wall_s:>9.1f} {'ok' if res.check.ok else 'FAIL':>6}")


if __name__ == "__main__":
    main()
