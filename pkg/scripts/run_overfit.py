"""Overfit gate: pretrain the base on one clip, train the ControlNet on eight, report the gates."""

import argparse
import json

from stvenhance.repro import run_repro

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--runs", default="runs")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    report = run_repro("overfit", runs_dir=args.runs, overrides=args.set, config_path=args.config,
                       checkpoint=args.checkpoint)
    report.pop("histories", None)
    print(json.dumps(report, indent=2))
