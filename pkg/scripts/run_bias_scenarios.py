#!/usr/bin/env python3
"""Run both bias-error scenarios and render the position-vs-time figures.

Scenario A drives the backup-set QP with a -0.4 m position bias: the
estimate stays safe while the true state exits the safe set. Scenario B
runs the measurement-robust program with the same bias and stays safe in
both coordinates. Outputs land in out/: CSV logs, JSON reports, SVG plots.
"""

import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from safeguard.cli import dispatch

CONFIGS = ["configs/scenario_a.json", "configs/scenario_b.json"]


def main():
    root = os.path.join(os.path.dirname(__file__), "..")
    os.chdir(root)
    t0 = time.time()
    for cfg in CONFIGS:
        print(f"=== simulate {cfg} ===")
        code = dispatch(["simulate", cfg])
        if code != 0:
            return code
        stem = os.path.splitext(os.path.basename(cfg))[0]
        code = dispatch(["plot", f"out/{stem}_log.csv",
                         "--out", f"out/{stem}.svg", "--eps", "0.4"])
        if code != 0:
            return code
    print(f"\ntotal {time.time() - t0:.1f}s")
    for cfg in CONFIGS:
        stem = os.path.splitext(os.path.basename(cfg))[0]
        with open(f"out/{stem}_report.json") as fh:
            report = json.load(fh)
        outcome = ("UNSAFE (true state exits)" if report["min_h_true"] < 0
                   else "safe")
        print(f"{stem}: min h(true)={report['min_h_true']:.3f} "
              f"min h(est)={report['min_h_est']:.3f} -> {outcome}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
