"""Run the bundled twin-experiment manifest at desk scale.

    python scripts/desk_study.py OUT_DIR [--only base-inst,swap-inst]

Geometry and time step match the acceptance suite (about 2.4k cells on the
reconstruction domain, K = 60).
"""
import argparse
import sys

from flow4dvar.cli import main

DESK = ["--scale", "0.5", "--edge-length", "0.16", "--dt", "0.00925"]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--only")
    a = ap.parse_args()
    argv = ["-v", "run-study", "--out-dir", a.out_dir, *DESK]
    if a.only:
        argv += ["--only", a.only]
    sys.exit(main(argv))
