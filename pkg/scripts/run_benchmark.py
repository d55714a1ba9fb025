"""Run the equilibrium-and-recovery pipeline on the vendored benchmarks.

For each requested benchmark this solves for the multi-class equilibrium
(``assign``), then recovers the congestion function from the equilibrium
flows (``estimate``); ``--sweep`` additionally maps out the degree,
kernel-width, and ridge-weight grids.  Outputs land under ``out/<name>/``
at the repository root; see the matching file in ``configs/`` for the
exact parameters.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from tapcost.cli import main as cli_main

ROOT = Path(__file__).resolve().parent.parent
BENCHMARKS = ("sioux_falls", "berlin_tiergarten", "anaheim")


def run(name: str, sweep: bool) -> int:
    config = ROOT / "configs" / f"{name}.cfg"
    commands = ["assign", "estimate"] + (["sweep"] if sweep else [])
    for command in commands:
        start = time.perf_counter()
        rc = cli_main([command, "--config", str(config)])
        print(f"[{name}] {command} finished in {time.perf_counter() - start:.1f}s")
        if rc != 0:
            return rc
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "names",
        nargs="*",
        choices=BENCHMARKS,
        default=list(BENCHMARKS),
        help="benchmarks to run (default: all three)",
    )
    parser.add_argument(
        "--sweep",
        action="store_true",
        help="also run the parameter-grid sweep (slow on the larger networks)",
    )
    args = parser.parse_args(argv)
    for name in args.names:
        rc = run(name, args.sweep)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
