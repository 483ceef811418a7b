"""Baseline grid: SimCLR and SimSiam on imbalanced vs size-matched balanced subsets.

    python scripts/experiment1.py                 # desk scale, CPU, a few minutes
    python scripts/experiment1.py --scale full     # full scale, needs an accelerator
"""

import argparse
import sys
from pathlib import Path

from imbssl import cli

GRIDS = Path(__file__).resolve().parents[1] / "configs" / "grids"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.add_argument("--out", default=None, help="grid output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE")
    args = p.parse_args(argv)
    out = args.out or f"runs/exp1-{args.scale}"
    argv = ["grid", str(GRIDS / f"exp1-{args.scale}.yaml"), "--out", out]
    for o in args.overrides:
        argv += ["--set", o]
    code = cli.main(argv)
    if code == 0:
        code = cli.main(["report", out])
    return code


if __name__ == "__main__":
    sys.exit(main())
