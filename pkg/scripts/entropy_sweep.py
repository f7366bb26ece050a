#!/usr/bin/env python3
"""Sweep the softmax entropy floor across hidden sizes and vocabularies.

Emits a CSV of (d, v, rho, temperature, softcap, r_effective, bound,
normalized_gap) rows shaped for plotting normalized-gap curves: fix a
vocabulary column, plot normalized_gap against d.

Usage:
    python scripts/entropy_sweep.py [--rho 0.5 --temperature 2 ...]
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from smoothce.cli import main  # noqa: E402

if __name__ == "__main__":
    defaults = ["entropy",
                "--d", "64,256,1024,4096,16384",
                "--v", "32768,65536,131072,262144",
                "--rho", "0.25,0.5,1.0"]
    sys.exit(main(defaults + sys.argv[1:]))
