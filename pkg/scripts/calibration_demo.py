#!/usr/bin/env python3
"""Generate a synthetic calibration record file and score it.

Produces two JSONL populations, one calibrated (correctness drawn at the
stated confidence) and one overconfident (correctness drawn well below it),
then prints the metric CSV for each so the contrast is visible.

Usage:
    python scripts/calibration_demo.py [outdir]
"""

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from smoothce.cli import main  # noqa: E402


def write_records(path, rng, n, overconfidence=0.0):
    with open(path, "w", encoding="utf-8") as fh:
        for _ in range(n):
            conf = float(rng.uniform(0.2, 1.0))
            hit_rate = max(0.0, conf - overconfidence)
            fh.write(json.dumps({
                "confidence": conf,
                "correct": bool(rng.uniform() < hit_rate),
            }) + "\n")


if __name__ == "__main__":
    outdir = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else ".")
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)

    calibrated = outdir / "calibrated.jsonl"
    overconfident = outdir / "overconfident.jsonl"
    write_records(calibrated, rng, 5000)
    write_records(overconfident, rng, 5000, overconfidence=0.25)

    for label, path in (("calibrated", calibrated),
                        ("overconfident", overconfident)):
        print(f"# {label}")
        rc = main(["calibrate", "--records", str(path), "--bins", "10",
                   "--reliability-csv", str(outdir / f"{label}_reliability.csv")])
        if rc != 0:
            sys.exit(rc)
    print(f"# reliability tables written to {outdir}")
