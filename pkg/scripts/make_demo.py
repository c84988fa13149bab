#!/usr/bin/env python
"""Regenerate the demo dataset and its fit config under data/."""

import json
import argparse
from pathlib import Path

from ivbart.simlab import SimScenario, Truth, write_dataset

DEMO_SCENARIO = SimScenario(Truth.NONLINEAR_H, rho=0.7, C=1.0, n=300, n_snps=20, n_x=3, replications=1, seed=20240917)

DEMO_CONFIG = {
    "data": "demo.csv",
    "outcome": "y",
    "exposure": "t",
    "instruments": [f"z{j + 1}" for j in range(20)],
    "covariates": ["x1", "x2", "x3"],
    "model": {"variant": "npivbart-h", "H_t": 50, "H_y": 50},
    "burn_in": 200,
    "draws": 200,
    "chains": 1,
    "grid": {
        "t_points": [-2.5, -1.25, 0.0, 1.25, 2.5],
        "profiles": [{"x1": -0.5}, {"x1": 0.5}],
        "labels": ["x1=-0.5", "x1=+0.5"],
    },
    "seed": 7,
    "output": "demo-out",
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=Path(__file__).resolve().parent.parent / "data", type=Path)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    write_dataset(DEMO_SCENARIO, 0, args.out / "demo.csv")
    with open(args.out / "demo_fit.json", "w", encoding="utf-8") as f:
        json.dump(DEMO_CONFIG, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
