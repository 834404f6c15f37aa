#!/usr/bin/env python3
"""Writes the synthetic mixed-type loans dataset (data/loans.csv + schema).

Education is ordinal and shifts income; housing and income drive approval.
Deterministic for a given seed.
"""
import argparse
import csv
import json
import math
import random
from pathlib import Path

EDUCATION = ["primary", "secondary", "bachelor", "master"]
HOUSING = ["rent", "mortgage", "own"]


def rows(n, seed):
    rng = random.Random(seed)
    for _ in range(n):
        age = rng.randint(21, 70)
        edu = rng.choices(range(4), weights=[2, 4, 3, 1])[0]
        income = max(8.0, rng.gauss(25 + 12 * edu + 0.3 * (age - 21), 8))
        housing = rng.choices(range(3), weights=[4, 3, 2 + (age > 45) * 3])[0]
        debt = max(0.0, rng.gauss(10, 6))
        score = 0.12 * (income - 45) - 0.15 * (debt - 10) + 0.6 * housing + rng.gauss(0, 0.8)
        approved = "yes" if 1 / (1 + math.exp(-score)) > 0.5 else "no"
        yield [age, round(income, 2), EDUCATION[edu], HOUSING[housing], round(debt, 2), approved]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--rows", type=int, default=400)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loans.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["age", "income", "education", "housing", "debt", "approved"])
        w.writerows(rows(args.rows, args.seed))
    schema = {
        "features": [
            {"name": "age", "kind": "numeric"},
            {"name": "income", "kind": "numeric"},
            {"name": "education", "kind": "categorical", "categories": EDUCATION},
            {"name": "housing", "kind": "categorical", "categories": HOUSING},
            {"name": "debt", "kind": "numeric"},
        ],
        "target": {"name": "approved", "classes": ["no", "yes"]},
    }
    (out / "loans.schema.json").write_text(json.dumps(schema, indent=2) + "\n")


if __name__ == "__main__":
    main()
