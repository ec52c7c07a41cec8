#!/usr/bin/env python3
"""Regenerates data/loans.csv: 200 noise-free rows, label is linear in two features."""
import csv
import random
import sys

rng = random.Random(20240611)
kinds = ["salaried", "self-employed", "contract"]
rows = []
while len(rows) < 200:
    income = rng.randint(15, 150)
    debt = rng.randint(0, 90) / 100
    margin = income - 100 * debt - 40
    if abs(margin) < 3:
        continue
    rows.append([rng.randint(21, 70), income, f"{debt:.2f}", rng.choice(kinds), "yes" if margin > 0 else "no"])

out = open(sys.argv[1], "w", newline="") if len(sys.argv) > 1 else sys.stdout
w = csv.writer(out, lineterminator="\n")
w.writerow(["age", "income", "debt_ratio", "employment", "approved"])
w.writerows(rows)
