"""Recompute mean and 95% interval from metric CSVs and compare with a summary CSV."""
import csv
import glob
import math
import statistics
import sys
from collections import defaultdict


def main(summary_path, runs_dir):
    groups = defaultdict(list)
    for path in glob.glob(f"{runs_dir}/*.csv"):
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                groups[(row["env_tag"], row["algo"], int(row["step"]))].append(float(row["eval_reward_mean"]))
    with open(summary_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != len(groups):
        sys.exit(f"expected {len(groups)} summary rows, got {len(rows)}")
    for row in rows:
        vals = groups[(row["env_tag"], row["algo"], int(row["step"]))]
        mean = statistics.fmean(vals)
        se = statistics.stdev(vals) / math.sqrt(len(vals)) if len(vals) > 1 else float("nan")
        checks = [(float(row["mean"]), mean), (float(row["stderr"]), se),
                  (float(row["ci_low"]), mean - 1.96 * se), (float(row["ci_high"]), mean + 1.96 * se)]
        for got, want in checks:
            if math.isnan(want) and math.isnan(got):
                continue
            if abs(got - want) > 1e-9 * max(1.0, abs(want)):
                sys.exit(f"mismatch for {row}: {got} vs {want}")
        if int(row["n"]) != len(vals):
            sys.exit(f"count mismatch for {row}")
    print(f"summary_check: {len(rows)} rows agree")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
