#!/usr/bin/env python3
# Copyright 2026 The dpsubsel Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Check privacy ledger conservation for every run under one or more directories.

Each run directory holds ledger.jsonl (one spend per line) and summary.json
(the budget). Exits 0 iff every ledger respects its budget.
"""

import argparse
import json
import math
import pathlib
import sys

TOL = 1e-9


def check_run(run_dir):
    """Returns a list of violation strings for one run directory."""
    summary = json.loads((run_dir / "summary.json").read_text())
    if summary.get("status", "ok") != "ok":
        return []
    eps_total = float(summary["epsilon_total"])
    delta_total = float(summary["delta"])
    ratio = float(summary["alloc_ratio"])
    spent = {"train": 0.0, "selection": 0.0}
    delta = 0.0
    problems = []
    lines = (run_dir / "ledger.jsonl").read_text().splitlines()
    for n, line in enumerate(lines, 1):
        rec = json.loads(line)
        eps, d = float(rec["eps"]), float(rec["delta"])
        if not (math.isfinite(eps) and eps >= 0 and math.isfinite(d) and d >= 0):
            problems.append(f"line {n}: invalid spend {line}")
            continue
        if rec["phase"] not in spent:
            problems.append(f"line {n}: unknown phase {rec['phase']!r}")
            continue
        spent[rec["phase"]] += eps
        delta += d
    caps = {"train": ratio * eps_total, "selection": (1.0 - ratio) * eps_total}
    for phase, value in spent.items():
        if value > caps[phase] + TOL:
            problems.append(f"{phase} eps {value!r} exceeds cap {caps[phase]!r}")
    total = spent["train"] + spent["selection"]
    if total > eps_total + TOL:
        problems.append(f"total eps {total!r} exceeds {eps_total!r}")
    if delta > delta_total + TOL * delta_total:
        problems.append(f"delta {delta!r} exceeds {delta_total!r}")
    if not lines:
        problems.append("empty ledger")
    return problems


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("roots", nargs="+", type=pathlib.Path)
    args = ap.parse_args()
    runs = sorted({p.parent for root in args.roots for p in root.rglob("ledger.jsonl")})
    bad = 0
    for run in runs:
        problems = check_run(run)
        for p in problems:
            print(f"{run}: {p}")
        bad += bool(problems)
    print(f"checked {len(runs)} ledgers, {bad} violating")
    return 1 if bad or not runs else 0


if __name__ == "__main__":
    sys.exit(main())
