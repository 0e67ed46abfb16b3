#!/usr/bin/env python3
"""Print a compact table of a report: accuracies, curves and diagnostics."""

import json
import sys
from pathlib import Path


def main(out_dir: str):
    out = Path(out_dir)
    rep = json.loads((out / "report.json").read_text())
    print(f"status {rep['status']}  standard {rep['standard_accuracy']}")
    for name, acc in sorted(rep["robust"].items(), key=lambda kv: kv[1]):
        print(f"  {name:<20} {acc:.3f}")
    print(f"worst case {rep['worst_case']} ({rep['best_attack']}); "
          f"BPDA family {rep['worst_case_bpda']} ({rep['best_bpda_attack']})")
    for name, curve in rep["curves"].items():
        print(f"\n{name}: " + ", ".join(curve["columns"]))
        for row in curve["rows"]:
            print("  " + "  ".join(f"{v:g}" for v in row))
    timings = out / "timings.json"
    if timings.exists():
        t = json.loads(timings.read_text())
        print(f"\ndefense / adversarial training time: {t.get('defense_over_adversarial_training')}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/desk")
