#!/usr/bin/env python
"""
Quick check that every command runs on the sample configs
Run with: python smoke_check.py
"""

import json
import tempfile
from pathlib import Path

from verifem.main import main as verifem_main

CONFIGS = Path(__file__).parent / "data" / "sample_configs"

RUNS = [
    ("solve", "estimate_fig1.ini"),
    ("estimate", "estimate_fig1.ini"),
    ("estimate", "goal_sin_sin.ini"),
    ("study", "study_sin_sin.ini"),
    ("adapt", "adapt_lshape.ini"),
]


def main():
    print("=" * 60)
    print("VERIFEM - SAMPLE RUNS")
    print("=" * 60)

    with tempfile.TemporaryDirectory() as tmp:
        for index, (command, name) in enumerate(RUNS, start=1):
            print(f"\n[{index}/{len(RUNS)}] verifem {command} --config {name}...")
            out = Path(tmp) / f"{index:02d}_{command}"
            code = verifem_main([command, "--config", str(CONFIGS / name), "--out", str(out)])
            assert code == 0, f"exit code {code}"
            report = json.loads((out / "report.json").read_text())
            print(f"✓ PASSED - {len(list(out.iterdir()))} file(s) written")
            for estimate in report.get("estimates", []):
                effectivity = estimate.get("effectivity")
                shown = f"{effectivity:.3f}" if effectivity is not None else "-"
                print(f"  {estimate['estimator']:<18} {estimate['value']:.4e}  i_eff {shown}")
            for method, bounds in report.get("goal", {}).get("bounds", {}).items():
                print(f"  {method:<18} [{bounds['lower']:.6f}, {bounds['upper']:.6f}]")
            for name, slope in report.get("rates", {}).items():
                print(f"  {name:<18} {slope:.3f}")

    print("\n" + "=" * 60)
    print("✓ ALL RUNS PASSED!")
    print("=" * 60)


if __name__ == "__main__":
    main()
