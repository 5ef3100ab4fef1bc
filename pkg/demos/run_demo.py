"""Run the bundled synthetic demo and print the results table.

Usage: python3 demos/run_demo.py [OUT_DIR]
"""

import json
import sys
from pathlib import Path

from surroseg.pipeline import PipelineConfig, run_pipeline


def main(out="demo_out"):
    cfg = json.loads((Path(__file__).parent / "demo_config.json").read_text())
    summary = run_pipeline(PipelineConfig.from_dict(cfg), Path(out))
    print(f"{'method':8} {'m':>2} {'error %':>9}")
    for row in summary["results"]:
        print(f"{row['method']:8} {row['m']:>2} {100 * row['error_ratio']:9.2f}")
    print(f"artifacts in {out}; MIQP check passed: {summary['miqp_check']['passed']}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
