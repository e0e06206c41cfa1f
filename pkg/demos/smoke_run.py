"""Run the bundled smoke experiment and print its learning curve."""

import sys
import tempfile
from pathlib import Path

import marank
from marank.experiment import load_config, run

bundled = Path(marank.__file__).with_name("bundled")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="marank-smoke-"))
report = run(load_config(bundled / "smoke.json"), out)
print(report.curve_csv(), end="")
print(f"final held-out NDCG@5 {report.summary['final_heldout_metric']:.4f} "
      f"after {report.summary['oracle_queries']} oracle queries; artifacts in {out}")
