"""Does the increment penalty keep identity edits on the face?

Trains the model with and without the penalty from the same seed and data, then
compares how much adapter activity lands outside the face (lower is more local)
and whether each generation looks more like its own reference than another's.
The full comparison uses 2000 steps; pass a smaller count for a quick look.
"""
import sys

from faceadapt.config import TrainConfig, apply_overrides
from faceadapt.evaluation import render_reports, run_ablation

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
cfg = apply_overrides(TrainConfig(), {"total_steps": steps, "optimizer.lr": 1e-3})
reports = run_ablation(["fair", "nofair"], cfg, out_dir="demo_out/ablation")
print(render_reports(reports))
for r in reports:
    print(r.name, "per-block locality:",
          {k: None if v is None else round(v, 3) for k, v in r.locality_ratio.items()})
