"""
Driving the pipeline from a config file
=======================================

The same stages are available as ``softdistill <stage> --config FILE``. Here
the entry point is called in-process with a small config, followed by a
two-point weight-decay sweep and an SVG of the training curves.
"""

import tempfile
from pathlib import Path

from softdistill.cli import main

CONFIG = """\
[run]
seed = 0

[dataset]
n_train = 400
n_val = 400
n_gallery = 2000

[teacher]
hidden = 64
epochs = 10
warmup_epochs = 1

[curation]
k = 100

[distill]
epochs = 8
warmup_epochs = 1

[finetune]
epochs = 2

[sweep]
weight_decay = 1e-4, 1e-5
"""

work = Path(tempfile.mkdtemp(prefix="softdistill-"))
cfg = work / "exp.ini"
cfg.write_text(CONFIG)
out = work / "run"

for stage in ("gen-data", "train-teacher", "curate", "distill", "finetune", "evaluate", "sweep"):
    code = main([stage, "--config", str(cfg), "--out", str(out)])
    print(f"{stage:14s} exit {code}")

print((out / "evaluation.csv").read_text())
print((out / "sweep.csv").read_text())

main(["plot", "--input", str(out / "metrics_distill.csv"), "--series", "stage",
      "--y", "train_loss", "--output", str(work / "distill.svg")])
print("plot written to", work / "distill.svg")
