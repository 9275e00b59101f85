"""A short PLD run next to its full-depth baseline.

Trains both for a few hundred steps on the bundled corpus and prints the
validation loss, the block-FLOPS fraction actually spent and the mean step
time. Step count defaults to 400; pass another number to change it.

    python demos/short_training_run.py [steps]
"""

import sys

import numpy as np

from pld.training import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
results = {}
for name in ("pld", "baseline"):
    cfg = TrainConfig(total_steps=steps, eval_interval=max(steps // 4, 1))
    if name == "baseline":
        cfg.model.variant = "preln"
        cfg.schedule = None
    res = train(cfg)
    results[name] = res
    print(f"{name:9s} val loss {res.rows[0]['val_loss']:.3f} -> {res.final_val_loss:.3f}  "
          f"block FLOPS {res.rows[-1]['block_flops_fraction']:.3f}  "
          f"{np.mean(res.column('ms_per_step')):.0f} ms/step")
