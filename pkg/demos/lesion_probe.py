"""Drop random blocks from trained checkpoints and watch the loss.

Point it at one or more checkpoint directories written by ``pld train`` (the
``checkpoint`` folder inside a run). For each, reports the full-depth loss
and the loss with half the blocks removed, with and without 1/theta scaling.

    pld train --no-drop --variant preln --steps 1500 --out runs/pre
    pld train --no-drop --variant postln --steps 1500 --out runs/post
    python demos/lesion_probe.py runs/pre/checkpoint runs/post/checkpoint
"""

import sys

import numpy as np

from pld.data import MLMData, load_corpus
from pld.instrumentation import lesion_eval
from pld.transformer import load_checkpoint

for path in sys.argv[1:]:
    model, extra = load_checkpoint(path)
    cfg = model.config
    val = MLMData(load_corpus(), cfg.S, 32, 0.15, 0).validation_batches(8)
    res = lesion_eval(model.astype(np.float64), 0.5, val, seeds=range(5))
    print(f"{path}: {cfg.variant} step {extra.get('step')}  full {res.full_loss:.3f}  "
          f"lesioned +{res.inflation():.3f} (scaled +{res.inflation(scaled=True):.3f})")
