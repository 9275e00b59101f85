"""PostLN versus PreLN at initialization, on identical weights.

For each seed this builds one 24-block PreLN model, reuses its weights as a
PostLN model, and prints the per-layer weight-gradient spread (max/min) and
the mean |log| of the input/output gradient-norm ratio for both.

    python demos/stability_at_init.py [num_seeds]
"""

import sys

import numpy as np

from pld.data import VOCAB_SIZE, MLMData, load_corpus
from pld.instrumentation import layer_grad_norms, norm_preserving_ratio
from pld.transformer import Model, ModelConfig

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
text = load_corpus()
print("seed  spread post/pre    mean|log ratio| post/pre")
for seed in range(seeds):
    pre = Model.init(ModelConfig(L=24, d=64, H=4, V=VOCAB_SIZE, S=64, variant="preln"), seed, np.float64)
    post = pre.with_variant("postln")
    batch = MLMData(text, 64, 8, 0.15, seed).train_batch(1)
    gpre, gpost = layer_grad_norms(pre, batch), layer_grad_norms(post, batch)
    rpre = norm_preserving_ratio(pre, batch).mean_abs_log()
    rpost = norm_preserving_ratio(post, batch).mean_abs_log()
    print(f"{seed:4d}  {gpost.max() / gpost.min():6.3f} / {gpre.max() / gpre.min():6.3f}"
          f"      {rpost:.4f} / {rpre:.4f}")
    if seed == 0:
        print("      per-layer |dW| PreLN :", np.round(gpre / gpre.max(), 3).tolist())
        print("      per-layer |dW| PostLN:", np.round(gpost / gpost.max(), 3).tolist())
