"""Walk through the keep-ratio schedule for a 12-block model.

Prints theta(t), the per-block keep probabilities and the expected depth at
a few steps, then compares the analytic steady state with sampled gates.

    python demos/schedule_walkthrough.py
"""

import math

import numpy as np

from pld.schedule import (DropSchedule, expected_depth, flops_per_step, layer_keep_probs, sample_gates,
                          theta_bar)
from pld.transformer import ModelConfig

T, L = 5000, 12
sched = DropSchedule.from_steps(0.5, T, L)
cfg = ModelConfig(L=L, d=64, H=4, V=99, S=64)

print(f"gamma = 100/T = {sched.gamma:g}")
for t in (0, 10, 50, 100, 250, T):
    p = layer_keep_probs(t, sched)
    print(f"t={t:5d}  theta={theta_bar(t, sched):.5f}  E[depth]={expected_depth(sched, t):6.3f}  "
          f"flops={flops_per_step(sched, cfg, t):.4f}  p_1..p_L={np.round(p, 3).tolist()}")

ss = expected_depth(sched, math.inf)
print(f"\nsteady state: {ss:.4f} of {L} blocks ((3L+1)/4 = {(3 * L + 1) / 4})")
print(f"block FLOPS saved: {100 * (1 - ss / L):.2f}%")

kept = [sample_gates(t, sched, seed=0).kept for t in range(10 * T, 10 * T + 5000)]
print(f"sampled mean over 5000 steady-state steps: {np.mean(kept):.3f}")
