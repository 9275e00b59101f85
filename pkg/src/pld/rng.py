"""Counter-based random streams.

Every random draw in a run is addressed by ``(seed, stream, step)``: the
Philox key is ``(seed, stream)`` and the step goes into the counter, so a
draw never depends on how many draws happened before it.
"""

from __future__ import annotations

import numpy as np

GATES = 0
DROPOUT = 1
DATA = 2
LESION = 3
INIT = 4
EVAL_DATA = 5


def generator(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Generator positioned at the start of block ``step`` of ``stream``."""
    if seed < 0 or step < 0:
        raise ValueError("seed and step must be non-negative")
    bitgen = np.random.Philox(key=[int(seed), int(stream)], counter=[0, int(step), 0, 0])
    return np.random.Generator(bitgen)


def uniforms(seed: int, stream: int, step: int, n: int) -> np.ndarray:
    """``n`` uniforms in [0, 1); element ``i`` depends only on (seed, stream, step, i)."""
    return generator(seed, stream, step).random(n)


def fast_generator(seed: int, stream: int, step: int) -> np.random.Generator:
    """Bulk-noise generator (SFC64) seeded from ``(seed, stream, step)``.

    Used for dropout masks, where raw throughput matters and the per-element
    prefix property of :func:`generator` is not needed.
    """
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence([seed, stream, step])))
