"""Progressive layer-drop schedule, gate sampling and FLOPS accounting.

The temporal keep ratio decays from 1 towards a floor ``theta_limit``::

    theta(t) = (1 - theta_limit) * exp(-gamma * t) + theta_limit

Within a step, the keep probability starts at 1 for the bottom block and
drops by ``(1 - theta(t)) / L`` after each block, so block ``l`` (1-based)
is kept with probability ``1 - (l - 1) * (1 - theta(t)) / L``.

Steady-state expected depth is therefore ``L - (1 - theta_limit)(L - 1)/2``,
which is ``(3L + 1)/4`` for ``theta_limit = 0.5``; 9.25 blocks out of 12.
Decrementing before the first block instead would give ``(3L - 1)/4``; both
are roughly ``3L/4``, i.e. about 9 of 12 blocks and ~25% fewer block FLOPS.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng

log = logging.getLogger(__name__)

RECOMMENDED_THETA = (0.5, 0.9)


def gamma_default(total_steps: int) -> float:
    """``100 / T``: puts theta(T) within ~1e-5 of the floor for theta_limit >= 0.5."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    return 100.0 / total_steps


@dataclass(frozen=True)
class DropSchedule:
    theta_limit: float
    gamma: float
    total_steps: int
    layers: int

    def __post_init__(self):
        if not 0.0 < self.theta_limit <= 1.0:
            raise ValueError(f"theta_limit must be in (0, 1], got {self.theta_limit}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        lo, hi = RECOMMENDED_THETA
        if not lo <= self.theta_limit <= hi:
            log.warning("theta_limit=%g is outside the recommended range [%g, %g]; "
                        "small values can make training diverge", self.theta_limit, lo, hi)

    @classmethod
    def from_steps(cls, theta_limit: float, total_steps: int, layers: int,
                   gamma: float | None = None) -> "DropSchedule":
        if gamma is None:
            gamma = gamma_default(total_steps)
        return cls(theta_limit, gamma, total_steps, layers)


@dataclass
class GateVector:
    """Per-block gates and the keep probabilities that produced them.

    ``gates`` has shape ``(L,)``, or ``(L, 2)`` when each sub-layer has its
    own gate.
    """

    gates: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.gates = np.asarray(self.gates, dtype=np.int8)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.gates.shape[0] != self.probs.shape[0]:
            raise ValueError("gates and probs must have one entry per layer")

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def kept(self) -> int:
        if self.gates.ndim == 1:
            return int(self.gates.sum())
        return int(self.gates.any(axis=1).sum())

    @classmethod
    def all_on(cls, layers: int) -> "GateVector":
        return cls(np.ones(layers), np.ones(layers))

    @classmethod
    def all_off(cls, layers: int) -> "GateVector":
        return cls(np.zeros(layers), np.ones(layers))


@dataclass
class GateTrace(GateVector):
    step: int = field(default=0)


def theta_bar(t, sched: DropSchedule):
    """Global keep ratio at step ``t`` (scalar or array; ``math.inf`` gives the floor)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("step must be non-negative")
    q = sched.theta_limit
    if np.ndim(t) == 0:
        return (1.0 - q) * math.exp(-sched.gamma * t) + q
    return (1.0 - q) * np.exp(-sched.gamma * np.asarray(t, dtype=np.float64)) + q


def layer_keep_probs(t, sched: DropSchedule) -> np.ndarray:
    """Keep probabilities ``p_1..p_L`` at step ``t``, traced exactly as the
    per-step loop does it: ``p = 1`` then ``p -= step`` after each block."""
    theta = theta_bar(t, sched)
    step = (1.0 - theta) / sched.layers
    p = 1.0
    out = np.empty(sched.layers)
    for l in range(sched.layers):
        out[l] = p
        p = p - step
    return out


def sample_gates(t: int, sched: DropSchedule, seed: int, per_sublayer: bool = False) -> GateTrace:
    """Bernoulli gates for step ``t``; a pure function of ``(seed, t, schedule)``.

    Layer ``l`` uses uniform number ``l`` of the ``(seed, t)`` counter block,
    so the outcome for a layer does not depend on evaluation order.
    """
    probs = layer_keep_probs(t, sched)
    L = sched.layers
    if per_sublayer:
        u = rng.uniforms(seed, rng.GATES, int(t), 2 * L).reshape(L, 2)
        gates = u < probs[:, None]
    else:
        gates = rng.uniforms(seed, rng.GATES, int(t), L) < probs
    return GateTrace(gates, probs, step=int(t))


def expected_depth(sched: DropSchedule, t) -> float:
    """Expected number of kept blocks at step ``t``."""
    return float(layer_keep_probs(t, sched).sum())


def steady_state_depth(sched: DropSchedule) -> float:
    return expected_depth(sched, math.inf)


def expected_depth_mean(sched: DropSchedule) -> float:
    """Average expected depth over ``t = 0..T``."""
    t = np.arange(sched.total_steps + 1, dtype=np.float64)
    theta = theta_bar(t, sched)
    L = sched.layers
    # sum_l (1 - (l-1)(1-theta)/L) = L - (1-theta)(L-1)/2
    return float(np.mean(L - (1.0 - theta) * (L - 1) / 2.0))


# Multiply-add FLOPs per token for one forward pass (a multiply-add counts 2).
# LayerNorm, softmax, GELU, residual adds and the embedding gather are
# linear-cost terms and are excluded. Backward costs 2x forward for every
# term, so training/forward ratios are identical.
FLOP_TABLE = {
    "qkv_projection": lambda d, S, V: 3 * 2 * d * d,
    "attention_scores": lambda d, S, V: 2 * S * d,
    "attention_values": lambda d, S, V: 2 * S * d,
    "output_projection": lambda d, S, V: 2 * d * d,
    "ffn_in": lambda d, S, V: 2 * d * 4 * d,
    "ffn_out": lambda d, S, V: 2 * 4 * d * d,
}
HEAD_FLOP_TABLE = {
    "mlm_head": lambda d, S, V: 2 * d * V,
}
TRAIN_MULTIPLIER = 3


def block_flops(config) -> int:
    """Training FLOPs of one block for one sequence."""
    d, S, V = config.d, config.S, config.V
    per_token = sum(f(d, S, V) for f in FLOP_TABLE.values())
    return TRAIN_MULTIPLIER * per_token * S


def head_flops(config) -> int:
    d, S, V = config.d, config.S, config.V
    return TRAIN_MULTIPLIER * S * sum(f(d, S, V) for f in HEAD_FLOP_TABLE.values())


def flops_per_step(sched: DropSchedule, config, t, include_head: bool = True) -> float:
    """Expected training FLOPs at step ``t`` normalised to the full-depth model."""
    blk = block_flops(config)
    head = head_flops(config) if include_head else 0
    full = blk * config.L + head
    return (blk * expected_depth(sched, t) + head) / full


def block_flops_fraction(sched: DropSchedule, t) -> float:
    return expected_depth(sched, t) / sched.layers


def polynomial_reference(t, sched: DropSchedule, degree: int):
    """Thresholded polynomial keep-ratio curve ``max(floor, 1 - (t/T)^degree)``.

    Reference only, for comparison plots against the exponential schedule.
    """
    x = np.asarray(t, dtype=np.float64) / sched.total_steps
    return np.maximum(sched.theta_limit, 1.0 - x ** degree)


def schedule_table(sched: DropSchedule, config=None, steps=None, reference_degrees=()):
    """Rows of ``step, theta, p_1..p_L, expected_depth, flops_fraction``
    (plus ``poly_<k>`` reference columns when requested)."""
    if steps is None:
        steps = range(sched.total_steps + 1)
    header = (["step", "theta"] + [f"p_{l + 1}" for l in range(sched.layers)]
              + ["expected_depth", "flops_fraction"] + [f"poly_{k}" for k in reference_degrees])
    rows = []
    for t in steps:
        p = layer_keep_probs(t, sched)
        frac = flops_per_step(sched, config, t) if config is not None else block_flops_fraction(sched, t)
        row = [t, float(theta_bar(t, sched)), *p.tolist(), float(p.sum()), float(frac)]
        row += [float(polynomial_reference(t, sched, k)) for k in reference_degrees]
        rows.append(row)
    return header, rows
