"""Layer-wise measurements behind the stability and lesioning analyses.

Everything here works on a model snapshot and a :class:`~pld.data.Batch`;
nothing mutates the weights. Gradients are taken at full depth, without
dropout, so repeated calls are bitwise reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .autodiff import Tape, Tensor
from .data import Batch
from .schedule import GateVector
from .training import DivergenceError
from .transformer import Model, forward_model, mlm_loss, postln_block, preln_block

PROFILE_METRICS = ("weight_grad_norm", "input_grad_norm", "output_grad_norm", "norm_ratio",
                   "l2_distance", "arccos_deg", "residual_mean", "residual_mean_rel")


class InstrumentationError(RuntimeError):
    """A measured quantity came out NaN or infinite."""


class JacobianSizeError(ValueError):
    """The dense Jacobian requested by a check would be too large."""


@dataclass
class LayerProfile:
    layer: int
    weight_grad_norm: float = math.nan
    input_grad_norm: float = math.nan
    output_grad_norm: float = math.nan
    norm_ratio: float = math.nan
    l2_distance: float = math.nan
    arccos_deg: float = math.nan
    residual_mean: float = math.nan
    residual_mean_rel: float = math.nan
    flags: list[str] = field(default_factory=list)


def _finite_or_raise(values, what: str):
    arr = np.asarray(values, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise InstrumentationError(f"{what} is not finite at layer(s) {bad.tolist()}")
    return arr


def _backward_with_trace(model: Model, batch: Batch):
    trace: list[Tensor] = []
    with Tape() as tape:
        loss = mlm_loss(model, batch.tokens, batch.labels, batch.mask, gates=None, mode="eval",
                        trace=trace)
        for t in trace:
            t.retain_grad = True
    grads = tape.backward(loss)
    return float(loss.data), grads, trace


def layer_grad_norms(model: Model, batch: Batch) -> np.ndarray:
    """2-norm of each block's parameter gradient (all of its tensors flattened together)."""
    _, grads, _ = _backward_with_trace(model, batch)
    out = np.empty(model.config.L)
    for i in range(model.config.L):
        sq = sum(float(np.vdot(grads[n], grads[n])) for n in model.block_param_names(i) if n in grads)
        out[i] = math.sqrt(sq)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite weight gradient at layer(s) {np.flatnonzero(~np.isfinite(out)).tolist()}")
    return out


@dataclass
class NormRatios:
    ratios: np.ndarray        # NaN where excluded
    input_norms: np.ndarray
    output_norms: np.ndarray
    excluded: np.ndarray      # bool, output-grad norm was zero

    def mean_abs_log(self) -> float:
        r = self.ratios[~self.excluded]
        return float(np.mean(np.abs(np.log(r))))


def norm_preserving_ratio(model: Model, batch: Batch) -> NormRatios:
    """``||dE/dx_l|| / ||dE/dx_{l+1}||`` for each block, from one backward pass."""
    _, _, trace = _backward_with_trace(model, batch)
    norms = np.array([float(np.linalg.norm(t.grad)) for t in trace])
    inp, outp = norms[:-1], norms[1:]
    excluded = outp == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(excluded, np.nan, inp / np.where(excluded, 1.0, outp))
    _finite_or_raise(ratios[~excluded], "norm-preserving ratio")
    return NormRatios(ratios, inp, outp, excluded)


@dataclass
class Similarity:
    l2: np.ndarray            # mean ||x_out - x_in|| per layer
    arccos_deg: np.ndarray    # mean angle between x_in and x_out, degrees
    degenerate: np.ndarray    # per layer, count of zero-norm token vectors excluded


def _trace(model: Model, tokens) -> list[np.ndarray]:
    trace: list[Tensor] = []
    forward_model(tokens, None, model, mode="eval", trace=trace)
    return [t.data for t in trace]


def io_similarity(model: Model, batch: Batch) -> Similarity:
    """Per-layer input/output L2 distance and arccosine similarity, averaged over tokens."""
    xs = _trace(model, batch.tokens)
    L = model.config.L
    l2, ang, deg = np.empty(L), np.empty(L), np.zeros(L, dtype=int)
    for i in range(L):
        a = xs[i].reshape(-1, xs[i].shape[-1]).astype(np.float64)
        b = xs[i + 1].reshape(-1, a.shape[-1]).astype(np.float64)
        l2[i] = float(np.mean(np.linalg.norm(b - a, axis=1)))
        na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
        ok = (na > 0) & (nb > 0)
        deg[i] = int((~ok).sum())
        if not ok.any():
            ang[i] = np.nan
            continue
        cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
        ang[i] = float(np.mean(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))))
    return Similarity(l2, ang, deg)


@dataclass
class LesionResult:
    theta: float
    full_loss: float
    scaled: list[float]
    unscaled: list[float]
    gates: list[np.ndarray]

    @property
    def scaled_mean(self) -> float:
        return float(np.mean(self.scaled))

    @property
    def unscaled_mean(self) -> float:
        return float(np.mean(self.unscaled))

    def inflation(self, scaled: bool = False) -> float:
        return (self.scaled_mean if scaled else self.unscaled_mean) - self.full_loss


def lesion_gates(L: int, theta: float, seed: int) -> np.ndarray:
    """Uniform Bernoulli(theta) keep decisions for each layer, keyed by ``seed``."""
    return (rng.uniforms(seed, rng.LESION, 0, L) < theta).astype(np.int8)


def _loss(model: Model, batches: list[Batch], gates=None, scales=None) -> float:
    total, count = 0.0, 0
    for b in batches:
        loss = mlm_loss(model, b.tokens, b.labels, b.mask, gates=gates, mode="eval",
                        branch_scales=scales)
        total += float(loss.data) * b.n_masked
        count += b.n_masked
    return total / count


def lesion_eval(model: Model, theta: float, batches: list[Batch], seeds=range(5)) -> LesionResult:
    """Validation loss with whole blocks removed at random, for each seed.

    Both variants are reported: ``unscaled`` keeps the surviving blocks as
    they are, ``scaled`` multiplies their residual branches by ``1/theta``.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    L = model.config.L
    full = _loss(model, batches)
    scaled, unscaled, all_gates = [], [], []
    for s in seeds:
        g = lesion_gates(L, theta, s)
        gv = GateVector(g, np.full(L, theta))
        unscaled.append(_loss(model, batches, gv))
        if theta > 0:
            scaled.append(_loss(model, batches, gv, np.full(L, 1.0 / theta)))
        else:
            scaled.append(unscaled[-1])
        all_gates.append(g)
    return LesionResult(theta, full, scaled, unscaled, all_gates)


@dataclass
class ResidualMean:
    norm: np.ndarray          # ||mean over tokens of the block's residual output||
    relative: np.ndarray      # norm / mean token norm of the block output


def residual_mean(model: Model, batch: Batch) -> ResidualMean:
    """Mean residual-branch output per block (``x_{l+1} - x_l``), over batch and positions."""
    if not model.config.pre_norm:
        raise ValueError("residual_mean needs a pre-norm (preln or st) model")
    xs = _trace(model, batch.tokens)
    L = model.config.L
    norm, rel = np.empty(L), np.empty(L)
    for i in range(L):
        d = xs[i].shape[-1]
        r = (xs[i + 1] - xs[i]).reshape(-1, d).astype(np.float64)
        norm[i] = float(np.linalg.norm(r.mean(axis=0)))
        act = float(np.mean(np.linalg.norm(xs[i + 1].reshape(-1, d).astype(np.float64), axis=1)))
        rel[i] = norm[i] / act if act > 0 else math.nan
    return ResidualMean(norm, rel)


def run_blocks(model: Model, x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Apply blocks ``start..stop-1`` at full depth, evaluation mode, no tape."""
    cfg = model.config
    t = Tensor(x)
    for i in range(start, stop):
        w = model.block(i)
        t = postln_block(t, w) if cfg.variant == "postln" else preln_block(t, w)
    return t.data


MAX_JACOBIAN_SIZE = 4096


def identity_decomposition_check(model: Model, layer: int, batch: Batch, step: float = 1e-30) -> float:
    """Max discrepancy between ``dE/dx_l`` from reverse mode and the product
    ``dE/dx_L (I + d/dx_l sum_k f_k)`` built column by column.

    The residual Jacobian comes from complex-step forward differentiation
    through blocks ``l..L-1``, which is free of subtractive cancellation, so
    the two routes agree to rounding.
    """
    cfg = model.config
    if cfg.variant == "postln":
        raise ValueError("the identity decomposition holds for pre-norm blocks only")
    if not 0 <= layer < cfg.L:
        raise IndexError(f"layer {layer} out of range for L={cfg.L}")
    _, _, trace = _backward_with_trace(model, batch)
    x_l = trace[layer].data
    n = x_l.size
    if n > MAX_JACOBIAN_SIZE:
        raise JacobianSizeError(f"dense Jacobian of size {n}x{n} exceeds the limit of {MAX_JACOBIAN_SIZE}")
    g_l = trace[layer].grad.reshape(-1)
    g_L = trace[-1].grad.reshape(-1)

    base = x_l.astype(np.complex128)
    jac_res = np.empty((n, n))
    flat = base.reshape(-1)
    for j in range(n):
        flat[j] += 1j * step
        out = run_blocks(model, base, layer, cfg.L)
        flat[j] -= 1j * step
        col = out.imag.reshape(-1) / step
        col[j] -= 1.0
        jac_res[:, j] = col
    decomposed = g_L + g_L @ jac_res
    return float(np.max(np.abs(decomposed - g_l)))


def profile_layers(model: Model, batch: Batch) -> list[LayerProfile]:
    """All per-layer quantities for one model snapshot."""
    L = model.config.L
    wn = layer_grad_norms(model, batch)
    nr = norm_preserving_ratio(model, batch)
    sim = io_similarity(model, batch)
    rm = residual_mean(model, batch) if model.config.pre_norm else None
    out = []
    for i in range(L):
        p = LayerProfile(i, float(wn[i]), float(nr.input_norms[i]), float(nr.output_norms[i]),
                         float(nr.ratios[i]), float(sim.l2[i]), float(sim.arccos_deg[i]))
        if rm is not None:
            p.residual_mean, p.residual_mean_rel = float(rm.norm[i]), float(rm.relative[i])
        if nr.excluded[i]:
            p.flags.append("zero_output_grad")
        if sim.degenerate[i]:
            p.flags.append(f"degenerate_vectors={sim.degenerate[i]}")
        out.append(p)
    return out


def write_profiles_csv(path, profiles: list[LayerProfile], step: int = 0, seed: int = 0) -> None:
    """Long format: ``layer, metric, value, step, seed``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "metric", "value", "step", "seed"])
        for p in profiles:
            row = asdict(p)
            for m in PROFILE_METRICS:
                w.writerow([p.layer, m, repr(float(row[m])), step, seed])
