"""Central finite-difference checks for every autodiff op and the full model.

All checks run in float64. A non-scalar op output ``y`` is reduced to the
scalar ``sum(y * R)`` with a fixed random ``R`` so that every output element
contributes to the gradient being compared.

Error measure, per input tensor::

    max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_function(name: str, fn: Callable[..., Tensor], inputs: list[Tensor],
                   seed: int = 0, h: float = DEFAULT_STEP) -> CheckResult:
    """Compare the taped gradient of ``fn(*inputs)`` with central differences
    for every input that requires a gradient."""
    out = fn(*inputs)
    R = None
    if out.data.size != 1:
        R = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar(t: Tensor) -> Tensor:
        return t if R is None else ad.sum_(ad.mul(t, Tensor(R)))

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = scalar(fn(*inputs))
    tape.backward(loss)

    def value() -> float:
        return float(scalar(fn(*inputs)).data)

    errors = {}
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[t.name or f"x{k}"] = relative_error(analytic, numeric_grad(value, t.data, h))
    return CheckResult(name, errors)


def _t(gen: np.random.Generator, shape, name: str) -> Tensor:
    return Tensor(gen.standard_normal(shape), requires_grad=True, name=name)


def op_cases(seed: int = 0) -> list[tuple[str, Callable, list[Tensor]]]:
    """One (name, function, inputs) triple per differentiable op."""
    g = np.random.default_rng(seed)

    def fixed_gen():
        return np.random.Generator(np.random.Philox(seed + 1))

    labels = g.integers(0, 7, size=(2, 5))
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, 1] = mask[1, 3] = mask[1, 4] = True
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    cases = [
        ("add", ad.add, [_t(g, (3, 4), "a"), _t(g, (4,), "b")]),
        ("sub", ad.sub, [_t(g, (3, 4), "a"), _t(g, (3, 1), "b")]),
        ("mul", ad.mul, [_t(g, (2, 3, 4), "a"), _t(g, (3, 4), "b")]),
        ("scale", lambda a: ad.scale(a, -1.7), [_t(g, (3, 4), "a")]),
        ("matmul_2d", ad.matmul, [_t(g, (3, 4), "a"), _t(g, (4, 5), "b")]),
        ("matmul_3d_2d", ad.matmul, [_t(g, (2, 3, 4), "a"), _t(g, (4, 5), "b")]),
        ("matmul_batched", ad.matmul, [_t(g, (2, 3, 4), "a"), _t(g, (2, 4, 5), "b")]),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), [_t(g, (3, 4), "a")]),
        ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [_t(g, (2, 3, 4), "a")]),
        ("sum", lambda a: ad.sum_(a, axis=1), [_t(g, (3, 4), "a")]),
        ("mean", lambda a: ad.mean(a), [_t(g, (3, 4), "a")]),
        ("layer_norm", lambda x, w, b: ad.layer_norm(x, w, b, 1e-5),
         [_t(g, (2, 3, 6), "x"), _t(g, (6,), "gain"), _t(g, (6,), "bias")]),
        ("softmax", lambda a: ad.softmax(a, axis=-1), [_t(g, (3, 5), "a")]),
        ("gelu", ad.gelu, [_t(g, (4, 6), "x")]),
        ("dropout", lambda a: ad.dropout(a, 0.3, fixed_gen()), [_t(g, (4, 6), "x")]),
        ("linear", ad.linear, [_t(g, (2, 3, 4), "x"), _t(g, (4, 5), "w"), _t(g, (5,), "b")]),
        ("linear_nobias", ad.linear, [_t(g, (3, 4), "x"), _t(g, (4, 5), "w")]),
        ("attention_core", lambda q, k, v: ad.attention_core(q, k, v, 0.2, fixed_gen()),
         [_t(g, (2, 2, 4, 3), "q"), _t(g, (2, 2, 4, 3), "k"), _t(g, (2, 2, 4, 3), "v")]),
        ("multi_head_attention",
         lambda x, wq, wk, wv: ad.multi_head_attention(x, wq, wk, wv, 2, 0.2, fixed_gen()),
         [_t(g, (2, 4, 6), "x"), _t(g, (6, 6), "wq"), _t(g, (6, 6), "wk"), _t(g, (6, 6), "wv")]),
        ("embedding_lookup", lambda t: ad.embedding_lookup(t, ids), [_t(g, (6, 4), "table")]),
        ("cross_entropy_with_mask", lambda z: ad.cross_entropy_with_mask(z, labels, mask),
         [_t(g, (2, 5, 7), "logits")]),
    ]
    return cases


def run_op_checks(seed: int = 0, h: float = DEFAULT_STEP) -> list[CheckResult]:
    return [check_function(name, fn, inputs, seed, h) for name, fn, inputs in op_cases(seed)]


def check_model(variant: str = "preln", L: int = 2, d: int = 8, H: int = 2, S: int = 6, B: int = 2,
                V: int = 11, seed: int = 0, h: float = DEFAULT_STEP, gates=None,
                mode: str = "train") -> CheckResult:
    """Finite-difference check of the masked-LM loss against every model parameter.

    ``mode="train"`` includes dropout (with a generator re-seeded on every
    evaluation) and, for ST models with ``gates``, the ``1/p`` scaling.
    """
    from .transformer import Model, ModelConfig, mlm_loss

    cfg = ModelConfig(L=L, d=d, H=H, V=V, S=S, variant=variant, dropout=0.1)
    model = Model.init(cfg, seed, np.float64)
    g = np.random.default_rng(seed)
    # larger weights than the 0.02 init so every path carries signal
    for name, t in model.named_parameters():
        t.data[...] += 0.3 * g.standard_normal(t.shape)
    tokens = g.integers(0, V, size=(B, S))
    labels = g.integers(0, V, size=(B, S))
    mask = g.random((B, S)) < 0.5
    mask[0, 0] = True

    def loss() -> Tensor:
        gen = np.random.Generator(np.random.Philox(seed + 7))
        return mlm_loss(model, tokens, labels, mask, gates=gates, mode=mode, gen=gen)

    with Tape() as tape:
        value = loss()
    grads = tape.backward(value)

    errors = {}
    for name, t in model.named_parameters():
        analytic = grads.get(name, np.zeros_like(t.data))
        errors[name] = relative_error(analytic, numeric_grad(lambda: float(loss().data), t.data, h))
    return CheckResult(f"model[{variant}]", errors)
