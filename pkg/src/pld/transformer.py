"""PostLN, PreLN and Switchable-Transformer (ST) blocks and the masked-LM model.

Model layout (BERT-style, bidirectional attention)::

    tokens -> token emb + learned position emb -> LayerNorm
           -> L blocks -> [final LayerNorm, PreLN/ST only]
           -> logits = x @ token_emb.T + head.bias   (tied output projection)

Weights are truncated-normal (std 0.02, cut at 2 std) for every projection
and embedding, zeros for biases and ones for LayerNorm gains.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rng_mod
from .autodiff import (ContractError, DimensionError, Tensor, add, multi_head_attention,
                       cross_entropy_with_mask, dropout, embedding_lookup, gelu, layer_norm,
                       linear, matmul, reshape, scale, transpose)
from .schedule import GateVector

VARIANTS = ("postln", "preln", "st")
CHECKPOINT_FORMAT = "pld-checkpoint/1"


@dataclass
class ModelConfig:
    L: int = 6
    d: int = 64
    H: int = 4
    V: int = 100
    S: int = 64
    variant: str = "st"
    dropout: float = 0.1
    ln_eps: float = 1e-5
    init_std: float = 0.02
    # "block": one gate per block (both sub-layers); "sublayer": one gate each
    gate_mode: str = "block"
    tied_head: bool = True

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.d % self.H:
            raise ValueError(f"d={self.d} is not divisible by H={self.H}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.gate_mode not in ("block", "sublayer"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")
        if not self.tied_head:
            raise ValueError("only the tied output head is implemented")

    @property
    def pre_norm(self) -> bool:
        return self.variant in ("preln", "st")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BlockWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    heads: int = 1
    eps: float = 1e-5

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ValueError(f"d={d} is not divisible by heads={self.heads}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.w1.shape != (d, 4 * d) or self.w2.shape != (4 * d, d):
            raise DimensionError(f"FFN weights must be {d}x{4 * d} and {4 * d}x{d}")

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("heads", "eps")}


BLOCK_KEYS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


def _truncated_normal(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class Model:
    """Named parameter collection plus the config it was built for."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        gen = rng_mod.generator(seed, rng_mod.INIT)
        d, V, S, std = config.d, config.V, config.S, config.init_std
        shapes: list[tuple[str, tuple, str]] = [
            ("embed.tok", (V, d), "normal"),
            ("embed.pos", (S, d), "normal"),
            ("embed.ln_g", (d,), "ones"),
            ("embed.ln_b", (d,), "zeros"),
        ]
        for i in range(config.L):
            p = f"blocks.{i}."
            shapes += [
                (p + "wq", (d, d), "normal"), (p + "wk", (d, d), "normal"),
                (p + "wv", (d, d), "normal"), (p + "wo", (d, d), "normal"),
                (p + "w1", (d, 4 * d), "normal"), (p + "b1", (4 * d,), "zeros"),
                (p + "w2", (4 * d, d), "normal"), (p + "b2", (d,), "zeros"),
                (p + "ln1_g", (d,), "ones"), (p + "ln1_b", (d,), "zeros"),
                (p + "ln2_g", (d,), "ones"), (p + "ln2_b", (d,), "zeros"),
            ]
        if config.pre_norm:
            shapes += [("final.ln_g", (d,), "ones"), ("final.ln_b", (d,), "zeros")]
        shapes.append(("head.bias", (V,), "zeros"))

        params = {}
        for name, shape, kind in shapes:
            if kind == "normal":
                arr = _truncated_normal(gen, shape, std)
            elif kind == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def block(self, i: int) -> BlockWeights:
        p = f"blocks.{i}."
        return BlockWeights(**{k: self.params[p + k] for k in BLOCK_KEYS},
                            heads=self.config.H, eps=self.config.ln_eps)

    def block_param_names(self, i: int) -> list[str]:
        return [f"blocks.{i}.{k}" for k in BLOCK_KEYS]

    @property
    def dtype(self):
        return self.params["embed.tok"].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {n: Tensor(t.data.astype(dtype), requires_grad=True, name=n)
                                   for n, t in self.params.items()})

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def with_variant(self, variant: str) -> "Model":
        """Same weights under a different block variant (final norm added or dropped)."""
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "variant": variant})
        params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()
                  if not n.startswith("final.")}
        if cfg.pre_norm:
            d = cfg.d
            params["final.ln_g"] = Tensor(np.ones(d, dtype=self.dtype), requires_grad=True, name="final.ln_g")
            params["final.ln_b"] = Tensor(np.zeros(d, dtype=self.dtype), requires_grad=True, name="final.ln_b")
        params["head.bias"] = params.pop("head.bias")
        return Model(cfg, params)

    def zero_residual_weights(self) -> "Model":
        """Copy with every attention/FFN weight and bias set to zero."""
        m = self.copy()
        for i in range(self.config.L):
            for k in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"):
                m.params[f"blocks.{i}.{k}"].data[...] = 0
        return m


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected [S, d] or [B, S, d] input, got {x.shape}")


def self_attention(x: Tensor, w: BlockWeights, dropout_rate: float = 0.0,
                   gen: np.random.Generator | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention, full (bidirectional) mask."""
    d = w.wq.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"self_attention: input width {x.shape[-1]} != model width {d}")
    xb, squeeze = _as_batch(x)
    rate = dropout_rate if gen is not None else 0.0
    ctx = multi_head_attention(xb, w.wq, w.wk, w.wv, w.heads, rate, gen)
    out = linear(ctx, w.wo)
    return reshape(out, x.shape) if squeeze else out


def feed_forward(x: Tensor, w: BlockWeights, dropout_rate: float = 0.0,
                 gen: np.random.Generator | None = None) -> Tensor:
    d = w.w1.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"feed_forward: input width {x.shape[-1]} != model width {d}")
    out = linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2)
    if dropout_rate > 0.0 and gen is not None:
        out = dropout(out, dropout_rate, gen)
    return out


def _scaled(t: Tensor, s: float) -> Tensor:
    return t if s == 1.0 else scale(t, s)


def postln_block(x: Tensor, w: BlockWeights, branch_scale: float = 1.0,
                 dropout_rate: float = 0.0, gen=None) -> Tensor:
    h = layer_norm(add(x, _scaled(self_attention(x, w, dropout_rate, gen), branch_scale)),
                   w.ln1_g, w.ln1_b, w.eps)
    return layer_norm(add(h, _scaled(feed_forward(h, w, dropout_rate, gen), branch_scale)),
                      w.ln2_g, w.ln2_b, w.eps)


def preln_block(x: Tensor, w: BlockWeights, branch_scale: float = 1.0,
                dropout_rate: float = 0.0, gen=None, gates=(1, 1)) -> Tensor:
    h = x
    if gates[0]:
        a = self_attention(layer_norm(x, w.ln1_g, w.ln1_b, w.eps), w, dropout_rate, gen)
        h = add(x, _scaled(a, branch_scale))
    if not gates[1]:
        return h
    f = feed_forward(layer_norm(h, w.ln2_g, w.ln2_b, w.eps), w, dropout_rate, gen)
    return add(h, _scaled(f, branch_scale))


def st_block(x: Tensor, w: BlockWeights, gate, p: float, training: bool = True,
             dropout_rate: float = 0.0, gen=None) -> Tensor:
    """Switchable-Transformer block.

    ``gate == 0`` returns ``x`` itself and records nothing. Otherwise this is
    a PreLN block whose residual branches are scaled by ``1/p`` in training
    and left unscaled in evaluation. ``gate`` may be a pair for per-sub-layer
    gating.
    """
    if not p > 0.0:
        raise ContractError(f"keep probability must be positive, got {p}")
    pair = tuple(int(g) for g in np.broadcast_to(np.asarray(gate), (2,)))
    if pair == (0, 0):
        return x
    s = 1.0 / p if training else 1.0
    return preln_block(x, w, s, dropout_rate, gen, gates=pair)


def _layer_gates(gates, i: int) -> tuple[int, int]:
    g = gates.gates[i]
    return tuple(int(v) for v in np.broadcast_to(g, (2,)))


def forward_model(tokens, gates: GateVector | None, model: Model, mode: str = "eval",
                  gen: np.random.Generator | None = None, trace: list | None = None,
                  branch_scales=None) -> Tensor:
    """Logits ``[..., S, V]`` for token ids ``[S]`` or ``[B, S]``.

    ``gates=None`` runs full depth. In ``"train"`` mode ST blocks rescale by
    ``1/p`` and dropout is active when ``gen`` is given. ``branch_scales``
    overrides the per-layer residual scale (used by lesioning). ``trace``
    collects the block boundary tensors ``x_0 .. x_L``.
    """
    cfg = model.config
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    tokens = np.asarray(tokens)
    S = tokens.shape[-1]
    if S > cfg.S:
        raise DimensionError(f"sequence length {S} exceeds configured maximum {cfg.S}")
    if gates is not None and len(gates) != cfg.L:
        raise DimensionError(f"got {len(gates)} gates for {cfg.L} layers")
    drop = cfg.dropout if (training and gen is not None) else 0.0

    pos = model["embed.pos"]
    pos_rows = embedding_lookup(pos, np.arange(S)) if S < cfg.S else pos
    x = add(embedding_lookup(model["embed.tok"], tokens), pos_rows)
    x = layer_norm(x, model["embed.ln_g"], model["embed.ln_b"], cfg.ln_eps)

    for i in range(cfg.L):
        if trace is not None:
            trace.append(x)
        pair = (1, 1) if gates is None else _layer_gates(gates, i)
        if pair == (0, 0):
            continue
        w = model.block(i)
        if branch_scales is not None:
            s = float(branch_scales[i])
        elif cfg.variant == "st" and training and gates is not None:
            p = float(gates.probs[i])
            if not p > 0.0:
                raise ContractError(f"keep probability must be positive, got {p} at layer {i}")
            s = 1.0 / p
        else:
            s = 1.0
        if cfg.variant == "postln":
            if pair != (1, 1):
                raise ValueError("per-sub-layer gates are only defined for pre-norm blocks")
            x = postln_block(x, w, s, drop, gen)
        else:
            x = preln_block(x, w, s, drop, gen, gates=pair)
    if trace is not None:
        trace.append(x)

    if cfg.pre_norm:
        x = layer_norm(x, model["final.ln_g"], model["final.ln_b"], cfg.ln_eps)
    return add(matmul(x, transpose(model["embed.tok"], (1, 0))), model["head.bias"])


def mlm_loss(model: Model, tokens, labels, mask, gates=None, mode="eval", gen=None,
             trace=None, branch_scales=None) -> Tensor:
    logits = forward_model(tokens, gates, model, mode, gen, trace, branch_scales)
    return cross_entropy_with_mask(logits, labels, mask)


def save_checkpoint(model: Model, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus ``weights.bin`` (little-endian, concatenated)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(model.dtype).newbyteorder("<")
    entries, offset = [], 0
    with open(directory / "weights.bin", "wb") as fh:
        for name, t in model.named_parameters():
            buf = np.ascontiguousarray(t.data, dtype=dtype).tobytes()
            entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
            fh.write(buf)
            offset += len(buf)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": dtype.str,
        "data_file": "weights.bin",
        "total_bytes": offset,
        "config": model.config.to_dict(),
        "params": entries,
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


class CheckpointError(ValueError):
    pass


def load_checkpoint(directory, expect_config: ModelConfig | None = None) -> tuple[Model, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise CheckpointError("checkpoint config does not match the requested model config")
    dtype = np.dtype(manifest["dtype"])
    raw = (directory / manifest["data_file"]).read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise CheckpointError("weights file size does not match manifest")
    params = {}
    for e in manifest["params"]:
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = Tensor(arr.astype(dtype.newbyteorder("=")), requires_grad=True, name=e["name"])
    model = Model(config, params)
    expected = Model.init(config, 0, np.float32).params
    if set(expected) != set(params) or any(expected[n].shape != params[n].shape for n in params):
        raise CheckpointError("checkpoint parameters do not match the model config")
    return model, manifest.get("extra", {})
