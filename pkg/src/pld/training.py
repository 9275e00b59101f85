"""Desk-scale masked-LM training with progressive layer dropping."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rng
from ._runtime import keep_large_allocations_on_heap
from .autodiff import Tape
from .data import MLMData, VOCAB_SIZE, Batch, load_corpus
from .schedule import DropSchedule, GateVector, gamma_default, sample_gates, theta_bar
from .transformer import Model, ModelConfig, load_checkpoint, mlm_loss, save_checkpoint

log = logging.getLogger(__name__)

METRICS_FIELDS = ("step", "train_loss", "val_loss", "lr", "theta", "kept_blocks",
                  "block_flops_fraction", "ms_per_step")


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class ScheduleConfig:
    theta_limit: float = 0.5
    gamma: float | None = None   # None -> 100 / total_steps


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    grad_clip: float = 1.0


@dataclass
class LRConfig:
    peak: float = 3e-4
    warmup_ratio: float = 0.02
    decay_rate: float = 0.99
    decay_step: int = 1000

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in (0, 1)")
        if self.peak <= 0:
            raise ValueError("peak learning rate must be positive")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(V=VOCAB_SIZE))
    schedule: ScheduleConfig | None = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr: LRConfig = field(default_factory=LRConfig)
    batch_size: int = 32
    total_steps: int = 5000
    seed: int = 0
    mask_prob: float = 0.15
    corpus: str | None = None
    eval_interval: int = 250
    eval_batches: int = 8
    checkpoint_interval: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.model.V != VOCAB_SIZE:
            raise ValueError(f"model.V must equal the tokenizer vocabulary ({VOCAB_SIZE})")

    def drop_schedule(self) -> DropSchedule | None:
        if self.schedule is None:
            return None
        gamma = self.schedule.gamma if self.schedule.gamma is not None else gamma_default(self.total_steps)
        return DropSchedule(self.schedule.theta_limit, gamma, self.total_steps, self.model.L)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = d.pop("model", {})
        sched = d.pop("schedule", {})
        kw = dict(
            model=ModelConfig.from_dict({"V": VOCAB_SIZE, **model}),
            schedule=None if sched in (None, "none") else ScheduleConfig(**sched),
            optimizer=OptimizerConfig(**d.pop("optimizer", {})),
            lr=LRConfig(**d.pop("lr", {})),
        )
        return cls(**kw, **d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def lr_at(step: float, config: TrainConfig) -> float:
    """Linear warmup to the peak, then ``peak * rate ** ((step - warmup) / decay_step)``."""
    c = config.lr
    warmup = c.warmup_ratio * config.total_steps
    if step < warmup:
        return c.peak * step / warmup
    return c.peak * c.decay_rate ** ((step - warmup) / c.decay_step)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    total = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if not math.isfinite(total):
        raise DivergenceError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        grads = {k: g * s for k, g in grads.items()}
    return grads, total


def adam_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
              config: OptimizerConfig) -> float:
    """In-place Adam update of every parameter that has a gradient.

    Parameters without a gradient this step (gated-off blocks) are left
    untouched, including their moments and weight decay. Decay is decoupled
    (``w -= lr * wd * w``) and skipped for 1-D tensors (biases, norm gains).
    Returns the pre-clipping global gradient norm.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k}")
    grads, norm = clip_by_global_norm(grads, config.grad_clip)
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        w = params[name].data
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        if config.weight_decay and w.ndim > 1:
            w -= (lr * config.weight_decay) * w
        w -= lr * mhat / (np.sqrt(vhat) + config.eps)
    return norm


def evaluate(model: Model, batches: list[Batch]) -> float:
    """Full-depth, unscaled, dropout-free mean masked cross-entropy (token-weighted)."""
    total, count = 0.0, 0
    for b in batches:
        loss = mlm_loss(model, b.tokens, b.labels, b.mask, gates=None, mode="eval")
        total += float(loss.data) * b.n_masked
        count += b.n_masked
    return total / count


def evaluate_checkpoint(directory, batches: list[Batch], expect_config: ModelConfig | None = None) -> float:
    model, _ = load_checkpoint(directory, expect_config)
    return evaluate(model, batches)


@dataclass
class TrainResult:
    model: Model
    rows: list[dict]
    out_dir: Path | None
    total_kept: int = 0

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows if r[name] != ""]

    @property
    def final_val_loss(self) -> float:
        return [r["val_loss"] for r in self.rows if r["val_loss"] != ""][-1]

    def train_rows(self) -> list[dict]:
        return [r for r in self.rows if r["step"] > 0]


def _fmt(v) -> str:
    if v == "" or v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRICS_FIELDS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train(config: TrainConfig, out_dir=None, data: MLMData | None = None) -> TrainResult:
    """Run the progressive-layer-dropping loop (or the full-depth baseline when
    ``config.schedule`` is None).

    Step ``t`` (1-based): keep ratio, per-layer probabilities, gates, forward
    over kept blocks only, masked-LM loss, backward, Adam on the parameters
    that took part. Validation runs at full depth every ``eval_interval``
    steps and at steps 0 and T.
    """
    keep_large_allocations_on_heap()
    cfg = config
    mc = cfg.model
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    if data is None:
        data = MLMData(load_corpus(cfg.corpus), mc.S, cfg.batch_size, cfg.mask_prob, cfg.seed)
    val = data.validation_batches(cfg.eval_batches)
    sched = cfg.drop_schedule()
    model = Model.init(mc, cfg.seed, np.float32)
    state = OptimizerState()

    rows: list[dict] = []
    row0 = dict.fromkeys(METRICS_FIELDS, "")
    row0.update(step=0, val_loss=evaluate(model, val), lr=lr_at(0, cfg), theta=1.0,
                kept_blocks=mc.L, block_flops_fraction=1.0)
    rows.append(row0)

    kept_total = 0
    for t in range(1, cfg.total_steps + 1):
        theta = theta_bar(t, sched) if sched is not None else 1.0
        gates = (sample_gates(t, sched, cfg.seed, per_sublayer=mc.gate_mode == "sublayer")
                 if sched is not None else GateVector.all_on(mc.L))
        batch = data.train_batch(t)
        lr = lr_at(t, cfg)

        t0 = time.perf_counter()
        with Tape() as tape:
            loss = mlm_loss(model, batch.tokens, batch.labels, batch.mask, gates=gates,
                            mode="train", gen=rng.fast_generator(cfg.seed, rng.DROPOUT, t))
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            _abort(model, out, t, "non-finite loss")
        grads = tape.backward(loss)
        try:
            adam_step(model.params, grads, state, lr, cfg.optimizer)
        except DivergenceError as exc:
            _abort(model, out, t, str(exc))
        ms = (time.perf_counter() - t0) * 1e3

        kept_total += gates.kept
        row = dict.fromkeys(METRICS_FIELDS, "")
        row.update(step=t, train_loss=loss_val, lr=lr, theta=theta, kept_blocks=gates.kept,
                   block_flops_fraction=kept_total / (mc.L * t), ms_per_step=ms)
        if t % cfg.eval_interval == 0 or t == cfg.total_steps:
            row["val_loss"] = evaluate(model, val)
            log.info("step %d train %.4f val %.4f kept %d", t, loss_val, row["val_loss"], gates.kept)
        rows.append(row)
        if out is not None and cfg.checkpoint_interval and t % cfg.checkpoint_interval == 0:
            save_checkpoint(model, out / "checkpoints" / f"step_{t:06d}", {"step": t})

    if out is not None:
        save_checkpoint(model, out / "checkpoint", {"step": cfg.total_steps})
        write_metrics(rows, out / "metrics.csv")
    return TrainResult(model, rows, out, kept_total)


def _abort(model: Model, out: Path | None, step: int, reason: str):
    # weights still hold the last good update; nothing was applied this step
    if out is not None:
        save_checkpoint(model, out / "last_good", {"step": step - 1, "reason": reason})
    raise DivergenceError(f"training diverged at step {step}: {reason}")
