"""Character-level corpus handling and masked-LM batch construction."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import rng

PAD, MASK, UNK = 0, 1, 2
SPECIALS = ("[PAD]", "[MASK]", "[UNK]")
_CHARS = "\n" + "".join(chr(c) for c in range(32, 127))


class CharTokenizer:
    """Fixed vocabulary: 3 specials, newline and printable ASCII (99 ids)."""

    def __init__(self):
        self.itos = list(SPECIALS) + list(_CHARS)
        self.stoi = {ch: i for i, ch in enumerate(self.itos) if i >= len(SPECIALS)}
        self.first_regular = len(SPECIALS)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> np.ndarray:
        return np.fromiter((self.stoi.get(c, UNK) for c in text), dtype=np.int64, count=len(text))

    def decode(self, ids) -> str:
        return "".join(self.itos[i] if i >= self.first_regular else ("_" if i == MASK else "?")
                       for i in np.asarray(ids).tolist())


TOKENIZER = CharTokenizer()
VOCAB_SIZE = TOKENIZER.vocab_size


def load_corpus(path=None) -> str:
    if path is None:
        return resources.files("pld").joinpath("data/tiny_corpus.txt").read_text(encoding="utf-8")
    return Path(path).read_text(encoding="utf-8")


@dataclass
class Batch:
    tokens: np.ndarray   # [B, S] model input, with masking applied
    labels: np.ndarray   # [B, S] original ids
    mask: np.ndarray     # [B, S] bool, positions that enter the loss

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def apply_mlm_mask(ids: np.ndarray, mask_prob: float, gen: np.random.Generator,
                   vocab_size: int = VOCAB_SIZE) -> Batch:
    """Select each position with ``mask_prob``; selected positions become
    [MASK] 80% of the time, a random regular token 10%, unchanged 10%."""
    select = gen.random(ids.shape) < mask_prob
    action = gen.random(ids.shape)
    random_ids = gen.integers(TOKENIZER.first_regular, vocab_size, size=ids.shape)
    tokens = ids.copy()
    tokens[select & (action < 0.8)] = MASK
    swap = select & (action >= 0.8) & (action < 0.9)
    tokens[swap] = random_ids[swap]
    return Batch(tokens, ids.copy(), select)


class MLMData:
    """Deterministic train/validation batch source over one corpus.

    The first ``1 - val_fraction`` of the token stream is training data, the
    rest validation. Training batch ``t`` depends only on ``(seed, t)``.
    """

    def __init__(self, text: str, seq_len: int, batch_size: int, mask_prob: float, seed: int,
                 val_fraction: float = 0.1):
        if not 0.0 <= mask_prob < 1.0:
            raise ValueError(f"mask_prob must be in [0, 1), got {mask_prob}")
        ids = TOKENIZER.encode(text)
        n_val = int(len(ids) * val_fraction)
        self.train_ids = ids[: len(ids) - n_val]
        self.val_ids = ids[len(ids) - n_val:]
        if len(self.train_ids) < seq_len + 1 or (val_fraction > 0 and len(self.val_ids) < seq_len):
            raise ValueError(f"corpus too short for sequences of length {seq_len}")
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.mask_prob = mask_prob
        self.seed = seed

    def train_batch(self, step: int) -> Batch:
        gen = rng.generator(self.seed, rng.DATA, step)
        starts = gen.integers(0, len(self.train_ids) - self.seq_len + 1, size=self.batch_size)
        ids = self.train_ids[starts[:, None] + np.arange(self.seq_len)]
        return apply_mlm_mask(ids, self.mask_prob, gen)

    def validation_batches(self, max_batches: int | None = None) -> list[Batch]:
        """Non-overlapping windows of the validation split, masked with a
        fixed stream so every evaluation sees the same positions."""
        n = len(self.val_ids) // self.seq_len
        windows = self.val_ids[: n * self.seq_len].reshape(n, self.seq_len)
        out = []
        for k, i in enumerate(range(0, n, self.batch_size)):
            if max_batches is not None and k >= max_batches:
                break
            out.append(apply_mlm_mask(windows[i:i + self.batch_size], self.mask_prob,
                                      rng.generator(self.seed, rng.EVAL_DATA, k)))
        return out


def make_mlm_batches(text: str, seq_len: int, batch_size: int, mask_prob: float, seed: int,
                     start_step: int = 1):
    """Endless stream of training batches for steps ``start_step, start_step + 1, ...``."""
    data = MLMData(text, seq_len, batch_size, mask_prob, seed)
    step = start_step
    while True:
        yield data.train_batch(step)
        step += 1
